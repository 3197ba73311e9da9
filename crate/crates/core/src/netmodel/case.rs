use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bus, Generator, Line, Network};
use crate::constraints::OperationalConstraint;
use crate::cqkit::CostSpec;
use crate::error::{CqaError, Result};
use crate::powerflow::SystemState;

/// On-disk case layout. Unknown top-level fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseDocument {
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub lines: Vec<Line>,
    #[serde(default)]
    pub generators: Vec<Generator>,
    #[serde(default)]
    pub constraints: Vec<OperationalConstraint>,
    #[serde(default)]
    pub cost: CostSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_mva: Option<f64>,
    /// Optional flattened `(p, q, v, theta)` start / analysis point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
}

/// A validated case.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub network: Network,
    pub constraints: Vec<OperationalConstraint>,
    pub cost: CostSpec,
    pub start: Option<SystemState>,
}

impl Case {
    pub fn from_document(doc: CaseDocument) -> Result<Self> {
        let network = Network {
            buses: doc.buses,
            lines: doc.lines,
            generators: doc.generators,
            base_mva: doc.base_mva,
        };
        network.validate()?;
        let n = network.n_bus();
        for c in &doc.constraints {
            c.validate(n)?;
        }
        doc.cost.validate(4 * n)?;
        let start = doc
            .start
            .map(|flat| SystemState::from_flat(n, &flat).map(|s| s.with_mask_from_bus_types(&network)))
            .transpose()?;
        Ok(Self {
            network,
            constraints: doc.constraints,
            cost: doc.cost,
            start,
        })
    }

    pub fn to_document(&self) -> CaseDocument {
        CaseDocument {
            buses: self.network.buses.clone(),
            lines: self.network.lines.clone(),
            generators: self.network.generators.clone(),
            constraints: self.constraints.clone(),
            cost: self.cost.clone(),
            base_mva: self.network.base_mva,
            start: self.start.as_ref().map(SystemState::to_flat),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }
}

/// Parses and validates a JSON case. Schema errors carry the JSON path.
pub fn load_case(text: &str) -> Result<Case> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: CaseDocument = serde_path_to_error::deserialize(de).map_err(|e| CqaError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    Case::from_document(doc)
}

pub fn load_case_from_path(path: impl AsRef<Path>) -> Result<Case> {
    let text = std::fs::read_to_string(path)?;
    load_case(&text)
}
