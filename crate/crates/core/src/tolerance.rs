use serde::{Deserialize, Serialize};

use crate::error::{CqaError, Result};
use crate::linalg::DEFAULT_ULP_SCALE;

/// Numerical thresholds used across the analyses. Embedded verbatim in every
/// report so results can be reproduced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Inequality `g_j` counts as active when `g_j >= -act_tol`.
    pub act_tol: f64,
    /// Operational equalities are satisfied when `|h_i| <= eq_tol`.
    pub eq_tol: f64,
    /// Power-flow mismatch bound, infinity norm.
    pub pf_tol: f64,
    /// Stationarity residual bound for KKT multipliers.
    pub stat_tol: f64,
    /// Relative factor in `sigma_max * max(m, n) * rank_tol_scale`.
    pub rank_tol_scale: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            act_tol: 1e-6,
            eq_tol: 1e-8,
            pf_tol: 1e-10,
            stat_tol: 1e-8,
            rank_tol_scale: DEFAULT_ULP_SCALE,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("act_tol", self.act_tol),
            ("eq_tol", self.eq_tol),
            ("pf_tol", self.pf_tol),
            ("stat_tol", self.stat_tol),
            ("rank_tol_scale", self.rank_tol_scale),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(CqaError::Config(format!(
                    "tolerance {name} must be finite and strictly positive, got {value}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Tolerances::default().validate().unwrap();
    }

    #[test]
    fn rejects_zero() {
        let t = Tolerances {
            stat_tol: 0.0,
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }
}
