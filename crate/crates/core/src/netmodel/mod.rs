//! Power network representation and nodal admittance matrix.
//!
//! All quantities are per-unit. Bus order is the case-file order and is never
//! re-sorted; every vector and matrix in the crate is indexed by it.

mod case;

pub use case::{load_case, load_case_from_path, Case, CaseDocument};

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CqaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    #[serde(rename = "type")]
    pub bus_type: BusType,
    pub p_load: f64,
    pub q_load: f64,
    pub g_shunt: f64,
    pub b_shunt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_setpoint: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_setpoint: Option<f64>,
}

impl Bus {
    pub fn pq(id: usize) -> Self {
        Self {
            id,
            bus_type: BusType::Pq,
            p_load: 0.0,
            q_load: 0.0,
            g_shunt: 0.0,
            b_shunt: 0.0,
            v_setpoint: None,
            theta_setpoint: None,
        }
    }

    pub fn slack(id: usize, v: f64, theta: f64) -> Self {
        Self {
            bus_type: BusType::Slack,
            v_setpoint: Some(v),
            theta_setpoint: Some(theta),
            ..Self::pq(id)
        }
    }

    pub fn pv(id: usize, v: f64) -> Self {
        Self {
            bus_type: BusType::Pv,
            v_setpoint: Some(v),
            ..Self::pq(id)
        }
    }
}

/// Π-model line: series admittance plus a total shunt split half per end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    #[serde(rename = "from")]
    pub from_bus: usize,
    #[serde(rename = "to")]
    pub to_bus: usize,
    pub g_series: f64,
    pub b_series: f64,
    pub g_shunt: f64,
    pub b_shunt: f64,
}

impl Line {
    pub fn series(from_bus: usize, to_bus: usize, g: f64, b: f64) -> Self {
        Self {
            from_bus,
            to_bus,
            g_series: g,
            b_series: b,
            g_shunt: 0.0,
            b_shunt: 0.0,
        }
    }

    fn key(&self) -> (usize, usize) {
        (
            self.from_bus.min(self.to_bus),
            self.from_bus.max(self.to_bus),
        )
    }
}

/// Generator injection. `p` and `q` are setpoints or initial values
/// depending on the bus type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    #[serde(default)]
    pub generators: Vec<Generator>,
    /// Carried through ingestion; the math is per-unit and never reads it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_mva: Option<f64>,
}

impl Network {
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>, generators: Vec<Generator>) -> Result<Self> {
        let net = Self {
            buses,
            lines,
            generators,
            base_mva: None,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_line(&self) -> usize {
        self.lines.len()
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.bus_type == BusType::Slack)
            .expect("validated network has a slack bus")
    }

    /// Checks every hard invariant. Connectivity is reported by
    /// [`Network::warnings`] instead.
    pub fn validate(&self) -> Result<()> {
        let n = self.buses.len();
        if n == 0 {
            return Err(CqaError::InvalidNetwork("bus list is empty".into()));
        }
        for (pos, bus) in self.buses.iter().enumerate() {
            if bus.id != pos {
                return Err(CqaError::InvalidNetwork(format!(
                    "bus ids must be 0-based positions: bus at position {pos} has id {}",
                    bus.id
                )));
            }
            let values = [bus.p_load, bus.q_load, bus.g_shunt, bus.b_shunt];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CqaError::InvalidNetwork(format!(
                    "bus {pos} has a non-finite load or shunt"
                )));
            }
            if matches!(bus.bus_type, BusType::Slack | BusType::Pv) {
                match bus.v_setpoint {
                    Some(v) if v.is_finite() && v > 0.0 => {}
                    Some(v) => {
                        return Err(CqaError::InvalidNetwork(format!(
                            "bus {pos}: v_setpoint must be positive, got {v}"
                        )))
                    }
                    None => {
                        return Err(CqaError::InvalidNetwork(format!(
                            "bus {pos}: slack/pv bus requires v_setpoint"
                        )))
                    }
                }
            }
        }
        let slack_count = self
            .buses
            .iter()
            .filter(|b| b.bus_type == BusType::Slack)
            .count();
        if slack_count != 1 {
            return Err(CqaError::InvalidNetwork(format!(
                "exactly one slack bus required, found {slack_count}"
            )));
        }
        let mut seen = HashSet::new();
        for line in &self.lines {
            if line.from_bus >= n || line.to_bus >= n {
                return Err(CqaError::InvalidNetwork(format!(
                    "line {}-{} references a missing bus",
                    line.from_bus, line.to_bus
                )));
            }
            if line.from_bus == line.to_bus {
                return Err(CqaError::InvalidNetwork(format!(
                    "line at bus {} is a self-loop",
                    line.from_bus
                )));
            }
            let params = [line.g_series, line.b_series, line.g_shunt, line.b_shunt];
            if params.iter().any(|v| !v.is_finite()) {
                return Err(CqaError::InvalidNetwork(format!(
                    "line {}-{} has a non-finite parameter",
                    line.from_bus, line.to_bus
                )));
            }
            let (a, b) = line.key();
            if !seen.insert((a, b)) {
                return Err(CqaError::DuplicateLine(a, b));
            }
        }
        for g in &self.generators {
            if g.bus >= n {
                return Err(CqaError::InvalidNetwork(format!(
                    "generator references missing bus {}",
                    g.bus
                )));
            }
        }
        Ok(())
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_bus();
        let adj = self.adjacency();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(k) = stack.pop() {
            for &l in &adj[k] {
                if !seen[l] {
                    seen[l] = true;
                    stack.push(l);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.is_connected() {
            out.push("line graph is not connected".to_string());
        }
        out
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_bus()];
        for line in &self.lines {
            adj[line.from_bus].push(line.to_bus);
            adj[line.to_bus].push(line.from_bus);
        }
        adj
    }

    /// Per-bus generator totals (parallel units are summed).
    pub fn generation(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_bus();
        let (mut p, mut q) = (vec![0.0; n], vec![0.0; n]);
        for g in &self.generators {
            p[g.bus] += g.p;
            q[g.bus] += g.q;
        }
        (p, q)
    }

    pub fn has_generator(&self, bus: usize) -> bool {
        self.generators.iter().any(|g| g.bus == bus)
    }

    pub fn loads(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.buses.iter().map(|b| b.p_load).collect(),
            self.buses.iter().map(|b| b.q_load).collect(),
        )
    }

    /// Nodal shunt plus half of every incident line shunt.
    pub fn lumped_shunts(&self) -> (Vec<f64>, Vec<f64>) {
        let mut g: Vec<f64> = self.buses.iter().map(|b| b.g_shunt).collect();
        let mut b: Vec<f64> = self.buses.iter().map(|b| b.b_shunt).collect();
        for line in &self.lines {
            for k in [line.from_bus, line.to_bus] {
                g[k] += 0.5 * line.g_shunt;
                b[k] += 0.5 * line.b_shunt;
            }
        }
        (g, b)
    }

    pub fn is_shunt_free(&self) -> bool {
        self.buses.iter().all(|b| b.g_shunt == 0.0 && b.b_shunt == 0.0)
            && self.lines.iter().all(|l| l.g_shunt == 0.0 && l.b_shunt == 0.0)
    }

    pub fn with_loads(&self, p_load: &[f64], q_load: &[f64]) -> Result<Self> {
        self.check_len(p_load.len(), "p_load")?;
        self.check_len(q_load.len(), "q_load")?;
        let mut net = self.clone();
        for (k, bus) in net.buses.iter_mut().enumerate() {
            bus.p_load = p_load[k];
            bus.q_load = q_load[k];
        }
        Ok(net)
    }

    /// Sets nodal shunts so that the lumped shunt at each bus equals the
    /// requested value; line shunts are left untouched.
    pub fn with_lumped_shunts(&self, g: &[f64], b: &[f64]) -> Result<Self> {
        self.check_len(g.len(), "lumped g_shunt")?;
        self.check_len(b.len(), "lumped b_shunt")?;
        let (g_now, b_now) = self.lumped_shunts();
        let mut net = self.clone();
        for (k, bus) in net.buses.iter_mut().enumerate() {
            bus.g_shunt += g[k] - g_now[k];
            bus.b_shunt += b[k] - b_now[k];
        }
        Ok(net)
    }

    pub fn with_line_series(&self, g: &[f64], b: &[f64]) -> Result<Self> {
        for (len, what) in [(g.len(), "line g_series"), (b.len(), "line b_series")] {
            if len != self.n_line() {
                return Err(CqaError::Dimension {
                    expected: self.n_line(),
                    got: len,
                    context: what,
                });
            }
        }
        let mut net = self.clone();
        for (i, line) in net.lines.iter_mut().enumerate() {
            line.g_series = g[i];
            line.b_series = b[i];
        }
        Ok(net)
    }

    fn check_len(&self, got: usize, context: &'static str) -> Result<()> {
        if got != self.n_bus() {
            return Err(CqaError::Dimension {
                expected: self.n_bus(),
                got,
                context,
            });
        }
        Ok(())
    }
}

/// Nodal admittance matrix `Y = G + jB`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmittanceMatrix {
    #[serde(rename = "G", with = "crate::linalg::serde_rows")]
    pub g: DMatrix<f64>,
    #[serde(rename = "B", with = "crate::linalg::serde_rows")]
    pub b: DMatrix<f64>,
}

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    /// Real and imaginary parts of `Y · 1`.
    pub fn row_sums(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        let g = (0..n).map(|k| self.g.row(k).sum()).collect();
        let b = (0..n).map(|k| self.b.row(k).sum()).collect();
        (g, b)
    }
}

/// Builds `Y` entry by entry:
/// diagonal `y_sh_k + Σ (y_ki + ½ y_sh_ki)`, off-diagonal `-y_kl` for
/// neighbours, zero otherwise.
pub fn build_ybus(net: &Network) -> Result<AdmittanceMatrix> {
    let n = net.n_bus();
    let mut seen = HashSet::new();
    for line in &net.lines {
        let key = line.key();
        if !seen.insert(key) {
            return Err(CqaError::DuplicateLine(key.0, key.1));
        }
        if line.from_bus >= n || line.to_bus >= n || line.from_bus == line.to_bus {
            return Err(CqaError::InvalidNetwork(format!(
                "line {}-{} has invalid endpoints",
                line.from_bus, line.to_bus
            )));
        }
    }

    let mut g = DMatrix::<f64>::zeros(n, n);
    let mut b = DMatrix::<f64>::zeros(n, n);
    for (k, bus) in net.buses.iter().enumerate() {
        g[(k, k)] += bus.g_shunt;
        b[(k, k)] += bus.b_shunt;
    }
    for line in &net.lines {
        let (k, l) = (line.from_bus, line.to_bus);
        for end in [k, l] {
            g[(end, end)] += line.g_series + 0.5 * line.g_shunt;
            b[(end, end)] += line.b_series + 0.5 * line.b_shunt;
        }
        g[(k, l)] -= line.g_series;
        g[(l, k)] -= line.g_series;
        b[(k, l)] -= line.b_series;
        b[(l, k)] -= line.b_series;
    }
    Ok(AdmittanceMatrix { g, b })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus(g12: f64, b12: f64) -> Network {
        Network::new(
            vec![Bus::slack(0, 1.0, 0.0), Bus::pq(1)],
            vec![Line::series(0, 1, g12, b12)],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn two_bus_unit_susceptance() {
        // y12 = -1j  =>  Y = [[-1j, 1j], [1j, -1j]]
        let y = build_ybus(&two_bus(0.0, -1.0)).unwrap();
        assert_eq!(y.g, DMatrix::zeros(2, 2));
        assert_eq!(y.b, DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]));
        // No negative zeros in the conductance part.
        assert!(y.g.iter().all(|v| v.is_sign_positive()));
    }

    #[test]
    fn single_bus_with_shunt() {
        let mut bus = Bus::slack(0, 1.0, 0.0);
        bus.g_shunt = 0.1;
        bus.b_shunt = 0.2;
        let net = Network::new(vec![bus], vec![], vec![]).unwrap();
        let y = build_ybus(&net).unwrap();
        assert_eq!(y.g[(0, 0)], 0.1);
        assert_eq!(y.b[(0, 0)], 0.2);
    }

    #[test]
    fn line_shunt_split_half_per_end() {
        let mut net = two_bus(1.0, -4.0);
        net.lines[0].b_shunt = 0.3;
        net.buses[1].b_shunt = 0.05;
        let y = build_ybus(&net).unwrap();
        assert_eq!(y.b[(0, 0)], -4.0 + 0.15);
        assert_eq!(y.b[(1, 1)], -4.0 + 0.15 + 0.05);
        let (_, bsum) = y.row_sums();
        let (_, lumped) = net.lumped_shunts();
        for k in 0..2 {
            assert!((bsum[k] - lumped[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_duplicate_line() {
        let res = Network::new(
            vec![Bus::slack(0, 1.0, 0.0), Bus::pq(1)],
            vec![Line::series(0, 1, 0.0, -1.0), Line::series(1, 0, 0.0, -2.0)],
            vec![],
        );
        assert!(matches!(res, Err(CqaError::DuplicateLine(0, 1))));

        // build_ybus rejects it too when validation was bypassed.
        let mut net = two_bus(0.0, -1.0);
        net.lines.push(Line::series(1, 0, 0.0, -2.0));
        assert!(matches!(build_ybus(&net), Err(CqaError::DuplicateLine(0, 1))));
    }

    #[test]
    fn rejects_two_slacks_and_empty() {
        assert!(Network::new(vec![], vec![], vec![]).is_err());
        let res = Network::new(
            vec![Bus::slack(0, 1.0, 0.0), Bus::slack(1, 1.0, 0.0)],
            vec![Line::series(0, 1, 0.0, -1.0)],
            vec![],
        );
        assert!(res.is_err());
    }

    #[test]
    fn disconnected_is_a_warning_only() {
        let net = Network::new(vec![Bus::slack(0, 1.0, 0.0), Bus::pq(1)], vec![], vec![]).unwrap();
        assert!(!net.is_connected());
        assert_eq!(net.warnings().len(), 1);
    }

    #[test]
    fn lumped_shunt_setter_round_trips() {
        let mut net = two_bus(0.5, -2.0);
        net.lines[0].g_shunt = 0.02;
        net.lines[0].b_shunt = 0.1;
        let target_g = [0.3, -0.1];
        let target_b = [0.2, 0.4];
        let moved = net.with_lumped_shunts(&target_g, &target_b).unwrap();
        let (g, b) = moved.lumped_shunts();
        for k in 0..2 {
            assert!((g[k] - target_g[k]).abs() < 1e-15);
            assert!((b[k] - target_b[k]).abs() < 1e-15);
        }
    }
}
