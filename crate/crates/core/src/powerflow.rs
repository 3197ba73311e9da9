//! AC power-flow residual, its analytic Jacobian, and a plain Newton solver.
//!
//! The state is flattened as `(p_gen, q_gen, v, theta)`, each block of length
//! N. Voltages are polar, `u_k = v_k exp(j theta_k)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CqaError, Result};
use crate::netmodel::{AdmittanceMatrix, BusType, Network};

/// Index arithmetic for the flattened state of an N-bus system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n_bus: usize,
}

impl StateLayout {
    pub fn new(n_bus: usize) -> Self {
        Self { n_bus }
    }
    pub fn len(&self) -> usize {
        4 * self.n_bus
    }
    pub fn is_empty(&self) -> bool {
        self.n_bus == 0
    }
    pub fn p(&self, k: usize) -> usize {
        k
    }
    pub fn q(&self, k: usize) -> usize {
        self.n_bus + k
    }
    pub fn v(&self, k: usize) -> usize {
        2 * self.n_bus + k
    }
    pub fn theta(&self, k: usize) -> usize {
        3 * self.n_bus + k
    }

    /// Human-readable name of a flattened entry, e.g. `v[2]`.
    pub fn label(&self, index: usize) -> String {
        let n = self.n_bus;
        let (block, k) = (index / n, index % n);
        let name = ["p", "q", "v", "theta"][block];
        format!("{name}[{k}]")
    }
}

/// Operating point `x = (p_gen, q_gen, v, theta)` plus the free/fixed mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub p_gen: Vec<f64>,
    pub q_gen: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    /// One flag per flattened entry; `true` marks an optimization variable.
    pub free_mask: Vec<bool>,
}

impl SystemState {
    /// Zero generation, unit voltages, zero angles, everything free.
    pub fn flat(n_bus: usize) -> Self {
        Self {
            p_gen: vec![0.0; n_bus],
            q_gen: vec![0.0; n_bus],
            v: vec![1.0; n_bus],
            theta: vec![0.0; n_bus],
            free_mask: vec![true; 4 * n_bus],
        }
    }

    pub fn from_flat(n_bus: usize, values: &[f64]) -> Result<Self> {
        if values.len() != 4 * n_bus {
            return Err(CqaError::Dimension {
                expected: 4 * n_bus,
                got: values.len(),
                context: "flattened state",
            });
        }
        let block = |i: usize| values[i * n_bus..(i + 1) * n_bus].to_vec();
        Ok(Self {
            p_gen: block(0),
            q_gen: block(1),
            v: block(2),
            theta: block(3),
            free_mask: vec![true; 4 * n_bus],
        })
    }

    pub fn n_bus(&self) -> usize {
        self.v.len()
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.n_bus())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * self.n_bus());
        out.extend_from_slice(&self.p_gen);
        out.extend_from_slice(&self.q_gen);
        out.extend_from_slice(&self.v);
        out.extend_from_slice(&self.theta);
        out
    }

    pub fn get(&self, index: usize) -> f64 {
        let n = self.n_bus();
        match index / n {
            0 => self.p_gen[index % n],
            1 => self.q_gen[index % n],
            2 => self.v[index % n],
            _ => self.theta[index % n],
        }
    }

    pub fn set(&mut self, index: usize, value: f64) {
        let n = self.n_bus();
        let slot = match index / n {
            0 => &mut self.p_gen[index % n],
            1 => &mut self.q_gen[index % n],
            2 => &mut self.v[index % n],
            _ => &mut self.theta[index % n],
        };
        *slot = value;
    }

    /// Fixes the slack `v`, `theta` and PV `v`; everything else is free.
    pub fn with_mask_from_bus_types(mut self, net: &Network) -> Self {
        let layout = self.layout();
        self.free_mask = vec![true; layout.len()];
        for (k, bus) in net.buses.iter().enumerate() {
            match bus.bus_type {
                BusType::Slack => {
                    self.free_mask[layout.v(k)] = false;
                    self.free_mask[layout.theta(k)] = false;
                }
                BusType::Pv => self.free_mask[layout.v(k)] = false,
                BusType::Pq => {}
            }
        }
        self
    }

    pub fn free_indices(&self) -> Vec<usize> {
        self.free_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &free)| free.then_some(i))
            .collect()
    }

    pub(crate) fn check_dims(&self, n_bus: usize) -> Result<()> {
        let lens = [
            self.p_gen.len(),
            self.q_gen.len(),
            self.v.len(),
            self.theta.len(),
        ];
        if lens.iter().any(|&l| l != n_bus) || self.free_mask.len() != 4 * n_bus {
            return Err(CqaError::Dimension {
                expected: n_bus,
                got: self.v.len(),
                context: "state blocks",
            });
        }
        Ok(())
    }
}

impl Serialize for SystemState {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_flat().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SystemState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let flat: Vec<f64> = Vec::deserialize(d)?;
        if !flat.len().is_multiple_of(4) {
            return Err(serde::de::Error::custom(
                "flattened state length must be a multiple of 4",
            ));
        }
        SystemState::from_flat(flat.len() / 4, &flat).map_err(serde::de::Error::custom)
    }
}

/// Network injections `Re`/`Im` of `diag(u) (Y u)^*` in polar form.
pub fn power_injections(y: &AdmittanceMatrix, v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for k in 0..n {
        for l in 0..n {
            let (g, b) = (y.g[(k, l)], y.b[(k, l)]);
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let (s, c) = (theta[k] - theta[l]).sin_cos();
            let vv = v[k] * v[l];
            p[k] += vv * (g * c + b * s);
            q[k] += vv * (g * s - b * c);
        }
    }
    (p, q)
}

fn check_inputs(net: &Network, y: &AdmittanceMatrix, x: &SystemState) -> Result<()> {
    let n = net.n_bus();
    if y.dim() != n {
        return Err(CqaError::Dimension {
            expected: n,
            got: y.dim(),
            context: "admittance matrix",
        });
    }
    x.check_dims(n)
}

/// `F(x)`: N real-power mismatches followed by N reactive mismatches.
pub fn pf_residual(net: &Network, y: &AdmittanceMatrix, x: &SystemState) -> Result<DVector<f64>> {
    check_inputs(net, y, x)?;
    let n = net.n_bus();
    let (p_inj, q_inj) = power_injections(y, &x.v, &x.theta);
    let mut f = DVector::<f64>::zeros(2 * n);
    for (k, bus) in net.buses.iter().enumerate() {
        f[k] = x.p_gen[k] - bus.p_load - p_inj[k];
        f[n + k] = x.q_gen[k] - bus.q_load - q_inj[k];
    }
    Ok(f)
}

/// Analytic `∇F`, 2N × 4N, columns in flattened state order.
pub fn pf_jacobian(net: &Network, y: &AdmittanceMatrix, x: &SystemState) -> Result<DMatrix<f64>> {
    check_inputs(net, y, x)?;
    let n = net.n_bus();
    let layout = StateLayout::new(n);
    let mut jac = DMatrix::<f64>::zeros(2 * n, 4 * n);
    let (v, th) = (&x.v, &x.theta);

    for k in 0..n {
        jac[(k, layout.p(k))] = 1.0;
        jac[(n + k, layout.q(k))] = 1.0;

        let (gkk, bkk) = (y.g[(k, k)], y.b[(k, k)]);
        // Derivatives of the injections P_k, Q_k; F carries them negated.
        let mut dp_dvk = 2.0 * v[k] * gkk;
        let mut dq_dvk = -2.0 * v[k] * bkk;
        let mut dp_dthk = 0.0;
        let mut dq_dthk = 0.0;
        for l in 0..n {
            if l == k {
                continue;
            }
            let (g, b) = (y.g[(k, l)], y.b[(k, l)]);
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let (s, c) = (th[k] - th[l]).sin_cos();
            let a_p = g * c + b * s;
            let a_q = g * s - b * c;
            dp_dvk += v[l] * a_p;
            dq_dvk += v[l] * a_q;
            dp_dthk += -v[k] * v[l] * a_q;
            dq_dthk += v[k] * v[l] * a_p;

            jac[(k, layout.v(l))] = -v[k] * a_p;
            jac[(n + k, layout.v(l))] = -v[k] * a_q;
            jac[(k, layout.theta(l))] = -v[k] * v[l] * a_q;
            jac[(n + k, layout.theta(l))] = v[k] * v[l] * a_p;
        }
        jac[(k, layout.v(k))] = -dp_dvk;
        jac[(n + k, layout.v(k))] = -dq_dvk;
        jac[(k, layout.theta(k))] = -dp_dthk;
        jac[(n + k, layout.theta(k))] = -dq_dthk;
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub pf_tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            pf_tol: 1e-10,
            max_iter: 50,
        }
    }
}

/// Converged power-flow result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PfSolution {
    pub state: SystemState,
    /// Newton updates taken; zero when the start already satisfies the tolerance.
    pub iterations: usize,
    /// Final `‖F‖_∞`, re-evaluated by [`pf_residual`].
    pub mismatch: f64,
    pub trace: Vec<f64>,
}

/// Reduced-system unknowns for the bus types: slack `(p, q)`, PV `(q, theta)`,
/// PQ `(v, theta)`.
pub fn pf_unknowns(net: &Network) -> Vec<usize> {
    let layout = StateLayout::new(net.n_bus());
    let mut out = Vec::with_capacity(2 * net.n_bus());
    for (k, bus) in net.buses.iter().enumerate() {
        match bus.bus_type {
            BusType::Slack => out.extend([layout.p(k), layout.q(k)]),
            BusType::Pv => out.extend([layout.q(k), layout.theta(k)]),
            BusType::Pq => out.extend([layout.v(k), layout.theta(k)]),
        }
    }
    out.sort_unstable();
    out
}

/// Writes the network setpoints into `x`: generation setpoints at PV/PQ,
/// voltage setpoints at slack/PV, angle setpoint at the slack.
pub fn apply_setpoints(net: &Network, x: &mut SystemState) {
    let (p_set, q_set) = net.generation();
    for (k, bus) in net.buses.iter().enumerate() {
        match bus.bus_type {
            BusType::Slack => {
                x.v[k] = bus.v_setpoint.unwrap_or(1.0);
                x.theta[k] = bus.theta_setpoint.unwrap_or(0.0);
            }
            BusType::Pv => {
                x.p_gen[k] = p_set[k];
                x.v[k] = bus.v_setpoint.unwrap_or(1.0);
            }
            BusType::Pq => {
                x.p_gen[k] = p_set[k];
                x.q_gen[k] = q_set[k];
            }
        }
    }
}

/// Flat start: unit voltage at PQ buses, setpoints elsewhere, zero angles
/// except the slack reference.
pub fn flat_start(net: &Network) -> SystemState {
    let mut x = SystemState::flat(net.n_bus());
    let (p_set, q_set) = net.generation();
    x.p_gen = p_set;
    x.q_gen = q_set;
    apply_setpoints(net, &mut x);
    x
}

/// Plain Newton on the reduced power-flow system. `warm_start` supplies the
/// initial values of the unknowns; fixed entries always come from the network.
pub fn newton_pf(
    net: &Network,
    y: &AdmittanceMatrix,
    opts: &NewtonOptions,
    warm_start: Option<&SystemState>,
) -> Result<PfSolution> {
    let mut x0 = match warm_start {
        Some(start) => {
            start.check_dims(net.n_bus())?;
            start.clone()
        }
        None => flat_start(net),
    };
    apply_setpoints(net, &mut x0);
    let unknowns = pf_unknowns(net);
    let (state, iterations, trace) = newton_square(&x0, &unknowns, opts, |x| {
        Ok((pf_residual(net, y, x)?, pf_jacobian(net, y, x)?))
    })?;
    let state = state.with_mask_from_bus_types(net);
    let mismatch = pf_residual(net, y, &state)?.amax();
    if mismatch > opts.pf_tol {
        return Err(CqaError::NonConvergence {
            iterations,
            final_mismatch: mismatch,
            trace,
        });
    }
    Ok(PfSolution {
        state,
        iterations,
        mismatch,
        trace,
    })
}

/// Pivot ratio below which the Newton matrix is declared singular.
const SINGULAR_PIVOT_RATIO: f64 = 1e-13;

/// Newton iteration on a square system. `eval` returns the residual and its
/// Jacobian over the full flattened state; only `unknowns` columns are used.
pub(crate) fn newton_square<E>(
    x0: &SystemState,
    unknowns: &[usize],
    opts: &NewtonOptions,
    eval: E,
) -> Result<(SystemState, usize, Vec<f64>)>
where
    E: Fn(&SystemState) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    let mut x = x0.clone();
    let mut trace = Vec::new();
    for iteration in 0..=opts.max_iter {
        let (residual, jac) = eval(&x)?;
        if residual.len() != unknowns.len() {
            return Err(CqaError::Dimension {
                expected: unknowns.len(),
                got: residual.len(),
                context: "square Newton system",
            });
        }
        let mismatch = residual.amax();
        trace.push(mismatch);
        if !mismatch.is_finite() || mismatch > 1e12 {
            break;
        }
        if mismatch <= opts.pf_tol {
            return Ok((x, iteration, trace));
        }
        if iteration == opts.max_iter {
            break;
        }
        let reduced = jac.select_columns(unknowns);
        let lu = reduced.full_piv_lu();
        let diag = lu.u().diagonal();
        let max_pivot = diag.amax();
        let min_pivot = diag.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
        let pivot_ratio = if max_pivot > 0.0 { min_pivot / max_pivot } else { 0.0 };
        if pivot_ratio < SINGULAR_PIVOT_RATIO {
            return Err(CqaError::SingularJacobian {
                iteration,
                pivot_ratio,
            });
        }
        let step = lu
            .solve(&(-residual))
            .ok_or(CqaError::SingularJacobian {
                iteration,
                pivot_ratio,
            })?;
        for (i, &col) in unknowns.iter().enumerate() {
            x.set(col, x.get(col) + step[i]);
        }
    }
    let iterations = trace.len().saturating_sub(1);
    Err(CqaError::NonConvergence {
        iterations,
        final_mismatch: trace.last().copied().unwrap_or(f64::NAN),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_ybus, Bus, Generator, Line};

    fn two_bus_lossless() -> Network {
        Network::new(
            vec![Bus::slack(0, 1.0, 0.0), Bus::pq(1)],
            vec![Line::series(0, 1, 0.0, -1.0)],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn flat_no_load_residual_is_exactly_zero() {
        let net = Network::new(
            vec![Bus::slack(0, 1.0, 0.0), Bus::pq(1), Bus::pq(2)],
            vec![
                Line::series(0, 1, 1.0, -5.0),
                Line::series(1, 2, 2.0, -4.0),
                Line::series(0, 2, 0.5, -3.0),
            ],
            vec![],
        )
        .unwrap();
        let y = build_ybus(&net).unwrap();
        let f = pf_residual(&net, &y, &SystemState::flat(3)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_bus_injections_cancel() {
        let mut bus = Bus::slack(0, 1.0, 0.0);
        bus.p_load = 0.7;
        bus.q_load = -0.2;
        let net = Network::new(vec![bus], vec![], vec![]).unwrap();
        let y = build_ybus(&net).unwrap();
        let mut x = SystemState::flat(1);
        x.p_gen[0] = 0.7;
        x.q_gen[0] = -0.2;
        assert_eq!(pf_residual(&net, &y, &x).unwrap().amax(), 0.0);
    }

    #[test]
    fn generation_blocks_are_identity() {
        let net = two_bus_lossless();
        let y = build_ybus(&net).unwrap();
        let mut x = SystemState::flat(2);
        x.v[1] = 1.3;
        x.theta[1] = 0.4;
        let jac = pf_jacobian(&net, &y, &x).unwrap();
        for k in 0..2 {
            for l in 0..2 {
                let expect = if k == l { 1.0 } else { 0.0 };
                assert_eq!(jac[(k, l)], expect);
                assert_eq!(jac[(2 + k, 2 + l)], expect);
                assert_eq!(jac[(k, 2 + l)], 0.0);
                assert_eq!(jac[(2 + k, l)], 0.0);
            }
        }
    }

    #[test]
    fn lossless_line_real_injections_cancel() {
        let net = two_bus_lossless();
        let y = build_ybus(&net).unwrap();
        for (v2, th2) in [(1.1, 0.3), (0.7, -1.2), (1.9, 2.5)] {
            let (p, _) = power_injections(&y, &[1.05, v2], &[0.1, th2]);
            assert!((p[0] + p[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn newton_flat_no_load_converges_immediately() {
        let net = two_bus_lossless();
        let y = build_ybus(&net).unwrap();
        let sol = newton_pf(&net, &y, &NewtonOptions::default(), None).unwrap();
        assert!(sol.iterations <= 1);
        assert_eq!(sol.state.v, vec![1.0, 1.0]);
    }

    #[test]
    fn newton_reports_non_convergence_beyond_transfer_limit() {
        let mut net = two_bus_lossless();
        net.generators.push(Generator {
            bus: 1,
            p: -2.0,
            q: -2.0,
        });
        let y = build_ybus(&net).unwrap();
        let err = newton_pf(&net, &y, &NewtonOptions::default(), None).unwrap_err();
        assert!(matches!(
            err,
            CqaError::NonConvergence { .. } | CqaError::SingularJacobian { .. }
        ));
    }

    #[test]
    fn state_flat_round_trip_and_labels() {
        let x = SystemState::from_flat(2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(x.v, vec![5.0, 6.0]);
        assert_eq!(x.get(7), 8.0);
        assert_eq!(x.layout().label(5), "v[1]");
        let json = serde_json::to_string(&x).unwrap();
        let back: SystemState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, x);
    }
}
