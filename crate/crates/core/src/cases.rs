//! Built-in analytic fixtures and small test networks.
//!
//! Every fixture carries its ground truth and can re-check it through the
//! public APIs via [`reproduce`].

use std::f64::consts::{FRAC_PI_6, PI};

use nalgebra::DVector;
use serde::Serialize;

use crate::constraints::{evaluate, fixed_licq_check, ConstraintSystem, FixedLicqReport, OperationalConstraint};
use crate::cqkit::{kkt_solve, kkt_solve_stack, licq_check, ActiveStack, Classification, CostSpec, MultiplierSet};
use crate::error::{CqaError, Result};
use crate::linalg::rank_analysis;
use crate::netmodel::{build_ybus, Bus, Case, Generator, Line, Network};
use crate::perturb::{check_rank_hypothesis, param_jacobian, ModelKind};
use crate::powerflow::{newton_pf, pf_residual, NewtonOptions, StateLayout, SystemState};
use crate::tolerance::Tolerances;

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 5] = ["ex1", "ex2", "ex3", "mesh3", "radial5"];

/// Expected `(-inf, upper]` range of one multiplier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriceBound {
    pub index: usize,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    /// The analytic point, masked by bus type.
    pub point: SystemState,
    pub rows: usize,
    pub rank: usize,
    pub classification: Option<Classification>,
    pub particular: Option<Vec<f64>>,
    pub direction: Option<Vec<f64>>,
    pub price: Option<PriceBound>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureBundle {
    pub name: String,
    pub alpha: Option<f64>,
    pub case: Case,
    pub truth: GroundTruth,
}

impl FixtureBundle {
    pub fn system(&self, tol: &Tolerances) -> Result<ConstraintSystem> {
        ConstraintSystem::new(self.case.network.clone(), &self.case.constraints, *tol)
    }

    pub fn case_json(&self) -> Result<String> {
        self.case.to_json()
    }
}

impl Serialize for Case {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_document().serialize(s)
    }
}

/// Slack at bus 0, PQ bus 1, lossless line `y_12 = -1j`.
pub fn two_bus_lossless(generators: Vec<Generator>) -> Result<Network> {
    Network::new(
        vec![Bus::slack(0, 1.0, 0.0), Bus::pq(1)],
        vec![Line::series(0, 1, 0.0, -1.0)],
        generators,
    )
}

/// Tangency example: power-factor coupled flexible injection at bus 1 and an
/// upper voltage limit `sqrt(α² + 1)` that touches the feasible curve.
pub fn example1(alpha: f64) -> Result<FixtureBundle> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(CqaError::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let v_bar = (alpha * alpha + 1.0).sqrt();
    let layout = StateLayout::new(2);
    let net = two_bus_lossless(vec![
        Generator {
            bus: 0,
            p: -alpha,
            q: 0.0,
        },
        Generator {
            bus: 1,
            p: alpha,
            q: alpha * alpha,
        },
    ])?;
    let constraints = vec![
        OperationalConstraint::linear_eq(&[(layout.q(1), 1.0), (layout.p(1), -alpha)], 0.0),
        OperationalConstraint::box_upper(layout.v(1), v_bar),
    ];
    let cost = CostSpec::zero()
        .quadratic(layout.p(0), 1.0)
        .linear(layout.p(0), 2.0 * alpha)
        .linear(layout.p(1), alpha);
    let point = SystemState::from_flat(2, &[-alpha, alpha, 0.0, alpha * alpha, 1.0, v_bar, 0.0, alpha.atan()])?
        .with_mask_from_bus_types(&net);
    Ok(FixtureBundle {
        name: "ex1".into(),
        alpha: Some(alpha),
        truth: GroundTruth {
            point: point.clone(),
            rows: 6,
            rank: 5,
            classification: Some(Classification::Ray),
            particular: Some(vec![-alpha, -alpha, 0.0, 0.0, 0.0, 0.0]),
            direction: Some(vec![0.0, -alpha, 0.0, 1.0, -1.0, v_bar]),
            price: Some(PriceBound {
                index: 1,
                upper: -alpha,
            }),
        },
        case: Case {
            network: net,
            constraints,
            cost,
            start: Some(point),
        },
    })
}

/// Parameters of the cross-over example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Example2Params {
    pub alpha: f64,
    pub s_max_sq: f64,
    pub p_load: f64,
}

impl Default for Example2Params {
    fn default() -> Self {
        let r3 = 3f64.sqrt();
        Self {
            alpha: 2.0 / 9.0 * (r3 + 3.0),
            s_max_sq: 2.0 - r3,
            p_load: -(15.0 * r3 - 23.0) / 8.0,
        }
    }
}

/// Cross-over example in the reduced `(v₂, θ₂)` coordinates, with the
/// power-flow quantities at bus 2 eliminated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Example2Reduced {
    pub params: Example2Params,
}

impl Example2Reduced {
    pub fn h(&self, v: f64, th: f64) -> f64 {
        let a = self.params.alpha;
        v * v + v * (a * th.sin() - th.cos()) - a * (v.sqrt() + self.params.p_load)
    }

    pub fn g(&self, v: f64, th: f64) -> f64 {
        v * v * (v * v - 2.0 * v * th.cos() + 1.0) - self.params.s_max_sq
    }

    pub fn grad_h(&self, v: f64, th: f64) -> [f64; 2] {
        let a = self.params.alpha;
        [
            2.0 * v + a * th.sin() - th.cos() - a / (2.0 * v.sqrt()),
            v * (a * th.cos() + th.sin()),
        ]
    }

    pub fn grad_g(&self, v: f64, th: f64) -> [f64; 2] {
        [4.0 * v.powi(3) - 6.0 * v * v * th.cos() + 2.0 * v, 2.0 * v.powi(3) * th.sin()]
    }

    /// Equality row then the (active) inequality row.
    pub fn stack(&self, v: f64, th: f64) -> ActiveStack {
        ActiveStack::from_rows(
            &[self.grad_h(v, th).to_vec()],
            &[(0, self.grad_g(v, th).to_vec())],
            vec!["v[1]".into(), "theta[1]".into()],
        )
    }

    pub fn fixed_licq(&self, v: f64, th: f64, tol: &Tolerances) -> FixedLicqReport {
        let stack = self.stack(v, th);
        FixedLicqReport::from_rank(&rank_analysis(&stack.matrix, tol.rank_tol_scale), vec![0])
    }

    /// Angle between the two constraint gradients, in `[0, π/2]`.
    pub fn gradient_angle(&self, v: f64, th: f64) -> f64 {
        let (a, b) = (self.grad_h(v, th), self.grad_g(v, th));
        let dot = a[0] * b[0] + a[1] * b[1];
        let cross = a[0] * b[1] - a[1] * b[0];
        cross.abs().atan2(dot.abs())
    }

    pub fn kkt(&self, v: f64, th: f64, grad_f: [f64; 2], tol: &Tolerances) -> Result<MultiplierSet> {
        kkt_solve_stack(&self.stack(v, th), &DVector::from_row_slice(&grad_f), tol)
    }
}

/// The reduced-view point and probe cost gradient of the cross-over example.
pub const EXAMPLE2_POINT: (f64, f64) = (1.0, FRAC_PI_6);
pub const EXAMPLE2_PROBE_GRADIENT: [f64; 2] = [0.0, 1.0];

/// Cross-over example as a full two-bus system with the exponential load
/// equality and the apparent-power limit at bus 1.
pub fn example2() -> Result<FixtureBundle> {
    let prm = Example2Params::default();
    let (v2, th2) = EXAMPLE2_POINT;
    // Injections of the lossless line at the point.
    let p2 = v2 * th2.sin();
    let q2 = v2 * v2 - v2 * th2.cos();
    let q1 = 1.0 - v2 * th2.cos();
    let net = two_bus_lossless(vec![Generator { bus: 0, p: -p2, q: q1 }, Generator { bus: 1, p: p2, q: q2 }])?;
    let layout = StateLayout::new(2);
    let constraints = vec![
        OperationalConstraint::exp_load_eq(1, prm.alpha, prm.p_load),
        OperationalConstraint::apparent_power(1, prm.s_max_sq),
    ];
    let point =
        SystemState::from_flat(2, &[-p2, p2, q1, q2, 1.0, v2, 0.0, th2])?.with_mask_from_bus_types(&net);
    Ok(FixtureBundle {
        name: "ex2".into(),
        alpha: Some(prm.alpha),
        truth: GroundTruth {
            point: point.clone(),
            rows: 6,
            rank: 5,
            classification: Some(Classification::None),
            particular: None,
            direction: None,
            price: None,
        },
        case: Case {
            network: net,
            constraints,
            cost: CostSpec::zero().linear(layout.theta(1), 1.0),
            start: Some(point),
        },
    })
}

/// No-load, flat-profile configuration of a shunt-free network.
pub fn example3(net: &Network) -> Result<FixtureBundle> {
    if !net.is_shunt_free() {
        return Err(CqaError::InvalidNetwork(
            "example3 requires a network without shunt admittances".into(),
        ));
    }
    let n = net.n_bus();
    let mut net = net.with_loads(&vec![0.0; n], &vec![0.0; n])?;
    net.generators.clear();
    for bus in &mut net.buses {
        if bus.v_setpoint.is_some() {
            bus.v_setpoint = Some(1.0);
        }
        if bus.theta_setpoint.is_some() {
            bus.theta_setpoint = Some(0.0);
        }
    }
    let point = SystemState::flat(n).with_mask_from_bus_types(&net);
    let free = point.free_indices().len();
    Ok(FixtureBundle {
        name: "ex3".into(),
        alpha: None,
        truth: GroundTruth {
            point: point.clone(),
            rows: 2 * n,
            rank: 2 * n.min(free),
            classification: None,
            particular: None,
            direction: None,
            price: None,
        },
        case: Case {
            network: net,
            constraints: vec![],
            cost: CostSpec::zero(),
            start: Some(point),
        },
    })
}

/// Lossy three-bus ring with loads at the PQ buses.
pub fn mesh3() -> Result<Network> {
    let mut b1 = Bus::pq(1);
    b1.p_load = 0.6;
    b1.q_load = 0.2;
    let mut b2 = Bus::pv(2, 1.02);
    b2.p_load = 0.3;
    b2.q_load = 0.1;
    Network::new(
        vec![Bus::slack(0, 1.0, 0.0), b1, b2],
        vec![
            Line {
                b_shunt: 0.04,
                ..Line::series(0, 1, 1.2, -6.0)
            },
            Line::series(1, 2, 0.8, -4.0),
            Line {
                b_shunt: 0.02,
                ..Line::series(0, 2, 1.0, -5.0)
            },
        ],
        vec![Generator {
            bus: 2,
            p: 0.4,
            q: 0.0,
        }],
    )
}

/// Five-bus radial feeder with a capacitor bank at the end.
pub fn radial5() -> Result<Network> {
    let mut buses = vec![Bus::slack(0, 1.0, 0.0)];
    for k in 1..5 {
        let mut b = Bus::pq(k);
        b.p_load = 0.05 * k as f64;
        b.q_load = 0.02 * k as f64;
        buses.push(b);
    }
    buses[4].b_shunt = 0.05;
    let lines = (0..4).map(|k| Line::series(k, k + 1, 4.0, -12.0)).collect();
    Network::new(buses, lines, vec![])
}

fn plain_bundle(name: &str, net: Network) -> Result<FixtureBundle> {
    let y = build_ybus(&net)?;
    let sol = newton_pf(&net, &y, &NewtonOptions::default(), None)?;
    let n = net.n_bus();
    let free = sol.state.free_indices().len();
    Ok(FixtureBundle {
        name: name.into(),
        alpha: None,
        truth: GroundTruth {
            point: sol.state.clone(),
            rows: 2 * n,
            rank: 2 * n.min(free),
            classification: Some(Classification::Unique),
            particular: None,
            direction: None,
            price: None,
        },
        case: Case {
            network: net,
            constraints: vec![],
            cost: CostSpec::zero(),
            start: Some(sol.state),
        },
    })
}

/// Looks up a built-in fixture by name; `alpha` only affects `ex1`.
pub fn builtin(name: &str, alpha: f64) -> Result<FixtureBundle> {
    match name {
        "ex1" => example1(alpha),
        "ex2" => example2(),
        "ex3" => example3(&two_bus_lossless(vec![])?),
        "mesh3" => plain_bundle("mesh3", mesh3()?),
        "radial5" => plain_bundle("radial5", radial5()?),
        other => Err(CqaError::Config(format!(
            "unknown builtin {other:?}; expected one of {}",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReproReport {
    pub which: String,
    pub summary: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub tolerances: Tolerances,
}

#[derive(Default)]
struct Checks(Vec<Check>);

impl Checks {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.0.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    fn all_passed(&self) -> bool {
        self.0.iter().all(|c| c.passed)
    }

    fn finish(self, which: &str, headline: &str, tol: &Tolerances) -> ReproReport {
        let passed = self.all_passed();
        ReproReport {
            which: which.to_string(),
            summary: format!("{headline}: {}", if passed { "PASS" } else { "FAIL" }),
            passed,
            checks: self.0,
            tolerances: *tol,
        }
    }
}

/// Cosine-free comparison of two directions up to sign and scale.
pub fn direction_mismatch(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::INFINITY;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s = dot.signum();
    a.iter()
        .zip(b)
        .map(|(x, y)| (x / na - s * y / nb).abs())
        .fold(0.0, f64::max)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn reproduce_example1(alpha: f64, tol: &Tolerances) -> Result<ReproReport> {
    let fx = example1(alpha)?;
    let cs = fx.system(tol)?;
    let x = &fx.truth.point;
    let mut c = Checks::default();

    let f = pf_residual(&cs.net, &cs.ybus, x)?.amax();
    c.push("power flow at x*", f <= 1e-12, format!("|F|_inf = {f:.3e}"));
    let g = cs.g_values(x)?[0];
    c.push("voltage limit active", g == 0.0, format!("g = {g:e}"));
    let (s, co) = x.theta[1].sin_cos();
    let tang = (s - alpha * co).abs();
    c.push("tangency sin = alpha cos", tang <= 1e-12, format!("residual {tang:.3e}"));

    let cq = licq_check(&cs, x)?;
    let rank_ok = cq.m == fx.truth.rows && cq.numerical_rank == fx.truth.rank && cq.sigma_min <= cq.rank_tol;
    c.push(
        "stack rank",
        rank_ok,
        format!(
            "rank {}/{} of {}x{}, sigma_min {:.3e}, rank_tol {:.3e}",
            cq.numerical_rank, cq.m, cq.m, cq.n_free, cq.sigma_min, cq.rank_tol
        ),
    );

    let ms = kkt_solve(&cs, x, &fx.case.cost)?;
    c.push(
        "classification",
        ms.classification == Classification::Ray,
        ms.classification.to_string(),
    );
    if let Some(want) = &fx.truth.particular {
        let d = max_abs_diff(&ms.particular, want);
        c.push("particular multipliers", d <= 1e-8, format!("max diff {d:.3e}"));
    }
    if let (Some(want), Some(ray)) = (&fx.truth.direction, &ms.ray) {
        let d = direction_mismatch(&ray.direction, want);
        c.push("ray direction", d <= 1e-8, format!("max diff after normalization {d:.3e}"));
    } else {
        c.push("ray direction", false, "no ray reported".into());
    }
    if let Some(price) = &fx.truth.price {
        let range = ms.component_range(price.index);
        let ok = matches!(range, Some((lo, hi)) if lo == f64::NEG_INFINITY && (hi - price.upper).abs() <= 1e-8);
        c.push(
            "price interval",
            ok,
            format!("{:?} vs (-inf, {}]", range, price.upper),
        );
    }
    Ok(c.finish("ex1", "rank 5/6, RAY, nodal price <= -alpha", tol))
}

pub fn reproduce_example2(tol: &Tolerances) -> Result<ReproReport> {
    let red = Example2Reduced {
        params: Example2Params::default(),
    };
    let (v, th) = EXAMPLE2_POINT;
    let mut c = Checks::default();
    let (h, g) = (red.h(v, th), red.g(v, th));
    c.push("h vanishes", h.abs() <= 1e-9, format!("h = {h:.3e}"));
    c.push("g vanishes", g.abs() <= 1e-9, format!("g = {g:.3e}"));
    let angle = red.gradient_angle(v, th);
    c.push("gradients parallel", angle <= 1e-6, format!("angle {angle:.3e} rad"));
    let fl = red.fixed_licq(v, th, tol);
    c.push(
        "fixed LICQ fails",
        !fl.holds && fl.rank == 1 && fl.rows == 2,
        format!("rank {} of {}", fl.rank, fl.rows),
    );
    let ms = red.kkt(v, th, EXAMPLE2_PROBE_GRADIENT, tol)?;
    c.push(
        "no multipliers",
        ms.classification == Classification::None && ms.stationarity_residual >= 0.1,
        format!("{} with residual {:.3e}", ms.classification, ms.stationarity_residual),
    );

    let fx = example2()?;
    let cs = fx.system(tol)?;
    let x = &fx.truth.point;
    let ev = evaluate(&cs, x)?;
    c.push("full system feasible", ev.feasible, ev.violations.join("; "));
    let full_fixed = fixed_licq_check(&cs.h_ops, &cs.g_ops, x, tol)?;
    let cq = licq_check(&cs, x)?;
    c.push(
        "full system LICQ fails",
        !cq.licq_holds && cq.numerical_rank == fx.truth.rank,
        format!(
            "rank {}/{} (operational rows alone in full coordinates: rank {} of {})",
            cq.numerical_rank, cq.m, full_fixed.rank, full_fixed.rows
        ),
    );
    let full = kkt_solve(&cs, x, &fx.case.cost)?;
    c.push(
        "full system no multipliers",
        full.classification == Classification::None,
        format!("{} with residual {:.3e}", full.classification, full.stationarity_residual),
    );
    Ok(c.finish("ex2", "tangent constraints, NONE", tol))
}

pub fn reproduce_example3(tol: &Tolerances) -> Result<ReproReport> {
    let fx = builtin("ex3", 1.0)?;
    let net = &fx.case.network;
    let x = &fx.truth.point;
    let y = build_ybus(net)?;
    let mut c = Checks::default();
    let (gs, bs) = y.row_sums();
    let row = gs.iter().chain(&bs).map(|v| v.abs()).fold(0.0, f64::max);
    c.push("Y 1 = 0", row == 0.0, format!("max row sum {row:e}"));
    let f = pf_residual(net, &y, x)?.amax();
    c.push("flat point solves power flow", f == 0.0, format!("|F|_inf = {f:e}"));
    let jac = param_jacobian(&ModelKind::Line, net, x)?;
    let amax = jac.amax();
    let hyp = check_rank_hypothesis(&ModelKind::Line, net, x, tol)?;
    c.push(
        "line parameter rank",
        amax <= 1e-14 && hyp.rank == 0,
        format!("max entry {amax:e}, rank {}", hyp.rank),
    );
    c.push(
        "rank hypothesis not satisfied",
        !hyp.satisfied,
        format!("rank {} < {}", hyp.rank, hyp.required),
    );
    Ok(c.finish("ex3", "LINE param rank 0", tol))
}

pub fn reproduce(which: &str, alpha: f64, tol: &Tolerances) -> Result<ReproReport> {
    match which {
        "ex1" => reproduce_example1(alpha, tol),
        "ex2" => reproduce_example2(tol),
        "ex3" => reproduce_example3(tol),
        other => Err(CqaError::Config(format!("unknown example {other:?}; expected ex1, ex2 or ex3"))),
    }
}

/// `θ` wrapped to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example1_rejects_nonpositive_alpha() {
        assert!(example1(0.0).is_err());
        assert!(example1(-1.0).is_err());
    }

    #[test]
    fn example3_rejects_shunts() {
        let mut net = two_bus_lossless(vec![]).unwrap();
        net.buses[1].b_shunt = 0.1;
        assert!(example3(&net).is_err());
    }

    #[test]
    fn direction_mismatch_ignores_sign_and_scale() {
        assert!(direction_mismatch(&[1.0, 2.0], &[-2.0, -4.0]) < 1e-15);
        assert!(direction_mismatch(&[1.0, 0.0], &[0.0, 1.0]) > 0.5);
    }
}
