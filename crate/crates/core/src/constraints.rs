//! Operational constraints `h(x) = 0`, `g(x) <= 0` with analytic gradients,
//! active-set detection and the fixed-constraint LICQ check.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CqaError, Result};
use crate::linalg::{rank_analysis, RankAnalysis};
use crate::netmodel::{build_ybus, AdmittanceMatrix, Network};
use crate::powerflow::{newton_square, pf_jacobian, pf_residual, NewtonOptions, StateLayout, SystemState};
use crate::tolerance::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    BoxUpper,
    BoxLower,
    LinearEq,
    ApparentPower,
    ExpLoadEq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    /// Infinite bounds are written as the strings `"inf"` / `"-inf"`.
    #[serde(with = "extended_real")]
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearTerm {
    pub index: usize,
    pub coef: f64,
}

/// `h(x) = Σ coef_i x_i + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub terms: Vec<LinearTerm>,
    #[serde(default)]
    pub offset: f64,
}

/// `g(x) = p_k^2 + q_k^2 - s_max_sq` on the generation entries of bus k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApparentPowerParams {
    pub s_max_sq: f64,
}

/// `h(x) = q_k + alpha (p_k - p_load - sqrt(v_k))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpLoadParams {
    pub alpha: f64,
    pub p_load: f64,
}

/// The closed catalog of operational constraints. `target` is a flattened
/// state index for the box kinds and a bus index for the bus kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperationalConstraint {
    BoxUpper {
        target: usize,
        params: BoundParams,
    },
    BoxLower {
        target: usize,
        params: BoundParams,
    },
    LinearEq {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<usize>,
        params: LinearParams,
    },
    ApparentPower {
        target: usize,
        params: ApparentPowerParams,
    },
    ExpLoadEq {
        target: usize,
        params: ExpLoadParams,
    },
}

impl OperationalConstraint {
    pub fn box_upper(target: usize, bound: f64) -> Self {
        Self::BoxUpper {
            target,
            params: BoundParams { bound },
        }
    }

    pub fn box_lower(target: usize, bound: f64) -> Self {
        Self::BoxLower {
            target,
            params: BoundParams { bound },
        }
    }

    pub fn linear_eq(terms: &[(usize, f64)], offset: f64) -> Self {
        Self::LinearEq {
            target: None,
            params: LinearParams {
                terms: terms
                    .iter()
                    .map(|&(index, coef)| LinearTerm { index, coef })
                    .collect(),
                offset,
            },
        }
    }

    pub fn apparent_power(bus: usize, s_max_sq: f64) -> Self {
        Self::ApparentPower {
            target: bus,
            params: ApparentPowerParams { s_max_sq },
        }
    }

    pub fn exp_load_eq(bus: usize, alpha: f64, p_load: f64) -> Self {
        Self::ExpLoadEq {
            target: bus,
            params: ExpLoadParams { alpha, p_load },
        }
    }

    pub fn kind(&self) -> ConstraintKind {
        match self {
            Self::BoxUpper { .. } => ConstraintKind::BoxUpper,
            Self::BoxLower { .. } => ConstraintKind::BoxLower,
            Self::LinearEq { .. } => ConstraintKind::LinearEq,
            Self::ApparentPower { .. } => ConstraintKind::ApparentPower,
            Self::ExpLoadEq { .. } => ConstraintKind::ExpLoadEq,
        }
    }

    pub fn is_equality(&self) -> bool {
        matches!(self.kind(), ConstraintKind::LinearEq | ConstraintKind::ExpLoadEq)
    }

    /// Checks index ranges against an N-bus state.
    pub fn validate(&self, n_bus: usize) -> Result<()> {
        let layout = StateLayout::new(n_bus);
        let bad = |what: String| Err(CqaError::InvalidNetwork(what));
        match self {
            Self::BoxUpper { target, params } | Self::BoxLower { target, params } => {
                if *target >= layout.len() {
                    return bad(format!("box constraint target {target} outside state of length {}", layout.len()));
                }
                if params.bound.is_nan() {
                    return bad("box bound is NaN".into());
                }
            }
            Self::LinearEq { params, .. } => {
                if let Some(t) = params.terms.iter().find(|t| t.index >= layout.len()) {
                    return bad(format!("linear term index {} outside state", t.index));
                }
                if params.terms.iter().any(|t| !t.coef.is_finite()) || !params.offset.is_finite() {
                    return bad("linear constraint has non-finite coefficients".into());
                }
            }
            Self::ApparentPower { target, params } => {
                if *target >= n_bus {
                    return bad(format!("apparent-power bus {target} does not exist"));
                }
                if !params.s_max_sq.is_finite() {
                    return bad("apparent-power limit must be finite".into());
                }
            }
            Self::ExpLoadEq { target, params } => {
                if *target >= n_bus {
                    return bad(format!("exp-load bus {target} does not exist"));
                }
                if !(params.alpha.is_finite() && params.p_load.is_finite()) {
                    return bad("exp-load parameters must be finite".into());
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &SystemState) -> Result<f64> {
        let layout = x.layout();
        Ok(match self {
            Self::BoxUpper { target, params } => x.get(*target) - params.bound,
            Self::BoxLower { target, params } => params.bound - x.get(*target),
            Self::LinearEq { params, .. } => {
                params.terms.iter().map(|t| t.coef * x.get(t.index)).sum::<f64>() + params.offset
            }
            Self::ApparentPower { target, params } => {
                let (p, q) = (x.p_gen[*target], x.q_gen[*target]);
                p * p + q * q - params.s_max_sq
            }
            Self::ExpLoadEq { target, params } => {
                let v = x.get(layout.v(*target));
                if v <= 0.0 {
                    return Err(CqaError::Domain(format!(
                        "exp_load_eq at bus {target} requires v > 0, got {v}"
                    )));
                }
                x.q_gen[*target] + params.alpha * (x.p_gen[*target] - params.p_load - v.sqrt())
            }
        })
    }

    /// Gradient over the full flattened state.
    pub fn gradient(&self, x: &SystemState) -> Result<Vec<f64>> {
        let layout = x.layout();
        let mut grad = vec![0.0; layout.len()];
        match self {
            Self::BoxUpper { target, .. } => grad[*target] = 1.0,
            Self::BoxLower { target, .. } => grad[*target] = -1.0,
            Self::LinearEq { params, .. } => {
                for t in &params.terms {
                    grad[t.index] += t.coef;
                }
            }
            Self::ApparentPower { target, .. } => {
                grad[layout.p(*target)] = 2.0 * x.p_gen[*target];
                grad[layout.q(*target)] = 2.0 * x.q_gen[*target];
            }
            Self::ExpLoadEq { target, params } => {
                let v = x.get(layout.v(*target));
                if v <= 0.0 {
                    return Err(CqaError::Domain(format!(
                        "exp_load_eq at bus {target} requires v > 0, got {v}"
                    )));
                }
                grad[layout.q(*target)] = 1.0;
                grad[layout.p(*target)] = params.alpha;
                grad[layout.v(*target)] = -params.alpha / (2.0 * v.sqrt());
            }
        }
        Ok(grad)
    }

    pub fn label(&self, layout: StateLayout) -> String {
        match self {
            Self::BoxUpper { target, .. } => format!("box_upper({})", layout.label(*target)),
            Self::BoxLower { target, .. } => format!("box_lower({})", layout.label(*target)),
            Self::LinearEq { .. } => "linear_eq".to_string(),
            Self::ApparentPower { target, .. } => format!("apparent_power(bus {target})"),
            Self::ExpLoadEq { target, .. } => format!("exp_load_eq(bus {target})"),
        }
    }
}

/// Sorted tuple of active inequality indices naming a face of the fixed
/// feasible set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FaceLabel(pub Vec<usize>);

impl FaceLabel {
    pub fn from_indices(indices: &[usize]) -> Self {
        let mut v = indices.to_vec();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }
}

impl fmt::Display for FaceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Power-flow equalities plus operational constraints on one network.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub net: Network,
    pub ybus: AdmittanceMatrix,
    pub h_ops: Vec<OperationalConstraint>,
    pub g_ops: Vec<OperationalConstraint>,
    pub tol: Tolerances,
}

impl ConstraintSystem {
    /// Splits `constraints` into equalities and inequalities, keeping the
    /// relative order within each group.
    pub fn new(net: Network, constraints: &[OperationalConstraint], tol: Tolerances) -> Result<Self> {
        tol.validate()?;
        net.validate()?;
        for c in constraints {
            c.validate(net.n_bus())?;
        }
        let ybus = build_ybus(&net)?;
        let (h_ops, g_ops) = constraints.iter().cloned().partition(|c| c.is_equality());
        Ok(Self {
            net,
            ybus,
            h_ops,
            g_ops,
            tol,
        })
    }

    pub fn n_bus(&self) -> usize {
        self.net.n_bus()
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.n_bus())
    }

    pub fn h_values(&self, x: &SystemState) -> Result<Vec<f64>> {
        self.h_ops.iter().map(|c| c.value(x)).collect()
    }

    pub fn g_values(&self, x: &SystemState) -> Result<Vec<f64>> {
        self.g_ops.iter().map(|c| c.value(x)).collect()
    }

    /// A copy with the network replaced (constraints and tolerances kept).
    pub fn with_network(&self, net: Network) -> Result<Self> {
        let ybus = build_ybus(&net)?;
        Ok(Self {
            net,
            ybus,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub pf_mismatch: f64,
    pub h_values: Vec<f64>,
    pub g_values: Vec<f64>,
    pub feasible: bool,
    pub violations: Vec<String>,
}

/// Feasible iff `‖F‖_∞ <= pf_tol`, `max |h| <= eq_tol` and `max g <= act_tol`.
pub fn evaluate(cs: &ConstraintSystem, x: &SystemState) -> Result<Evaluation> {
    let f = pf_residual(&cs.net, &cs.ybus, x)?;
    let pf_mismatch = f.amax();
    let h_values = cs.h_values(x)?;
    let g_values = cs.g_values(x)?;
    let layout = cs.layout();
    let mut violations = Vec::new();
    if pf_mismatch > cs.tol.pf_tol {
        violations.push(format!("power-flow mismatch {pf_mismatch:.3e} > pf_tol"));
    }
    for (c, &h) in cs.h_ops.iter().zip(&h_values) {
        if h.abs() > cs.tol.eq_tol {
            violations.push(format!("{} = {h:.3e} violates eq_tol", c.label(layout)));
        }
    }
    for (c, &g) in cs.g_ops.iter().zip(&g_values) {
        if g > cs.tol.act_tol {
            violations.push(format!("{} = {g:.3e} > act_tol", c.label(layout)));
        }
    }
    Ok(Evaluation {
        pf_mismatch,
        h_values,
        g_values,
        feasible: violations.is_empty(),
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveSet {
    pub indices: Vec<usize>,
    pub g_values: Vec<f64>,
    pub face: FaceLabel,
}

/// `j` is active iff `g_j >= -act_tol` (inclusive).
pub fn active_indices(g_values: &[f64], act_tol: f64) -> Vec<usize> {
    g_values
        .iter()
        .enumerate()
        .filter_map(|(j, &g)| (g >= -act_tol).then_some(j))
        .collect()
}

pub fn active_set(cs: &ConstraintSystem, x: &SystemState) -> Result<ActiveSet> {
    let eval = evaluate(cs, x)?;
    if !eval.feasible {
        return Err(CqaError::Infeasible(eval.violations.join("; ")));
    }
    let indices = active_indices(&eval.g_values, cs.tol.act_tol);
    Ok(ActiveSet {
        face: FaceLabel::from_indices(&indices),
        indices,
        g_values: eval.g_values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedLicqReport {
    pub holds: bool,
    pub rows: usize,
    pub rank: usize,
    pub sigma_min: f64,
    pub rank_tol: f64,
    pub active: Vec<usize>,
}

impl FixedLicqReport {
    pub fn from_rank(rank: &RankAnalysis, active: Vec<usize>) -> Self {
        Self {
            holds: rank.full_row_rank(),
            rows: rank.rows,
            rank: rank.rank,
            sigma_min: rank.sigma_min,
            rank_tol: rank.rank_tol,
            active,
        }
    }
}

/// LICQ for the operational constraints alone: rank of `[∇h; ∇g_J]`
/// restricted to the free entries of `x`.
pub fn fixed_licq_check(
    h_ops: &[OperationalConstraint],
    g_ops: &[OperationalConstraint],
    x: &SystemState,
    tol: &Tolerances,
) -> Result<FixedLicqReport> {
    let g_values: Vec<f64> = g_ops.iter().map(|c| c.value(x)).collect::<Result<_>>()?;
    let active = active_indices(&g_values, tol.act_tol);
    let free = x.free_indices();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for c in h_ops {
        rows.push(c.gradient(x)?);
    }
    for &j in &active {
        rows.push(g_ops[j].gradient(x)?);
    }
    let mut a = DMatrix::<f64>::zeros(rows.len(), free.len());
    for (i, row) in rows.iter().enumerate() {
        for (jc, &col) in free.iter().enumerate() {
            a[(i, jc)] = row[col];
        }
    }
    let rank = rank_analysis(&a, tol.rank_tol_scale);
    Ok(FixedLicqReport::from_rank(&rank, active))
}

/// Newton solve of `F(x) = 0`, `h(x) = 0` and `g_j(x) = 0` for the listed
/// inequalities, over the given unknown entries (all other entries stay at
/// their values in `x0`). The system must be square.
pub fn solve_pinned(
    cs: &ConstraintSystem,
    x0: &SystemState,
    unknowns: &[usize],
    tight_ineqs: &[usize],
    opts: &NewtonOptions,
) -> Result<SystemState> {
    let ops: Vec<&OperationalConstraint> = cs
        .h_ops
        .iter()
        .chain(tight_ineqs.iter().map(|&j| &cs.g_ops[j]))
        .collect();
    let n2 = 2 * cs.n_bus();
    let (state, _, _) = newton_square(x0, unknowns, opts, |x| {
        let f = pf_residual(&cs.net, &cs.ybus, x)?;
        let jf = pf_jacobian(&cs.net, &cs.ybus, x)?;
        let m = n2 + ops.len();
        let mut r = DVector::<f64>::zeros(m);
        let mut j = DMatrix::<f64>::zeros(m, jf.ncols());
        r.rows_mut(0, n2).copy_from(&f);
        j.view_mut((0, 0), (n2, jf.ncols())).copy_from(&jf);
        for (i, c) in ops.iter().enumerate() {
            r[n2 + i] = c.value(x)?;
            for (col, g) in c.gradient(x)?.into_iter().enumerate() {
                j[(n2 + i, col)] = g;
            }
        }
        Ok((r, j))
    })?;
    Ok(state)
}

/// Reads/writes an `f64` that may be infinite: JSON numbers, or the strings
/// `"inf"`, `"+inf"`, `"-inf"`.
pub(crate) mod extended_real {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!(
                    "expected a number or \"inf\"/\"-inf\", got {other:?}"
                ))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Bus, Line};

    fn two_bus() -> Network {
        Network::new(
            vec![Bus::slack(0, 1.0, 0.0), Bus::pq(1)],
            vec![Line::series(0, 1, 0.0, -1.0)],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn infinite_upper_bound_never_active() {
        let c = OperationalConstraint::box_upper(5, f64::INFINITY);
        let mut x = SystemState::flat(2);
        x.v[1] = 1e300;
        let g = c.value(&x).unwrap();
        assert!(active_indices(&[g], 1e-6).is_empty());
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"inf\""));
        let back: OperationalConstraint = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn tolerance_boundary_is_inclusive() {
        let eps = 1e-6;
        assert_eq!(active_indices(&[-eps / 2.0, -2.0 * eps, -eps], eps), vec![0, 2]);
    }

    #[test]
    fn interior_point_has_empty_active_set() {
        let net = two_bus();
        let cs = ConstraintSystem::new(
            net,
            &[OperationalConstraint::box_upper(5, 2.0)],
            Tolerances::default(),
        )
        .unwrap();
        let x = SystemState::flat(2);
        let act = active_set(&cs, &x).unwrap();
        assert!(act.indices.is_empty());
        assert_eq!(act.face.to_string(), "{}");
    }

    #[test]
    fn active_set_rejects_infeasible_points() {
        let cs = ConstraintSystem::new(
            two_bus(),
            &[OperationalConstraint::box_upper(5, 0.5)],
            Tolerances::default(),
        )
        .unwrap();
        let err = active_set(&cs, &SystemState::flat(2)).unwrap_err();
        assert!(matches!(err, CqaError::Infeasible(_)));
    }

    #[test]
    fn exp_load_domain_error() {
        let c = OperationalConstraint::exp_load_eq(1, 1.0, 0.0);
        let mut x = SystemState::flat(2);
        x.v[1] = 0.0;
        assert!(matches!(c.value(&x), Err(CqaError::Domain(_))));
        assert!(matches!(c.gradient(&x), Err(CqaError::Domain(_))));
    }

    #[test]
    fn duplicated_constraint_fails_fixed_licq() {
        let h = OperationalConstraint::linear_eq(&[(1, -1.0), (3, 1.0)], 0.0);
        let x = SystemState::flat(2);
        let rep = fixed_licq_check(&[h.clone(), h], &[], &x, &Tolerances::default()).unwrap();
        assert!(!rep.holds);
        assert_eq!((rep.rank, rep.rows), (1, 2));
    }

    #[test]
    fn catalog_json_shape() {
        let doc = r#"[
            {"kind": "box_upper", "target": 5, "params": {"bound": 1.5}},
            {"kind": "box_lower", "target": 4, "params": {"bound": "-inf"}},
            {"kind": "linear_eq", "params": {"terms": [{"index": 3, "coef": 1.0}], "offset": 0.5}},
            {"kind": "apparent_power", "target": 1, "params": {"s_max_sq": 0.25}},
            {"kind": "exp_load_eq", "target": 1, "params": {"alpha": 2.0, "p_load": 0.1}}
        ]"#;
        let cs: Vec<OperationalConstraint> = serde_json::from_str(doc).unwrap();
        let kinds: Vec<_> = cs.iter().map(|c| c.kind()).collect();
        assert_eq!(
            kinds,
            vec![
                ConstraintKind::BoxUpper,
                ConstraintKind::BoxLower,
                ConstraintKind::LinearEq,
                ConstraintKind::ApparentPower,
                ConstraintKind::ExpLoadEq
            ]
        );
        assert_eq!(cs.iter().filter(|c| c.is_equality()).count(), 2);
    }
}
