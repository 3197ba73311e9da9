//! LICQ rank testing and KKT multiplier computation/classification.
//!
//! Sign convention: minimize `f`, constraints `g <= 0`, multipliers `mu >= 0`,
//! stationarity `∇f + κᵀ∇F + λᵀ∇h + μᵀ∇g = 0`. Only active inequalities are
//! stacked, so inactive ones carry `mu = 0` by construction. Fixed state
//! entries are dropped from every gradient before any rank or stationarity
//! computation.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize, Serializer};

use crate::constraints::{active_set, extended_real, ConstraintSystem, FaceLabel};
use crate::error::{CqaError, Result};
use crate::linalg::{left_svd, serde_rows, summarize};
use crate::powerflow::{pf_jacobian, StateLayout, SystemState};
use crate::tolerance::Tolerances;

/// One separable quadratic term `½ c2 x_i² + c1 x_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTerm {
    pub index: usize,
    #[serde(default)]
    pub c2: f64,
    #[serde(default)]
    pub c1: f64,
}

/// Separable quadratic cost `f(x) = Σ (½ c2_i x_i² + c1_i x_i)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    #[serde(default)]
    pub terms: Vec<CostTerm>,
}

impl CostSpec {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn quadratic(mut self, index: usize, c2: f64) -> Self {
        self.terms.push(CostTerm { index, c2, c1: 0.0 });
        self
    }

    pub fn linear(mut self, index: usize, c1: f64) -> Self {
        self.terms.push(CostTerm { index, c2: 0.0, c1 });
        self
    }

    pub fn validate(&self, n_state: usize) -> Result<()> {
        if let Some(t) = self.terms.iter().find(|t| t.index >= n_state) {
            return Err(CqaError::InvalidNetwork(format!(
                "cost term index {} outside state of length {n_state}",
                t.index
            )));
        }
        if self.terms.iter().any(|t| !(t.c1.is_finite() && t.c2.is_finite())) {
            return Err(CqaError::InvalidNetwork("cost coefficients must be finite".into()));
        }
        Ok(())
    }

    pub fn value(&self, x: &SystemState) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let xi = x.get(t.index);
                0.5 * t.c2 * xi * xi + t.c1 * xi
            })
            .sum()
    }

    /// `c2 ⊙ x + c1` over the full flattened state.
    pub fn gradient(&self, x: &SystemState) -> Vec<f64> {
        let mut grad = vec![0.0; 4 * x.n_bus()];
        for t in &self.terms {
            grad[t.index] += t.c2 * x.get(t.index) + t.c1;
        }
        grad
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| CostTerm {
                    index: t.index,
                    c2: factor * t.c2,
                    c1: factor * t.c1,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    PowerFlow,
    Equality,
    Inequality,
}

/// Stacked gradients of all equalities and active inequalities, restricted
/// to the free columns. Row order: power flow, operational equalities,
/// active inequalities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveStack {
    #[serde(with = "serde_rows")]
    pub matrix: DMatrix<f64>,
    pub row_kinds: Vec<RowKind>,
    pub row_labels: Vec<String>,
    pub column_labels: Vec<String>,
    /// Indices into the inequality list that are stacked.
    pub active: Vec<usize>,
    pub face: FaceLabel,
}

impl ActiveStack {
    /// Stack for a problem given directly by gradient rows (no power flow).
    pub fn from_rows(
        equalities: &[Vec<f64>],
        active_inequalities: &[(usize, Vec<f64>)],
        column_labels: Vec<String>,
    ) -> Self {
        let n = column_labels.len();
        let m = equalities.len() + active_inequalities.len();
        let mut matrix = DMatrix::<f64>::zeros(m, n);
        let mut row_kinds = Vec::with_capacity(m);
        let mut row_labels = Vec::with_capacity(m);
        for (i, row) in equalities.iter().enumerate() {
            matrix.row_mut(i).copy_from_slice(row);
            row_kinds.push(RowKind::Equality);
            row_labels.push(format!("h[{i}]"));
        }
        for (r, (j, row)) in active_inequalities.iter().enumerate() {
            matrix.row_mut(equalities.len() + r).copy_from_slice(row);
            row_kinds.push(RowKind::Inequality);
            row_labels.push(format!("g[{j}]"));
        }
        let active: Vec<usize> = active_inequalities.iter().map(|(j, _)| *j).collect();
        Self {
            matrix,
            row_kinds,
            row_labels,
            column_labels,
            face: FaceLabel::from_indices(&active),
            active,
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    fn count(&self, kind: RowKind) -> usize {
        self.row_kinds.iter().filter(|&&k| k == kind).count()
    }

    /// A copy without row `i`.
    pub fn without_row(&self, i: usize) -> Self {
        let mut out = self.clone();
        out.matrix = self.matrix.clone().remove_row(i);
        out.row_kinds.remove(i);
        out.row_labels.remove(i);
        out
    }
}

/// Builds the active stack of `cs` at a feasible `x`.
pub fn build_active_stack(cs: &ConstraintSystem, x: &SystemState) -> Result<ActiveStack> {
    let act = active_set(cs, x)?;
    let layout = cs.layout();
    let free = x.free_indices();
    let n = cs.n_bus();

    let jf = pf_jacobian(&cs.net, &cs.ybus, x)?;
    let mut rows: Vec<Vec<f64>> = (0..2 * n).map(|i| jf.row(i).iter().copied().collect()).collect();
    let mut row_kinds = vec![RowKind::PowerFlow; 2 * n];
    let mut row_labels: Vec<String> = (0..n)
        .map(|k| format!("F_p[{k}]"))
        .chain((0..n).map(|k| format!("F_q[{k}]")))
        .collect();
    for c in &cs.h_ops {
        rows.push(c.gradient(x)?);
        row_kinds.push(RowKind::Equality);
        row_labels.push(c.label(layout));
    }
    for &j in &act.indices {
        rows.push(cs.g_ops[j].gradient(x)?);
        row_kinds.push(RowKind::Inequality);
        row_labels.push(cs.g_ops[j].label(layout));
    }

    let mut matrix = DMatrix::<f64>::zeros(rows.len(), free.len());
    for (i, row) in rows.iter().enumerate() {
        for (jc, &col) in free.iter().enumerate() {
            matrix[(i, jc)] = row[col];
        }
    }
    Ok(ActiveStack {
        matrix,
        row_kinds,
        row_labels,
        column_labels: free.iter().map(|&i| layout.label(i)).collect(),
        active: act.indices,
        face: act.face,
    })
}

/// LICQ verdict with the degeneracy margin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CQReport {
    #[serde(with = "serde_rows")]
    pub active_jacobian: DMatrix<f64>,
    pub row_labels: Vec<String>,
    pub column_labels: Vec<String>,
    pub m: usize,
    pub n_free: usize,
    pub numerical_rank: usize,
    pub singular_values: Vec<f64>,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rank_tol: f64,
    pub licq_holds: bool,
    pub face: FaceLabel,
    pub tolerances: Tolerances,
}

pub fn licq_from_stack(stack: &ActiveStack, tol: &Tolerances) -> CQReport {
    let (m, n) = stack.matrix.shape();
    let svd = left_svd(&stack.matrix);
    let rank = summarize(&svd, m, n, tol.rank_tol_scale);
    CQReport {
        active_jacobian: stack.matrix.clone(),
        row_labels: stack.row_labels.clone(),
        column_labels: stack.column_labels.clone(),
        m,
        n_free: n,
        numerical_rank: rank.rank,
        singular_values: rank.singular_values.clone(),
        sigma_max: rank.sigma_max,
        sigma_min: rank.sigma_min,
        rank_tol: rank.rank_tol,
        licq_holds: rank.full_row_rank(),
        face: stack.face.clone(),
        tolerances: *tol,
    }
}

/// Rank test of `[∇F; ∇h; ∇g_J]` over the free entries at a feasible `x`.
pub fn licq_check(cs: &ConstraintSystem, x: &SystemState) -> Result<CQReport> {
    let stack = build_active_stack(cs, x)?;
    Ok(licq_from_stack(&stack, &cs.tol))
}

/// Shape of the stationary multiplier set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    /// Stationarity cannot be met by any multipliers.
    None,
    Unique,
    /// One-dimensional family `particular + ζ direction`.
    Ray,
    /// Affine family of the given dimension (>= 2).
    Family(usize),
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("NONE"),
            Self::Unique => f.write_str("UNIQUE"),
            Self::Ray => f.write_str("RAY"),
            Self::Family(d) => write!(f, "FAMILY({d})"),
        }
    }
}

impl Serialize for Classification {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// `ζ` range keeping every active `mu >= 0`; either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZetaInterval {
    #[serde(with = "extended_real")]
    pub lo: f64,
    #[serde(with = "extended_real")]
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RayData {
    /// Unit vector; oriented so the interval starts at zero when bounded below.
    pub direction: Vec<f64>,
    pub zeta: ZetaInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplierSet {
    pub kappa: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    /// Stacked `(kappa, lambda, mu)` of the particular solution.
    pub particular: Vec<f64>,
    pub nullspace_basis: Vec<Vec<f64>>,
    pub classification: Classification,
    pub stationarity_residual: f64,
    /// `Some(true)` when some member of the set has `mu >= 0`; `None` when
    /// not resolved (families of dimension >= 2).
    pub sign_feasible: Option<bool>,
    pub ray: Option<RayData>,
    pub row_labels: Vec<String>,
    pub active: Vec<usize>,
    pub stat_tol: f64,
}

impl MultiplierSet {
    /// Range of multiplier `i` over the sign-feasible set, when it is
    /// resolved (unique point or ray).
    pub fn component_range(&self, i: usize) -> Option<(f64, f64)> {
        match self.classification {
            Classification::Unique => Some((self.particular[i], self.particular[i])),
            Classification::Ray => {
                let ray = self.ray.as_ref()?;
                let (y0, w) = (self.particular[i], ray.direction[i]);
                if w == 0.0 {
                    return Some((y0, y0));
                }
                let a = y0 + ray.zeta.lo * w;
                let b = y0 + ray.zeta.hi * w;
                let ends = [a, b].map(|v| if v.is_nan() { y0 } else { v });
                Some((ends[0].min(ends[1]), ends[0].max(ends[1])))
            }
            _ => None,
        }
    }
}

/// Relative size below which a null-direction component is treated as zero
/// in the sign analysis.
const DIRECTION_ZERO: f64 = 1e-12;

/// Least-squares multipliers for `Aᵀ y = -∇f` and classification of the
/// solution set. `grad_f` is restricted to the stack columns.
pub fn kkt_solve_stack(stack: &ActiveStack, grad_f: &DVector<f64>, tol: &Tolerances) -> Result<MultiplierSet> {
    if grad_f.len() != stack.cols() {
        return Err(CqaError::Dimension {
            expected: stack.cols(),
            got: grad_f.len(),
            context: "cost gradient vs stack columns",
        });
    }
    let (m, n) = stack.matrix.shape();
    let svd = left_svd(&stack.matrix);
    let rank = summarize(&svd, m, n, tol.rank_tol_scale);
    let rhs = -grad_f;
    let y_min = svd.solve_transpose_min_norm(&rhs, rank.rank);
    let residual = kkt_residual_stack(stack, grad_f, y_min.as_slice());
    let basis = svd.left_null_basis(rank.rank);
    let ineq_rows: Vec<usize> = stack
        .row_kinds
        .iter()
        .enumerate()
        .filter_map(|(i, &k)| (k == RowKind::Inequality).then_some(i))
        .collect();

    let mut particular = y_min.clone();
    let mut ray = None;
    let mut sign_feasible = None;
    let classification = if residual > tol.stat_tol {
        Classification::None
    } else {
        match basis.len() {
            0 => {
                sign_feasible = Some(ineq_rows.iter().all(|&i| particular[i] >= -tol.stat_tol));
                Classification::Unique
            }
            1 => {
                let (y0, data, feasible) = resolve_ray(&y_min, &basis[0], &ineq_rows);
                particular = y0;
                ray = data;
                sign_feasible = Some(feasible);
                Classification::Ray
            }
            d => Classification::Family(d),
        }
    };

    let n_pf = stack.count(RowKind::PowerFlow);
    let n_eq = stack.count(RowKind::Equality);
    let p = particular.as_slice();
    Ok(MultiplierSet {
        kappa: p[..n_pf].to_vec(),
        lambda: p[n_pf..n_pf + n_eq].to_vec(),
        mu: p[n_pf + n_eq..].to_vec(),
        particular: p.to_vec(),
        nullspace_basis: basis.iter().map(|b| b.as_slice().to_vec()).collect(),
        classification,
        stationarity_residual: residual,
        sign_feasible,
        ray,
        row_labels: stack.row_labels.clone(),
        active: stack.active.clone(),
        stat_tol: tol.stat_tol,
    })
}

/// Intersects `{y + ζ w}` with `mu >= 0` and rebases the particular solution
/// on the finite end of the resulting interval.
fn resolve_ray(
    y: &DVector<f64>,
    w: &DVector<f64>,
    ineq_rows: &[usize],
) -> (DVector<f64>, Option<RayData>, bool) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut lo_row = None;
    let mut hi_row = None;
    let mut feasible = true;
    for &i in ineq_rows {
        if w[i].abs() <= DIRECTION_ZERO {
            if y[i] < 0.0 {
                feasible = false;
            }
            continue;
        }
        let cut = -y[i] / w[i];
        if w[i] > 0.0 {
            if cut > lo {
                lo = cut;
                lo_row = Some(i);
            }
        } else if cut < hi {
            hi = cut;
            hi_row = Some(i);
        }
    }
    if !feasible || lo > hi {
        return (y.clone(), None, false);
    }

    let (mut y0, mut dir, zeta) = if lo.is_finite() {
        (y + w * lo, w.clone(), ZetaInterval { lo: 0.0, hi: hi - lo })
    } else if hi.is_finite() {
        (
            y + w * hi,
            -w,
            ZetaInterval {
                lo: 0.0,
                hi: f64::INFINITY,
            },
        )
    } else {
        (y.clone(), w.clone(), ZetaInterval { lo, hi })
    };
    // The binding multiplier is zero at the vertex.
    if let Some(i) = if lo.is_finite() { lo_row } else { hi_row } {
        y0[i] = 0.0;
    }
    for x in dir.iter_mut() {
        if *x == 0.0 {
            *x = 0.0;
        }
    }
    let data = RayData {
        direction: dir.as_slice().to_vec(),
        zeta,
    };
    (y0, Some(data), true)
}

/// Multipliers for `(cs, cost)` at a feasible `x`.
pub fn kkt_solve(cs: &ConstraintSystem, x: &SystemState, cost: &CostSpec) -> Result<MultiplierSet> {
    let stack = build_active_stack(cs, x)?;
    let grad = free_gradient(cost, x);
    kkt_solve_stack(&stack, &grad, &cs.tol)
}

fn free_gradient(cost: &CostSpec, x: &SystemState) -> DVector<f64> {
    let full = cost.gradient(x);
    DVector::from_iterator(x.free_indices().len(), x.free_indices().into_iter().map(|i| full[i]))
}

/// `‖∇f + Aᵀ y‖₂` on a prebuilt stack.
pub fn kkt_residual_stack(stack: &ActiveStack, grad_f: &DVector<f64>, y: &[f64]) -> f64 {
    let mut r = grad_f.clone();
    for (i, &yi) in y.iter().enumerate() {
        if yi != 0.0 {
            r += stack.matrix.row(i).transpose() * yi;
        }
    }
    r.norm()
}

/// Stationarity residual `‖∇f + κᵀ∇F + λᵀ∇h + μᵀ∇g_J‖₂` over the free
/// entries, assembled term by term from the constraint gradients.
/// `multipliers` is the stacked `(kappa, lambda, mu)` for the active set at `x`.
pub fn kkt_residual(cs: &ConstraintSystem, x: &SystemState, cost: &CostSpec, multipliers: &[f64]) -> Result<f64> {
    let act = active_set(cs, x)?;
    let n = cs.n_bus();
    let expected = 2 * n + cs.h_ops.len() + act.indices.len();
    if multipliers.len() != expected {
        return Err(CqaError::Dimension {
            expected,
            got: multipliers.len(),
            context: "multiplier vector vs active stack",
        });
    }
    let layout = StateLayout::new(n);
    let mut r = cost.gradient(x);
    let jf = pf_jacobian(&cs.net, &cs.ybus, x)?;
    for i in 0..2 * n {
        let k = multipliers[i];
        for col in 0..layout.len() {
            r[col] += k * jf[(i, col)];
        }
    }
    let ops = cs.h_ops.iter().chain(act.indices.iter().map(|&j| &cs.g_ops[j]));
    for (c, &lm) in ops.zip(&multipliers[2 * n..]) {
        for (col, g) in c.gradient(x)?.into_iter().enumerate() {
            r[col] += lm * g;
        }
    }
    Ok(x.free_indices().into_iter().map(|i| r[i] * r[i]).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("x{i}")).collect()
    }

    #[test]
    fn unique_multipliers_for_independent_rows() {
        let stack = ActiveStack::from_rows(&[vec![1.0, 0.0]], &[(0, vec![0.0, 1.0])], labels(2));
        let grad = DVector::from_vec(vec![2.0, -3.0]);
        let ms = kkt_solve_stack(&stack, &grad, &Tolerances::default()).unwrap();
        assert_eq!(ms.classification, Classification::Unique);
        assert!((ms.lambda[0] + 2.0).abs() < 1e-14);
        assert!((ms.mu[0] - 3.0).abs() < 1e-14);
        assert_eq!(ms.sign_feasible, Some(true));
    }

    #[test]
    fn none_when_gradient_off_span() {
        let stack = ActiveStack::from_rows(&[vec![1.0, 0.0]], &[], labels(2));
        let grad = DVector::from_vec(vec![0.0, 1.0]);
        let ms = kkt_solve_stack(&stack, &grad, &Tolerances::default()).unwrap();
        assert_eq!(ms.classification, Classification::None);
        assert!((ms.stationarity_residual - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ray_with_sign_vertex() {
        // Equality and active inequality share a gradient: y_h + y_g = -1.
        let stack = ActiveStack::from_rows(&[vec![1.0, 0.0]], &[(0, vec![1.0, 0.0])], labels(2));
        let grad = DVector::from_vec(vec![1.0, 0.0]);
        let ms = kkt_solve_stack(&stack, &grad, &Tolerances::default()).unwrap();
        assert_eq!(ms.classification, Classification::Ray);
        let ray = ms.ray.as_ref().unwrap();
        assert_eq!(ray.zeta.lo, 0.0);
        assert!(ray.zeta.hi.is_infinite());
        assert_eq!(ms.mu[0], 0.0);
        assert!((ms.lambda[0] + 1.0).abs() < 1e-14);
        let (lo, hi) = ms.component_range(0).unwrap();
        assert!(lo.is_infinite() && lo < 0.0);
        assert!((hi + 1.0).abs() < 1e-14);
    }

    #[test]
    fn family_for_higher_nullity() {
        let row = vec![1.0, 0.0];
        let stack = ActiveStack::from_rows(&[row.clone(), row.clone(), row], &[], labels(2));
        let grad = DVector::from_vec(vec![1.0, 0.0]);
        let ms = kkt_solve_stack(&stack, &grad, &Tolerances::default()).unwrap();
        assert_eq!(ms.classification, Classification::Family(2));
        assert_eq!(ms.nullspace_basis.len(), 2);
        assert_eq!(ms.sign_feasible, None);
        assert_eq!(ms.classification.to_string(), "FAMILY(2)");
    }

    #[test]
    fn zero_cost_zero_multipliers() {
        let stack = ActiveStack::from_rows(&[vec![1.0, 2.0]], &[], labels(2));
        let r = kkt_residual_stack(&stack, &DVector::zeros(2), &[0.0]);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn cost_gradient_is_exact() {
        let cost = CostSpec::zero().quadratic(0, 2.0).linear(0, 1.0).linear(3, -4.0);
        let mut x = SystemState::flat(1);
        x.p_gen[0] = 1.5;
        x.theta[0] = 0.2;
        assert_eq!(cost.gradient(&x), vec![2.0 * 1.5 + 1.0, 0.0, 0.0, -4.0]);
        assert!((cost.value(&x) - (0.5 * 2.0 * 2.25 + 1.5 - 0.8)).abs() < 1e-15);
    }
}
