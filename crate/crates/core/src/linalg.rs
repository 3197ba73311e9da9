//! Dense SVD helpers shared by the rank and multiplier analyses.
//!
//! Every routine works on a zero-padded copy of the input so that the left
//! singular basis is always square (m × m). That gives direct access to the
//! left null space even when the stack has more rows than columns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Default relative rank scale, one unit in the last place of 1.0.
pub const DEFAULT_ULP_SCALE: f64 = f64::EPSILON;

/// Singular-value summary of a row stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAnalysis {
    pub rows: usize,
    pub cols: usize,
    /// Singular values in descending order, `min(rows, cols)` of them.
    pub singular_values: Vec<f64>,
    pub sigma_max: f64,
    /// The `rows`-th singular value; zero whenever `rows > cols`.
    pub sigma_min: f64,
    pub rank_tol: f64,
    pub rank: usize,
}

impl RankAnalysis {
    pub fn full_row_rank(&self) -> bool {
        self.rank == self.rows
    }

    pub fn deficiency(&self) -> usize {
        self.rows - self.rank
    }
}

/// Full left SVD: `a = u * diag(sigma) * vt`, with `u` square.
pub(crate) struct LeftSvd {
    pub u: DMatrix<f64>,
    /// Length `rows`, descending, zero-padded past `min(rows, cols)`.
    pub sigma: Vec<f64>,
    /// `rows × max(rows, cols)`.
    pub vt: DMatrix<f64>,
    pub cols: usize,
}

pub(crate) fn left_svd(a: &DMatrix<f64>) -> LeftSvd {
    let (m, n) = a.shape();
    let width = m.max(n);
    if m == 0 {
        return LeftSvd {
            u: DMatrix::zeros(0, 0),
            sigma: Vec::new(),
            vt: DMatrix::zeros(0, width),
            cols: n,
        };
    }
    let mut padded = DMatrix::<f64>::zeros(m, width);
    padded.view_mut((0, 0), (m, n)).copy_from(a);
    let svd = padded.svd(true, true);
    let u_raw = svd.u.expect("left vectors requested");
    let vt_raw = svd.v_t.expect("right vectors requested");
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));

    let mut u = DMatrix::<f64>::zeros(m, m);
    let mut vt = DMatrix::<f64>::zeros(m, width);
    let mut sigma = vec![0.0; m];
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u_raw.column(src));
        vt.set_row(dst, &vt_raw.row(src));
        sigma[dst] = sv[src].max(0.0);
    }
    LeftSvd { u, sigma, vt, cols: n }
}

/// Relative rank tolerance `sigma_max * max(m, n) * ulp_scale`.
pub fn rank_tolerance(sigma_max: f64, rows: usize, cols: usize, ulp_scale: f64) -> f64 {
    sigma_max * rows.max(cols) as f64 * ulp_scale
}

pub fn rank_analysis(a: &DMatrix<f64>, ulp_scale: f64) -> RankAnalysis {
    let (m, n) = a.shape();
    let svd = left_svd(a);
    summarize(&svd, m, n, ulp_scale)
}

pub(crate) fn summarize(svd: &LeftSvd, m: usize, n: usize, ulp_scale: f64) -> RankAnalysis {
    let k = m.min(n);
    let singular_values: Vec<f64> = svd.sigma[..k].to_vec();
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let rank_tol = rank_tolerance(sigma_max, m, n, ulp_scale);
    let rank = singular_values.iter().filter(|&&s| s > rank_tol).count();
    let sigma_min = if m == 0 {
        f64::INFINITY
    } else if m <= n {
        singular_values[m - 1]
    } else {
        0.0
    };
    RankAnalysis {
        rows: m,
        cols: n,
        singular_values,
        sigma_max,
        sigma_min,
        rank_tol,
        rank,
    }
}

impl LeftSvd {
    /// Orthonormal basis of `{ y : a^T y = 0 }` given the numerical rank.
    pub fn left_null_basis(&self, rank: usize) -> Vec<DVector<f64>> {
        (rank..self.u.ncols())
            .map(|j| self.u.column(j).into_owned())
            .collect()
    }

    /// Minimum-norm least-squares solution of `a^T y = b`.
    pub fn solve_transpose_min_norm(&self, b: &DVector<f64>, rank: usize) -> DVector<f64> {
        let m = self.u.nrows();
        let width = self.vt.ncols();
        let mut padded = DVector::<f64>::zeros(width);
        padded.rows_mut(0, self.cols).copy_from(b);
        let mut y = DVector::<f64>::zeros(m);
        for i in 0..rank {
            let coeff = self.vt.row(i).transpose().dot(&padded) / self.sigma[i];
            y.axpy(coeff, &self.u.column(i), 1.0);
        }
        y
    }
}

/// Converts a nested row list into a dense matrix with `cols` columns.
pub fn matrix_from_rows(rows: &[Vec<f64>], cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::zeros(rows.len(), cols);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Serde adapter writing a `DMatrix` as a list of rows.
pub mod serde_rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(matrix_from_rows(&rows, cols))
    }
}
