//! Canonical polyadic (CP) models of order-3 tensors.
//!
//! A [`CPModel`] stores `T ≈ Σ_r λ_r · a_r ⊗ b_r ⊗ c_r` with every factor
//! column normalized to unit length and the terms ordered by descending
//! `|λ_r|`. That order is load-bearing: "the first `i` terms" of a model,
//! as used by partial correlations and pruning thresholds, always means the
//! `i` highest-energy terms.

mod als;
mod kruskal;
mod rank;

pub use als::{cp_als, cp_als_traced, cp_als_warm, AlsOptions, AlsTrace};
pub use kruskal::{k_rank, kruskal_report, kruskal_uniqueness_holds, KruskalReport};
pub use rank::{break_even_rank, rank_scan, select_rank, select_rank_with, RankCriterion, RankSelection};

use crate::error::{Error, Result};
use crate::tensor::{tensor_sub, Matrix, Tensor3};

/// Unit-norm tolerance for factor columns of models built in memory.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// Unit-norm tolerance accepted by [`CPModel::new`]; loose enough for
/// factors that went through 32-bit storage.
pub const STORED_NORM_TOLERANCE: f64 = 1e-6;

/// Rank-R CP decomposition with unit-norm factor columns.
#[derive(Clone, Debug, PartialEq)]
pub struct CPModel {
    weights: Vec<f64>,
    factors: [Matrix; 3],
}

impl CPModel {
    /// Assemble a model from normalized parts, validating every invariant.
    pub fn new(weights: Vec<f64>, a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let rank = weights.len();
        if rank == 0 {
            return Err(Error::invalid("CP rank must be at least 1"));
        }
        for (name, f) in [("A", &a), ("B", &b), ("C", &c)] {
            if f.cols() != rank {
                return Err(Error::dims(format!(
                    "factor {name} has {} columns, expected {rank}",
                    f.cols()
                )));
            }
            for col in 0..rank {
                let norm = f.column_norm(col);
                if (norm - 1.0).abs() > STORED_NORM_TOLERANCE {
                    return Err(Error::invalid(format!(
                        "factor {name} column {col} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        if weights.windows(2).any(|w| w[0].abs() < w[1].abs()) {
            return Err(Error::invalid("weights must be sorted by descending magnitude"));
        }
        Ok(Self {
            weights,
            factors: [a, b, c],
        })
    }

    /// Build a model from arbitrary factor columns and per-term scales.
    ///
    /// Column norms are absorbed into the weights, a zero column becomes a
    /// unit basis vector with weight 0, and terms are stably sorted by
    /// descending `|λ|`.
    pub fn from_factors(scales: &[f64], a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Self> {
        let rank = scales.len();
        if rank == 0 || a.cols() != rank || b.cols() != rank || c.cols() != rank {
            return Err(Error::dims("factor column counts must equal the number of scales"));
        }
        let mut weights = scales.to_vec();
        let mut cols: [Vec<Vec<f64>>; 3] = Default::default();
        for (mode, f) in [a, b, c].into_iter().enumerate() {
            for r in 0..rank {
                let (col, norm) = normalized_column(f, r);
                weights[r] *= norm;
                cols[mode].push(col);
            }
        }
        for w in weights.iter_mut() {
            if *w == 0.0 {
                // Normalize -0.0 so equal models compare bitwise equal.
                *w = 0.0;
            }
        }
        let mut order: Vec<usize> = (0..rank).collect();
        order.sort_by(|&p, &q| weights[q].abs().total_cmp(&weights[p].abs()));
        let pick = |mode: usize| -> Result<Matrix> {
            let sorted: Vec<Vec<f64>> = order.iter().map(|&r| cols[mode][r].clone()).collect();
            Matrix::from_columns(&sorted)
        };
        let sorted_weights = order.iter().map(|&r| weights[r]).collect();
        CPModel::new(sorted_weights, pick(0)?, pick(1)?, pick(2)?)
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    /// Extents `(n, m, l)` of the tensor this model approximates.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.factors[0].rows(), self.factors[1].rows(), self.factors[2].rows())
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Factor matrix for axis `mode` (0 → A, 1 → B, 2 → C).
    #[inline]
    pub fn factor(&self, mode: usize) -> &Matrix {
        &self.factors[mode]
    }

    /// Column vectors `(a_r, b_r, c_r)` of term `r` (0-based).
    pub fn term(&self, r: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            self.factors[0].column(r),
            self.factors[1].column(r),
            self.factors[2].column(r),
        )
    }

    /// Model restricted to its first `terms` terms.
    pub fn truncated(&self, terms: usize) -> Result<CPModel> {
        if terms == 0 || terms > self.rank() {
            return Err(Error::invalid(format!(
                "cannot truncate a rank-{} model to {terms} terms",
                self.rank()
            )));
        }
        let keep = |f: &Matrix| {
            let cols: Vec<Vec<f64>> = (0..terms).map(|r| f.column(r)).collect();
            Matrix::from_columns(&cols)
        };
        CPModel::new(
            self.weights[..terms].to_vec(),
            keep(&self.factors[0])?,
            keep(&self.factors[1])?,
            keep(&self.factors[2])?,
        )
    }

    pub fn reconstruct(&self) -> Tensor3 {
        reconstruct(self)
    }

    /// Frobenius distance between `t` and this model's reconstruction.
    pub fn residual(&self, t: &Tensor3) -> Result<f64> {
        Ok(tensor_sub(t, &self.reconstruct())?.frobenius_norm())
    }

    /// Largest deviation of any factor column norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for f in &self.factors {
            for c in 0..f.cols() {
                worst = worst.max((f.column_norm(c) - 1.0).abs());
            }
        }
        worst
    }

    /// Number of scalars needed to store the factors, `R · (n + m + l)`.
    pub fn factor_len(&self) -> usize {
        let (n, m, l) = self.dims();
        self.rank() * (n + m + l)
    }
}

fn normalized_column(f: &Matrix, c: usize) -> (Vec<f64>, f64) {
    let mut col = f.column(c);
    let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        col.iter_mut().for_each(|v| *v /= norm);
        (col, norm)
    } else {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[0] = 1.0;
        (col, 0.0)
    }
}

/// `Σ_r λ_r · a_r ⊗ b_r ⊗ c_r`.
pub fn reconstruct(model: &CPModel) -> Tensor3 {
    let (n, m, l) = model.dims();
    let rank = model.rank();
    let [a, b, c] = &model.factors;
    let mut t = Tensor3::zeros((n, m, l));
    let mut ab = vec![0.0; rank];
    let out = t.data_mut();
    let mut idx = 0;
    for i in 0..n {
        for j in 0..m {
            for r in 0..rank {
                ab[r] = model.weights[r] * a.get(i, r) * b.get(j, r);
            }
            for k in 0..l {
                let crow = c.row(k);
                let mut s = 0.0;
                for r in 0..rank {
                    s += ab[r] * crow[r];
                }
                out[idx] = s;
                idx += 1;
            }
        }
    }
    t
}
