//! Rank selection by linear scan with warm starts.

use super::als::max_rank;
use super::{cp_als, cp_als_warm, AlsOptions, CPModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Acceptance rule for a rank-`r` residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RankCriterion {
    /// `residual < e · (r·(n+m+l) / (n·m·l))²`, the inverse gain squared.
    GainSquared { e: f64 },
    /// `residual ≤ ratio · ‖t‖_F`.
    Relative { ratio: f64 },
}

impl RankCriterion {
    fn validate(&self) -> Result<()> {
        let v = match *self {
            RankCriterion::GainSquared { e } => e,
            RankCriterion::Relative { ratio } => ratio,
        };
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("rank criterion parameter must be positive, got {v}")));
        }
        Ok(())
    }

    /// Threshold the residual must beat at rank `r`.
    pub fn bound(&self, dims: (usize, usize, usize), r: usize, norm: f64) -> f64 {
        match *self {
            RankCriterion::GainSquared { e } => {
                let (n, m, l) = dims;
                let inverse_gain = (r * (n + m + l)) as f64 / (n * m * l) as f64;
                e * inverse_gain * inverse_gain
            }
            RankCriterion::Relative { ratio } => ratio * norm,
        }
    }

    pub fn accepts(&self, dims: (usize, usize, usize), r: usize, norm: f64, residual: f64) -> bool {
        let bound = self.bound(dims, r, norm);
        match self {
            RankCriterion::GainSquared { .. } => residual < bound,
            RankCriterion::Relative { .. } => residual <= bound,
        }
    }
}

/// Result of [`select_rank`].
#[derive(Clone, Debug)]
pub struct RankSelection {
    pub rank: usize,
    /// False when no rank up to the scan limit satisfied the criterion; `rank`
    /// is then the limit itself.
    pub criterion_met: bool,
    /// Residual at every scanned rank, starting from rank 1.
    pub residuals: Vec<f64>,
    pub model: CPModel,
}

/// Rank at which the CP form costs as much as the dense filter,
/// `ceil(n·m·l / (n+m+l))`, clipped to the largest solvable rank.
pub fn break_even_rank(dims: (usize, usize, usize)) -> usize {
    let (n, m, l) = dims;
    (n * m * l).div_ceil(n + m + l).min(max_rank(dims)).max(1)
}

/// Decompositions at ranks `1..=r_max`, each warm-started from the previous.
///
/// The warm start makes the residual sequence non-increasing (up to
/// rounding), independent of how the random restarts fare.
pub fn rank_scan(t: &Tensor3, r_max: usize, opts: &AlsOptions) -> Result<Vec<(CPModel, f64)>> {
    let mut out: Vec<(CPModel, f64)> = Vec::with_capacity(r_max);
    for r in 1..=r_max {
        let step = match out.last() {
            None => cp_als(t, r, opts)?,
            Some((prev, _)) => cp_als_warm(t, r, opts, Some(prev))?,
        };
        out.push(step);
    }
    Ok(out)
}

/// Smallest rank satisfying the gain-squared criterion with scale `e`,
/// scanning up to [`break_even_rank`].
pub fn select_rank(t: &Tensor3, e: f64, opts: &AlsOptions) -> Result<RankSelection> {
    select_rank_with(t, RankCriterion::GainSquared { e }, None, opts)
}

pub fn select_rank_with(
    t: &Tensor3,
    criterion: RankCriterion,
    r_max: Option<usize>,
    opts: &AlsOptions,
) -> Result<RankSelection> {
    criterion.validate()?;
    let dims = t.dims();
    let limit = r_max.unwrap_or_else(|| break_even_rank(dims));
    if limit == 0 || limit > max_rank(dims) {
        return Err(Error::invalid(format!("rank limit {limit} not solvable for {dims:?}")));
    }
    let norm = t.frobenius_norm();
    let mut residuals = Vec::new();
    let mut previous: Option<CPModel> = None;
    for r in 1..=limit {
        let (model, residual) = match &previous {
            None => cp_als(t, r, opts)?,
            Some(prev) => cp_als_warm(t, r, opts, Some(prev))?,
        };
        residuals.push(residual);
        let met = criterion.accepts(dims, r, norm, residual);
        if met || r == limit {
            return Ok(RankSelection {
                rank: r,
                criterion_met: met,
                residuals,
                model,
            });
        }
        previous = Some(model);
    }
    unreachable!("scan returns at the limit")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::outer3;

    #[test]
    fn break_even_rank_values() {
        assert_eq!(break_even_rank((8, 8, 32)), 43);
        assert_eq!(break_even_rank((5, 11, 32)), 37);
        assert_eq!(break_even_rank((1, 1, 32)), 1);
    }

    #[test]
    fn rank_one_tensor_selects_one() {
        let t = outer3(&[1.0, 2.0], &[0.5, -1.0, 2.0], &[1.0, 1.0, 0.0, 3.0]).unwrap();
        let sel = select_rank(&t, 1.0, &AlsOptions::default()).unwrap();
        assert_eq!(sel.rank, 1);
        assert!(sel.criterion_met);
    }

    #[test]
    fn zero_tensor_selects_one() {
        let t = Tensor3::zeros((3, 3, 3));
        let sel = select_rank(&t, 1e-3, &AlsOptions::default()).unwrap();
        assert_eq!(sel.rank, 1);
        assert_eq!(sel.residuals, vec![0.0]);
    }

    #[test]
    fn rejects_nonpositive_e() {
        let t = Tensor3::zeros((2, 2, 2));
        assert!(select_rank(&t, 0.0, &AlsOptions::default()).is_err());
        assert!(select_rank(&t, -1.0, &AlsOptions::default()).is_err());
    }

    #[test]
    fn unmet_criterion_reports_limit() {
        let mut t = Tensor3::zeros((2, 2, 2));
        t.set(0, 0, 0, 1.0);
        t.set(1, 1, 1, 1.0);
        t.set(0, 1, 1, 0.5);
        // A tiny e can never be met at rank 1 on a rank>1 tensor.
        let sel = select_rank_with(&t, RankCriterion::GainSquared { e: 1e-30 }, Some(1), &AlsOptions::default())
            .unwrap();
        assert_eq!(sel.rank, 1);
        assert!(!sel.criterion_met);
    }
}
