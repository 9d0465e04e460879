//! Kruskal rank and the sufficient condition for CP uniqueness.

use super::CPModel;
use crate::tensor::Matrix;

/// Residual norm below which a unit column counts as dependent on the others.
const DEPENDENCE_TOLERANCE: f64 = 1e-9;

/// k-ranks of the three factors and the uniqueness bound they imply.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct KruskalReport {
    pub k_ranks: [usize; 3],
    /// `0.5 · (k_A + k_B + k_C) − 1`.
    pub bound: f64,
    pub rank: usize,
    pub holds: bool,
}

/// Gram-Schmidt independence test of the columns listed in `subset`.
fn independent(f: &Matrix, subset: &[usize]) -> bool {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(subset.len());
    for &c in subset {
        let mut v = f.column(c);
        let scale = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if scale == 0.0 {
            return false;
        }
        // Two passes of projection keep the test stable for nearly parallel columns.
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= DEPENDENCE_TOLERANCE * scale {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    true
}

/// Visit every `k`-subset of `0..n` in lexicographic order until `f` returns false.
fn all_subsets(n: usize, k: usize, budget: &mut Option<u64>, mut f: impl FnMut(&[usize]) -> bool) -> Option<bool> {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        if let Some(b) = budget {
            if *b == 0 {
                return None;
            }
            *b -= 1;
        }
        if !f(&idx) {
            return Some(false);
        }
        // Advance to the next combination.
        let mut i = k;
        loop {
            if i == 0 {
                return Some(true);
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return Some(true);
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn k_rank_budgeted(f: &Matrix, budget: &mut Option<u64>) -> Option<usize> {
    let limit = f.rows().min(f.cols());
    let mut k = 0;
    while k < limit {
        let size = k + 1;
        match all_subsets(f.cols(), size, budget, |s| independent(f, s))? {
            true => k = size,
            false => break,
        }
    }
    Some(k)
}

/// Kruskal rank of the columns of `f`: the largest `k` such that every set
/// of `k` columns is linearly independent. Exhaustive over subsets.
pub fn k_rank(f: &Matrix) -> usize {
    k_rank_budgeted(f, &mut None).expect("unbudgeted search always finishes")
}

/// Kruskal's sufficient condition `R ≤ 0.5·(k_A + k_B + k_C) − 1`.
pub fn kruskal_uniqueness_holds(model: &CPModel) -> bool {
    kruskal_report(model, None).expect("unbudgeted").holds
}

/// Full report, or `None` when more than `max_subsets` independence tests
/// would be needed.
pub fn kruskal_report(model: &CPModel, max_subsets: Option<u64>) -> Option<KruskalReport> {
    let mut budget = max_subsets;
    let mut k_ranks = [0; 3];
    for (mode, k) in k_ranks.iter_mut().enumerate() {
        *k = k_rank_budgeted(model.factor(mode), &mut budget)?;
    }
    let bound = 0.5 * (k_ranks.iter().sum::<usize>() as f64) - 1.0;
    let rank = model.rank();
    Some(KruskalReport {
        k_ranks,
        bound,
        rank,
        holds: rank as f64 <= bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Vec<Vec<f64>>) -> CPModel {
        let w = vec![1.0; a.len()];
        CPModel::from_factors(
            &w,
            &Matrix::from_columns(&a).unwrap(),
            &Matrix::from_columns(&b).unwrap(),
            &Matrix::from_columns(&c).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_columns_rank_two() {
        let e = || vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let m = model(e(), e(), e());
        let report = kruskal_report(&m, None).unwrap();
        assert_eq!(report.k_ranks, [2, 2, 2]);
        assert_eq!(report.bound, 2.0);
        assert!(report.holds);
    }

    #[test]
    fn duplicate_column_forces_k_rank_one() {
        let e = || vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let dup = vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]];
        let m = model(dup, e(), e());
        assert_eq!(k_rank(m.factor(0)), 1);
        // 0.5·(1+2+2) − 1 = 1.5 < 2
        assert!(!kruskal_uniqueness_holds(&m));
    }

    #[test]
    fn single_term_evaluates_formula() {
        let m = model(vec![vec![1.0, 2.0]], vec![vec![3.0]], vec![vec![1.0, 1.0, 1.0]]);
        let report = kruskal_report(&m, None).unwrap();
        assert_eq!(report.k_ranks, [1, 1, 1]);
        // 0.5·3 − 1 = 0.5 < 1, so the condition is not met for R = 1.
        assert_eq!(report.bound, 0.5);
        assert!(!report.holds);
    }

    #[test]
    fn k_rank_of_generic_and_dependent_sets() {
        // Three columns in the plane: any two independent, all three dependent.
        let f = Matrix::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        assert_eq!(k_rank(&f), 2);
        let g = Matrix::from_columns(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.6, 0.8, 0.0]]).unwrap();
        assert_eq!(k_rank(&g), 2);
    }

    #[test]
    fn budget_exhaustion_returns_none() {
        let cols: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.1 }).collect())
            .collect();
        let m = model(cols.clone(), cols.clone(), cols);
        assert!(kruskal_report(&m, Some(10)).is_none());
        assert!(kruskal_report(&m, None).is_some());
    }
}
