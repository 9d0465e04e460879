//! Small dense solvers for the ALS normal equations.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Relative pivot size below which a Gram system counts as singular.
const SINGULAR_PIVOT: f64 = 1e-12;

/// Ridge added to a singular system, as a multiple of its trace.
pub const RIDGE_SCALE: f64 = 1e-10;

/// In-place Cholesky factor of a symmetric matrix. Returns `None` when a
/// pivot falls below `SINGULAR_PIVOT * mean diagonal`.
fn cholesky(g: &Matrix) -> Option<Matrix> {
    let n = g.rows();
    let mean_diag = (0..n).map(|i| g.get(i, i)).sum::<f64>() / n as f64;
    let floor = SINGULAR_PIVOT * mean_diag.max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = g.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > floor) {
            return None;
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = g.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

/// Outcome of [`solve_gram_rows`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GramSolve {
    /// Ridge that was added to the diagonal (0 when the plain system was usable).
    pub ridge: f64,
}

/// Solve `X · G = M` for `X` where `G` is a symmetric positive
/// semi-definite Gramian, overwriting `m` with `X`.
///
/// A singular `G` gets `RIDGE_SCALE · trace(G)` added to its diagonal,
/// growing by 10× until the factorization succeeds.
pub fn solve_gram_rows(g: &Matrix, m: &mut Matrix) -> Result<GramSolve> {
    let r = g.rows();
    if g.cols() != r || m.cols() != r {
        return Err(Error::dims("gram system shape mismatch"));
    }
    let trace: f64 = (0..r).map(|i| g.get(i, i)).sum();
    if trace == 0.0 {
        // All other factors vanish: the least-squares minimizer of least norm is 0.
        m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        return Ok(GramSolve { ridge: 0.0 });
    }

    let mut ridge = 0.0;
    let mut step = RIDGE_SCALE * trace;
    let chol = loop {
        let mut gr = g.clone();
        for i in 0..r {
            gr.set(i, i, gr.get(i, i) + ridge);
        }
        if let Some(l) = cholesky(&gr) {
            break l;
        }
        if ridge > trace {
            return Err(Error::Numeric("gram system could not be regularized".into()));
        }
        ridge = step;
        step *= 10.0;
    };

    let mut y = vec![0.0; r];
    for row in 0..m.rows() {
        // Forward then backward substitution with L and Lᵀ.
        for i in 0..r {
            let mut s = m.get(row, i);
            for k in 0..i {
                s -= chol.get(i, k) * y[k];
            }
            y[i] = s / chol.get(i, i);
        }
        for i in (0..r).rev() {
            let mut s = y[i];
            for k in i + 1..r {
                s -= chol.get(k, i) * m.get(row, k);
            }
            m.set(row, i, s / chol.get(i, i));
        }
    }
    Ok(GramSolve { ridge })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let g = Matrix::new(2, 2, vec![4.0, 1.0, 1.0, 3.0]).unwrap();
        // X = [[1, 2]] -> M = X G = [[6, 7]]
        let mut m = Matrix::new(1, 2, vec![6.0, 7.0]).unwrap();
        let info = solve_gram_rows(&g, &mut m).unwrap();
        assert_eq!(info.ridge, 0.0);
        assert!((m.get(0, 0) - 1.0).abs() < 1e-14);
        assert!((m.get(0, 1) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn singular_system_gets_ridge() {
        let g = Matrix::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let mut m = Matrix::new(1, 2, vec![2.0, 2.0]).unwrap();
        let info = solve_gram_rows(&g, &mut m).unwrap();
        assert!(info.ridge > 0.0);
        assert!(m.data().iter().all(|v| v.is_finite()));
        // Still close to a least-squares solution: X G ≈ M.
        let back = m.get(0, 0) + m.get(0, 1);
        assert!((back - 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_gram_gives_zero_solution() {
        let g = Matrix::zeros(2, 2);
        let mut m = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        solve_gram_rows(&g, &mut m).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0]);
    }
}
