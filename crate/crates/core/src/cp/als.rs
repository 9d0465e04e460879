//! Alternating least squares for CP decompositions.
//!
//! Each sweep solves three linear least-squares problems in turn, one per
//! factor matrix, through the normal equations
//! `X · (G_p ∘ G_q) = MTTKRP(T, p, q)` where `G_p`, `G_q` are the Gramians of
//! the two fixed (unit-column) factors and `∘` is the Hadamard product. The
//! solution absorbs the weights; its column norms become the new `λ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::CPModel;
use crate::error::{Error, Result};
use crate::linalg::solve_gram_rows;
use crate::tensor::{Matrix, Tensor3};

/// Knobs for [`cp_als`].
#[derive(Clone, Debug, PartialEq)]
pub struct AlsOptions {
    /// Upper bound on full sweeps (A, B, C updates) per run.
    pub max_iterations: usize,
    /// Stop once the residual drops below `tolerance · ‖t‖_F`.
    pub tolerance: f64,
    /// Extra random initializations beyond the first run.
    pub restarts: usize,
    pub seed: u64,
    /// Stop once a sweep improves the residual by less than
    /// `stall_tolerance · ‖t‖_F`. Zero disables the check.
    pub stall_tolerance: f64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-10,
            restarts: 5,
            seed: 0,
            stall_tolerance: 1e-10,
        }
    }
}

impl AlsOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if !(self.stall_tolerance >= 0.0) {
            return Err(Error::invalid("stall_tolerance must be nonnegative"));
        }
        Ok(())
    }
}

/// Objective values recorded by [`cp_als_traced`].
#[derive(Clone, Debug, Default)]
pub struct AlsTrace {
    /// Frobenius residual after every factor update (three per sweep).
    pub micro_objectives: Vec<f64>,
    /// Number of completed sweeps.
    pub sweeps: usize,
    /// Number of least-squares solves that needed a ridge term.
    pub ridge_solves: usize,
}

struct RunOutput {
    model: CPModel,
    residual: f64,
    trace: AlsTrace,
}

/// Largest rank for which every ALS subproblem can have full column rank.
pub(crate) fn max_rank(dims: (usize, usize, usize)) -> usize {
    let (n, m, l) = dims;
    (m * l).min(n * l).min(n * m)
}

fn check_rank(t: &Tensor3, rank: usize) -> Result<()> {
    let limit = max_rank(t.dims());
    if rank == 0 || rank > limit {
        return Err(Error::invalid(format!(
            "rank {rank} outside [1, {limit}] for a {:?} tensor",
            t.dims()
        )));
    }
    Ok(())
}

/// Best-of-restarts rank-`rank` decomposition of `t`.
///
/// Runs `1 + opts.restarts` independent random initializations and keeps
/// the lowest residual (earliest run on ties). The returned residual is
/// recomputed from the returned model.
pub fn cp_als(t: &Tensor3, rank: usize, opts: &AlsOptions) -> Result<(CPModel, f64)> {
    cp_als_warm(t, rank, opts, None)
}

/// Like [`cp_als`], with an extra candidate run seeded from `warm`.
///
/// `warm` must approximate the same tensor at a lower or equal rank; its
/// columns are reused and any missing columns are drawn at random. Because
/// the first update of every sweep solves for A exactly, the warm run can
/// never end above `warm`'s own residual.
pub fn cp_als_warm(
    t: &Tensor3,
    rank: usize,
    opts: &AlsOptions,
    warm: Option<&CPModel>,
) -> Result<(CPModel, f64)> {
    opts.validate()?;
    check_rank(t, rank)?;
    if let Some(w) = warm {
        if w.dims() != t.dims() || w.rank() > rank {
            return Err(Error::invalid(format!(
                "warm start of rank {} and dims {:?} does not fit rank {rank} on {:?}",
                w.rank(),
                w.dims(),
                t.dims()
            )));
        }
    }

    let runs = 1 + opts.restarts;
    let mut candidates: Vec<(usize, RunOutput)> = (0..runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = run_rng(opts.seed, run as u64);
            let init = random_factors(&mut rng, t.dims(), rank);
            run_als(t, init, opts, false).map(|out| (run, out))
        })
        .collect::<Result<Vec<_>>>()?;

    if let Some(w) = warm {
        let mut rng = run_rng(opts.seed, runs as u64);
        let init = warm_factors(&mut rng, w, rank);
        candidates.push((runs, run_als(t, init, opts, false)?));
    }

    let (_, best) = candidates
        .into_iter()
        .min_by(|(i, x), (j, y)| x.residual.total_cmp(&y.residual).then(i.cmp(j)))
        .expect("at least one ALS run");
    Ok((best.model, best.residual))
}

/// Single run from the first random initialization, recording the
/// objective after every factor update.
pub fn cp_als_traced(t: &Tensor3, rank: usize, opts: &AlsOptions) -> Result<(CPModel, f64, AlsTrace)> {
    opts.validate()?;
    check_rank(t, rank)?;
    let mut rng = run_rng(opts.seed, 0);
    let init = random_factors(&mut rng, t.dims(), rank);
    let out = run_als(t, init, opts, true)?;
    Ok((out.model, out.residual, out.trace))
}

fn run_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    rng
}

fn random_unit_column(rng: &mut ChaCha8Rng, rows: usize) -> Vec<f64> {
    loop {
        let col: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return col.into_iter().map(|v| v / norm).collect();
        }
    }
}

fn random_factors(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), rank: usize) -> [Matrix; 3] {
    let mut make = |rows: usize| {
        let mut m = Matrix::zeros(rows, rank);
        for r in 0..rank {
            m.set_column(r, &random_unit_column(rng, rows));
        }
        m
    };
    [make(dims.0), make(dims.1), make(dims.2)]
}

fn warm_factors(rng: &mut ChaCha8Rng, warm: &CPModel, rank: usize) -> [Matrix; 3] {
    let (n, m, l) = warm.dims();
    let mut out = [Matrix::zeros(n, rank), Matrix::zeros(m, rank), Matrix::zeros(l, rank)];
    for (mode, f) in out.iter_mut().enumerate() {
        for r in 0..warm.rank() {
            f.set_column(r, &warm.factor(mode).column(r));
        }
    }
    for r in warm.rank()..rank {
        for f in out.iter_mut() {
            let rows = f.rows();
            f.set_column(r, &random_unit_column(rng, rows));
        }
    }
    out
}

/// Matricized tensor times Khatri-Rao product for mode `mode`, computed
/// straight from the tensor without forming the Khatri-Rao matrix.
fn mttkrp(t: &Tensor3, factors: &[Matrix; 3], mode: usize) -> Matrix {
    let (n, m, l) = t.dims();
    let rank = factors[0].cols();
    let data = t.data();
    let rows = [n, m, l][mode];
    let mut out = Matrix::zeros(rows, rank);
    let mut acc = vec![0.0; rank];
    let c = &factors[2];
    match mode {
        0 | 1 => {
            let other = &factors[1 - mode];
            for i in 0..n {
                for j in 0..m {
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    let fiber = &data[(i * m + j) * l..(i * m + j + 1) * l];
                    for (k, &v) in fiber.iter().enumerate() {
                        for (s, cv) in acc.iter_mut().zip(c.row(k)) {
                            *s += v * cv;
                        }
                    }
                    let (row, scale_row) = if mode == 0 { (i, other.row(j)) } else { (j, other.row(i)) };
                    let dst = &mut out.data_mut()[row * rank..(row + 1) * rank];
                    for ((d, s), w) in dst.iter_mut().zip(&acc).zip(scale_row) {
                        *d += s * w;
                    }
                }
            }
        }
        _ => {
            let (a, b) = (&factors[0], &factors[1]);
            for i in 0..n {
                for j in 0..m {
                    for ((w, av), bv) in acc.iter_mut().zip(a.row(i)).zip(b.row(j)) {
                        *w = av * bv;
                    }
                    let fiber = &data[(i * m + j) * l..(i * m + j + 1) * l];
                    for (k, &v) in fiber.iter().enumerate() {
                        let dst = &mut out.data_mut()[k * rank..(k + 1) * rank];
                        for (d, w) in dst.iter_mut().zip(&acc) {
                            *d += v * w;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `‖t − Σ λ_r a_r⊗b_r⊗c_r‖_F` by explicit reconstruction.
fn residual_of(t: &Tensor3, weights: &[f64], factors: &[Matrix; 3]) -> f64 {
    let (n, m, l) = t.dims();
    let rank = weights.len();
    let [a, b, c] = factors;
    let data = t.data();
    let mut ab = vec![0.0; rank];
    let mut acc = 0.0;
    let mut idx = 0;
    for i in 0..n {
        for j in 0..m {
            for r in 0..rank {
                ab[r] = weights[r] * a.get(i, r) * b.get(j, r);
            }
            for k in 0..l {
                let s: f64 = ab.iter().zip(c.row(k)).map(|(x, y)| x * y).sum();
                let d = data[idx] - s;
                acc += d * d;
                idx += 1;
            }
        }
    }
    acc.sqrt()
}

fn run_als(t: &Tensor3, mut factors: [Matrix; 3], opts: &AlsOptions, record: bool) -> Result<RunOutput> {
    let rank = factors[0].cols();
    let norm = t.frobenius_norm();
    let mut weights = vec![1.0; rank];
    let mut trace = AlsTrace::default();
    let mut grams = [factors[0].gram(), factors[1].gram(), factors[2].gram()];
    let mut previous = f64::INFINITY;

    for _ in 0..opts.max_iterations {
        for mode in 0..3 {
            let (p, q) = match mode {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let g = grams[p].hadamard(&grams[q])?;
            let mut x = mttkrp(t, &factors, mode);
            let solve = solve_gram_rows(&g, &mut x)?;
            if solve.ridge > 0.0 {
                trace.ridge_solves += 1;
            }
            for r in 0..rank {
                let col = x.column(r);
                let cn = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if cn > 0.0 && cn.is_finite() {
                    let unit: Vec<f64> = col.iter().map(|v| v / cn).collect();
                    x.set_column(r, &unit);
                    weights[r] = cn;
                } else {
                    // Keep the previous unit column; the term drops out via λ = 0.
                    x.set_column(r, &factors[mode].column(r));
                    weights[r] = 0.0;
                }
            }
            if x.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("ALS update produced non-finite factors".into()));
            }
            grams[mode] = x.gram();
            factors[mode] = x;
            if record {
                trace.micro_objectives.push(residual_of(t, &weights, &factors));
            }
        }
        trace.sweeps += 1;

        let current = match trace.micro_objectives.last() {
            Some(&v) if record => v,
            _ => residual_of(t, &weights, &factors),
        };
        if current <= opts.tolerance * norm {
            break;
        }
        if previous - current < opts.stall_tolerance * norm {
            break;
        }
        previous = current;
    }

    let [a, b, c] = &factors;
    let model = CPModel::from_factors(&weights, a, b, c)?;
    let residual = model.residual(t)?;
    Ok(RunOutput { model, residual, trace })
}
