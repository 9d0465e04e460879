//! Operation counts and wall-clock timing of dense vs decomposed detection.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::Serialize;

use crate::cp::AlsOptions;
use crate::detector::{calibrate_thresholds, detect, detect_dense, DetectOptions, DetectOutput, Positive};
use crate::dpm::{decompose_model, PartModel, RankSpec};
use crate::error::{Error, Result};
use crate::sepconv::theoretical_gain;

use super::synth::SyntheticScene;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub label: String,
    pub ranks: RankSpec,
    pub pruning: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub label: String,
    pub ranks: Vec<usize>,
    pub pruning: bool,
    pub mults: u64,
    pub executed_mults: u64,
    pub dense_mults: u64,
    /// `dense_mults / mults`.
    pub counter_gain: f64,
    /// Formula gain per filter, root first.
    pub theoretical_gains: Vec<f64>,
    pub wall_median_s: f64,
    pub dense_wall_median_s: f64,
    /// `dense_wall_median_s / wall_median_s`.
    pub speedup: f64,
    pub detections: usize,
    pub missing_vs_dense: usize,
    pub extra_vs_dense: usize,
    pub positions_pruned: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub tau: f64,
    pub dense_mults: u64,
    pub dense_wall_median_s: f64,
    pub dense_detections: usize,
    pub rows: Vec<BenchRow>,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub repetitions: usize,
    pub tau: f64,
    pub als: AlsOptions,
    /// Run pyramid levels on the rayon pool while timing.
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repetitions: 5,
            tau: 0.0,
            als: AlsOptions::default(),
            parallel: false,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall time of `repetitions` runs after one discarded warm-up run,
/// plus the output of the last run.
fn timed(repetitions: usize, mut run: impl FnMut() -> Result<DetectOutput>) -> Result<(f64, DetectOutput)> {
    let mut out = run()?;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        out = run()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok((median(times), out))
}

fn keys(out: &DetectOutput) -> BTreeSet<(usize, (usize, usize))> {
    out.detections.iter().map(|d| (d.hypothesis.level, d.hypothesis.root)).collect()
}

/// Compare each configuration against the dense detector on `scene`.
/// Thresholds for pruning configurations are calibrated on the planted
/// objects of `calibration`, which should not include `scene`.
pub fn bench(
    model: &PartModel,
    scene: &SyntheticScene,
    calibration: &[SyntheticScene],
    configs: &[BenchConfig],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if opts.repetitions < 1 {
        return Err(Error::invalid("at least one timed repetition is needed"));
    }
    let mut dopts = DetectOptions::new(opts.tau);
    dopts.parallel = opts.parallel;
    let (dense_wall, dense_out) = timed(opts.repetitions, || detect_dense(model, &scene.pyramid, &dopts))?;
    let dense_keys = keys(&dense_out);
    let positives: Vec<Positive<'_>> = calibration
        .iter()
        .flat_map(|s| s.planted.iter().map(move |h| (&s.pyramid[h.level], h)))
        .collect();

    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut dec = decompose_model(model, &cfg.ranks, &opts.als)?.model;
        if cfg.pruning {
            dec = calibrate_thresholds(&dec, &positives)?;
        }
        let run_opts = dopts.clone().with_pruning(cfg.pruning);
        let (wall, out) = timed(opts.repetitions, || detect(&dec, &scene.pyramid, &run_opts))?;
        let got = keys(&out);
        let theoretical_gains = dec
            .filters()
            .map(|f| {
                let (n, m, l) = f.cp.dims();
                theoretical_gain(n, m, l, f.cp.rank())
            })
            .collect();
        rows.push(BenchRow {
            label: cfg.label.clone(),
            ranks: dec.ranks(),
            pruning: cfg.pruning,
            mults: out.stats.mults,
            executed_mults: out.stats.executed_mults,
            dense_mults: dense_out.stats.mults,
            counter_gain: dense_out.stats.mults as f64 / out.stats.mults as f64,
            theoretical_gains,
            wall_median_s: wall,
            dense_wall_median_s: dense_wall,
            speedup: dense_wall / wall,
            detections: out.detections.len(),
            missing_vs_dense: dense_keys.difference(&got).count(),
            extra_vs_dense: got.difference(&dense_keys).count(),
            positions_pruned: out.stats.positions_pruned(),
        });
    }
    Ok(BenchReport {
        repetitions: opts.repetitions,
        tau: opts.tau,
        dense_mults: dense_out.stats.mults,
        dense_wall_median_s: dense_wall,
        dense_detections: dense_out.detections.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
