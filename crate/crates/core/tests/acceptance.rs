//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the lines appear in `cargo test` output.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use cpdpm::cp::{cp_als, cp_als_traced, AlsOptions};
use cpdpm::detector::{calibrate_thresholds, detect, detect_dense, DetectOptions, PartPruneMode, Positive};
use cpdpm::dpm::{decompose_model, save_decomposed, save_model, DecomposedModel, PartModel, RankSpec};
use cpdpm::harness::{bench, gen_model, gen_scene, roc_eval, tau_grid, BenchConfig, BenchOptions, MatchCriterion, ModelSpec, SceneSpec, Scorer, SyntheticScene};
use cpdpm::io::{CPF_HEADER_LEN, T3F_HEADER_LEN};
use cpdpm::sepconv::{correlate3_cp, correlate3_full, measured_gain, theoretical_gain, FeatureMap};
use cpdpm::tensor::{outer3, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Tensor3 {
    Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let opts = AlsOptions {
        restarts: 1,
        ..AlsOptions::default()
    };
    let mut worst = 0.0f64;
    let pairs = 200;
    for _ in 0..pairs {
        let (n, m, l) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=8));
        let (h, w) = (rng.random_range(n..=12), rng.random_range(m..=12));
        let filt = random_tensor(&mut rng, (n, m, l));
        let img = FeatureMap::new(random_tensor(&mut rng, (h, w, l)));
        let max_rank = (m * l).min(n * l).min(n * m).min(4);
        let rank = rng.random_range(1..=max_rank);
        let (model, _) = cp_als(&filt, rank, &opts).unwrap();
        let recon = model.reconstruct();
        let full = correlate3_full(&img, &recon).unwrap();
        let cp = correlate3_cp(&img, &model, None).unwrap();
        let scale = recon.frobenius_norm() * img.max_window_norm(n, m);
        if scale > 0.0 {
            worst = worst.max(cp.max_abs_diff(&full) / scale);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && secs < 60.0,
        format!("{pairs} pairs, worst relative deviation {worst:.2e} (limit 1e-9), {secs:.2}s (limit 60s)"),
    )
}

fn formula_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut mismatches = 0;
    for _ in 0..50 {
        let (n, m, l) = (rng.random_range(1..=10), rng.random_range(1..=10), rng.random_range(1..=32));
        let img = (n + rng.random_range(0..20), m + rng.random_range(0..20), l);
        let rank = rng.random_range(1..=12);
        if measured_gain(img, (n, m, l), rank).unwrap().to_bits() != theoretical_gain(n, m, l, rank).to_bits() {
            mismatches += 1;
        }
    }
    let part = measured_gain((40, 48, 32), (8, 8, 32), 6).unwrap();
    let pass = mismatches == 0 && part == 2048.0 / 288.0 && part > 7.0;
    outcome(
        pass,
        format!("50 random geometries, {mismatches} inexact; 8x8x32 rank 6 gain {part:.6} (= 2048/288, > 7)"),
    )
}

fn scene_spec(levels: Vec<(usize, usize)>, objects: usize) -> SceneSpec {
    SceneSpec {
        levels,
        objects,
        ..SceneSpec::default()
    }
}

fn scenes(model: &PartModel, spec: &SceneSpec, seeds: std::ops::Range<u64>) -> Vec<SyntheticScene> {
    seeds.map(|s| gen_scene(model, spec, s).unwrap()).collect()
}

fn positives(scenes: &[SyntheticScene]) -> Vec<Positive<'_>> {
    scenes
        .iter()
        .flat_map(|s| s.planted.iter().map(move |h| (&s.pyramid[h.level], h)))
        .collect()
}

fn operation_reduction() -> Outcome {
    let model = gen_model(&ModelSpec::default(), 3).unwrap();
    let spec = SceneSpec::default();
    let scene = gen_scene(&model, &spec, 100).unwrap();
    let calibration = scenes(&model, &spec, 200..210);
    let configs = vec![
        BenchConfig {
            label: "ranks (6,6)".into(),
            ranks: RankSpec::RootParts { root: 6, parts: 6 },
            pruning: false,
        },
        BenchConfig {
            label: "ranks (6,6) pruned".into(),
            ranks: RankSpec::RootParts { root: 6, parts: 6 },
            pruning: true,
        },
    ];
    let report = bench(&model, &scene, &calibration, &configs, &BenchOptions::default()).unwrap();
    let plain = &report.rows[0];
    let pruned = &report.rows[1];
    let pass = plain.mults as f64 * 4.5 <= plain.dense_mults as f64 && pruned.mults <= plain.mults;
    outcome(
        pass,
        format!(
            "dense {} vs CP {} mults (gain {:.3}, needs >= 4.5), pruned {} (gain {:.3}); wall speedup {:.2}x unpruned, {:.2}x pruned (reported, target 2x)",
            plain.dense_mults, plain.mults, plain.counter_gain, pruned.mults, pruned.counter_gain, plain.speedup, pruned.speedup
        ),
    )
}

fn zero_false_pruning() -> Outcome {
    let model = gen_model(&ModelSpec::default(), 4).unwrap();
    let spec = scene_spec(vec![(56, 64), (48, 56)], 7);
    let cal = scenes(&model, &spec, 0..8);
    let pos = positives(&cal);
    let dec = decompose_model(&model, &RankSpec::RootParts { root: 6, parts: 6 }, &AlsOptions::default())
        .unwrap()
        .model;
    let dec = calibrate_thresholds(&dec, &pos).unwrap();
    let mut opts = DetectOptions::new(f64::NEG_INFINITY).with_pruning(true);
    opts.record_trace = true;
    let mut pruned = 0;
    let mut total_pruned_elsewhere = 0u64;
    for scene in &cal {
        let out = detect(&dec, &scene.pyramid, &opts).unwrap();
        total_pruned_elsewhere += out.stats.positions_pruned();
        let trace = out.trace.unwrap();
        for h in &scene.planted {
            let level = trace[h.level].as_ref().unwrap();
            let mut hit = level.root.at(h.root.0, h.root.1) != 0;
            for (pt, p) in level.parts.iter().zip(&h.parts) {
                hit |= pt.at(p.0, p.1) != 0;
            }
            hit |= !out.detections.iter().any(|d| d.hypothesis.level == h.level && d.hypothesis.root == h.root);
            pruned += usize::from(hit);
        }
    }
    outcome(
        pruned == 0 && pos.len() >= 50 && cal.len() >= 5,
        format!(
            "{} positives over {} scenes, {pruned} pruned (other root positions pruned: {total_pruned_elsewhere})",
            pos.len(),
            cal.len()
        ),
    )
}

fn als_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let opts = AlsOptions::default();
    let mut worst_rank1 = 0.0f64;
    for _ in 0..20 {
        let dims = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let v = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let t = outer3(&v(&mut rng, dims.0), &v(&mut rng, dims.1), &v(&mut rng, dims.2)).unwrap();
        let (_, res) = cp_als(&t, 1, &opts).unwrap();
        worst_rank1 = worst_rank1.max(res / t.frobenius_norm());
    }
    let mut worst_rise = 0.0f64;
    for run in 0..100u64 {
        let dims = (rng.random_range(2..=6), rng.random_range(2..=6), rng.random_range(2..=6));
        let t = random_tensor(&mut rng, dims);
        let rank = rng.random_range(1..=3);
        let o = AlsOptions {
            seed: run,
            max_iterations: 50,
            ..AlsOptions::default()
        };
        let (_, _, trace) = cp_als_traced(&t, rank, &o).unwrap();
        let scale = t.frobenius_norm();
        for w in trace.micro_objectives.windows(2) {
            worst_rise = worst_rise.max((w[1] - w[0]) / scale);
        }
    }
    let t = random_tensor(&mut rng, (5, 6, 7));
    let a = cp_als(&t, 3, &opts).unwrap();
    let b = cp_als(&t, 3, &opts).unwrap();
    let identical = a.1.to_bits() == b.1.to_bits() && a.0 == b.0;
    outcome(
        worst_rank1 <= 1e-8 && worst_rise <= 1e-9 && identical,
        format!(
            "rank-1 worst relative residual {worst_rank1:.2e} (limit 1e-8); worst micro-step rise {worst_rise:.2e} (limit 1e-9) over 100 runs; repeat run bit-identical: {identical}"
        ),
    )
}

fn score_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6);
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for k in 0..50u64 {
        let spec = ModelSpec {
            root: (rng.random_range(2..=4), rng.random_range(2..=5)),
            part: (rng.random_range(2..=3), rng.random_range(2..=3)),
            parts: rng.random_range(0..=3),
            channels: rng.random_range(2..=6),
            spectrum_decay: 0.8,
            noise: 0.3,
            ..ModelSpec::default()
        };
        let model = gen_model(&spec, k).unwrap();
        let scene = gen_scene(&model, &scene_spec(vec![(18, 20)], 1), 1000 + k).unwrap();
        let ranks = RankSpec::RootParts {
            root: rng.random_range(1..=3),
            parts: rng.random_range(1..=2),
        };
        let dec = decompose_model(&model, &ranks, &AlsOptions::default()).unwrap();
        let map = &scene.pyramid[0];
        let bound: f64 = model
            .filters()
            .zip(&dec.residuals)
            .map(|(f, r)| r * map.max_window_norm(f.dims().0, f.dims().1))
            .sum::<f64>()
            + 1e-9;
        let opts = DetectOptions::new(f64::NEG_INFINITY);
        let dense = detect_dense(&model, &scene.pyramid, &opts).unwrap().detections;
        let cp = detect(&dec.model, &scene.pyramid, &opts).unwrap().detections;
        assert_eq!(dense.len(), cp.len());
        for (a, b) in dense.iter().zip(&cp) {
            assert_eq!(a.hypothesis.root, b.hypothesis.root);
            let gap = (a.score - b.score).abs();
            if gap > bound {
                violations += 1;
            }
            tightest = tightest.min(bound - gap);
        }
    }
    outcome(
        violations == 0,
        format!("50 model/scene pairs, {violations} hypotheses over the bound (smallest slack {tightest:.3e})"),
    )
}

fn payload_bytes(path: &std::path::Path, header: usize) -> u64 {
    std::fs::metadata(path).unwrap().len() - header as u64
}

fn memory_gain() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = gen_model(&ModelSpec::default(), 7).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for ranks in [RankSpec::RootParts { root: 6, parts: 6 }, RankSpec::PerFilter(vec![9, 2, 3, 4, 5, 6, 7, 8, 1])] {
        let dec: DecomposedModel = decompose_model(&model, &ranks, &AlsOptions::default()).unwrap().model;
        save_model(dir.path().join("dense.json"), &model).unwrap();
        save_decomposed(dir.path().join("dec.json"), &dec).unwrap();
        let mut dense_payload = 0u64;
        let mut dense_file = 0u64;
        let mut factor_payload = 0u64;
        let mut dec_file = 0u64;
        let names = std::iter::once("root".to_string()).chain((0..model.parts.len()).map(|i| format!("part{i}")));
        for (name, f) in names.zip(dec.filters()) {
            let dp = dir.path().join(format!("dense.{name}.t3f"));
            let cp = dir.path().join(format!("dec.{name}.cpf"));
            dense_payload += payload_bytes(&dp, T3F_HEADER_LEN);
            dense_file += std::fs::metadata(&dp).unwrap().len();
            // Weights are per-term scalars stored next to the header.
            factor_payload += payload_bytes(&cp, CPF_HEADER_LEN + 8 * f.cp.rank());
            dec_file += std::fs::metadata(&cp).unwrap().len();
        }
        let measured = factor_payload as f64 / dense_payload as f64;
        let formula = dec.factor_len() as f64 / model.dense_len() as f64;
        let whole = dec_file as f64 / dense_file as f64;
        let rel = (measured - formula).abs() / formula;
        pass &= rel <= 0.02;
        lines.push(format!(
            "ranks {:?}: payload ratio {measured:.5} vs formula {formula:.5} (off by {:.2}%), whole files {whole:.5}",
            dec.ranks(),
            rel * 100.0
        ));
    }
    outcome(pass, lines.join("; "))
}

fn roc_bound() -> Outcome {
    let model = gen_model(&ModelSpec::default(), 8).unwrap();
    let spec = scene_spec(vec![(40, 48), (32, 38)], 3);
    let test = scenes(&model, &spec, 500..520);
    let calibration = scenes(&model, &spec, 600..610);
    let planted: Vec<f64> = test.iter().flat_map(|s| s.planted.iter().map(|h| h.score)).collect();
    let lo = planted.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = planted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let taus = tau_grid(lo - 0.5, hi + 0.5, 20);
    let crit = MatchCriterion::default();
    let dense = roc_eval(&Scorer::Dense(&model), &test, &taus, &crit).unwrap();

    let gap = |points: &[cpdpm::harness::RocPoint]| {
        let worst = dense
            .iter()
            .zip(points)
            .map(|(a, b)| (a.misdetection_rate - b.misdetection_rate).abs())
            .fold(0.0, f64::max);
        let mean = dense
            .iter()
            .zip(points)
            .map(|(a, b)| (a.misdetection_rate - b.misdetection_rate).abs())
            .sum::<f64>()
            / dense.len() as f64;
        (worst, mean)
    };
    let measure = |root: usize, parts: usize, pruning: bool| {
        let mut dec = decompose_model(&model, &RankSpec::RootParts { root, parts }, &AlsOptions::default())
            .unwrap()
            .model;
        if pruning {
            dec = calibrate_thresholds(&dec, &positives(&calibration)).unwrap();
        }
        let scorer = Scorer::Decomposed {
            model: &dec,
            pruning,
            part_prune: PartPruneMode::KillHypothesis,
        };
        let points = roc_eval(&scorer, &test, &taus, &crit).unwrap();
        let (n0, m0, l) = dec.root.cp.dims();
        let dense_cost = (n0 * m0 * l + model.parts.len() * 8 * 8 * l) as f64;
        let cp_cost = (root * (n0 + m0 + l) + model.parts.len() * parts * (8 + 8 + l)) as f64;
        (gap(&points), dense_cost / cp_cost)
    };
    let ((worst6, mean6), reduction6) = measure(6, 6, false);
    let ((worst6p, _), _) = measure(6, 6, true);
    let ((worst2, mean2), _) = measure(2, 2, false);
    let pass = reduction6 >= 4.5 && worst6 <= 0.05 && mean6 <= mean2;
    outcome(
        pass,
        format!(
            "{} objects in {} scenes; ranks (6,6) ({reduction6:.2}x fewer mults) worst miss-rate gap {worst6:.3} (limit 0.05), with pruning {worst6p:.3}; mean gap rank 6 {mean6:.4} vs rank 2 {mean2:.4} (rank 2 worst {worst2:.3})",
            planted.len(),
            test.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle equivalence", oracle_equivalence),
        ("gain formula exactness", formula_exactness),
        ("4.5x operation reduction", operation_reduction),
        ("zero false pruning", zero_false_pruning),
        ("ALS sanity", als_sanity),
        ("score approximation bound", score_bound),
        ("memory gain", memory_gain),
        ("ROC degradation bound", roc_bound),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} criterion {} ({name}): {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
