use cpdpm::cp::AlsOptions;
use cpdpm::detector::{detect, DetectOptions, PartPruneMode};
use cpdpm::dpm::{decompose_model, load_model, save_decomposed, LoadedModel, RankSpec};
use cpdpm::harness::{
    bench, extract_features, gen_model, gen_scene, roc_eval, tau_grid, BenchConfig, BenchOptions, GrayImage, MatchCriterion, ModelSpec,
    SceneSpec, Scorer,
};

fn spec() -> ModelSpec {
    ModelSpec {
        root: (4, 6),
        part: (3, 3),
        parts: 3,
        channels: 6,
        ..ModelSpec::default()
    }
}

fn scene_spec() -> SceneSpec {
    SceneSpec {
        levels: vec![(22, 26)],
        objects: 2,
        ..SceneSpec::default()
    }
}

#[test]
fn roc_extremes() {
    let model = gen_model(&spec(), 1).unwrap();
    let scenes: Vec<_> = (0..3).map(|s| gen_scene(&model, &scene_spec(), s).unwrap()).collect();
    let points = roc_eval(&Scorer::Dense(&model), &scenes, &[f64::NEG_INFINITY, f64::INFINITY], &MatchCriterion::default()).unwrap();
    assert_eq!(points[0].misses, 0);
    assert!(points[0].false_positives > 0);
    assert_eq!(points[1].false_positives, 0);
    assert_eq!(points[1].misdetection_rate, 1.0);
}

#[test]
fn roc_is_monotone_in_tau() {
    let model = gen_model(&spec(), 2).unwrap();
    let scenes: Vec<_> = (0..4).map(|s| gen_scene(&model, &scene_spec(), 10 + s).unwrap()).collect();
    let points = roc_eval(&Scorer::Dense(&model), &scenes, &tau_grid(-2.0, 3.0, 30), &MatchCriterion::default()).unwrap();
    for w in points.windows(2) {
        assert!(w[1].false_positives <= w[0].false_positives);
        assert!(w[1].misses >= w[0].misses);
    }
}

#[test]
fn exact_decomposition_reproduces_dense_roc() {
    let model = gen_model(&ModelSpec { low_rank: Some(2), ..spec() }, 3).unwrap();
    let scenes: Vec<_> = (0..3).map(|s| gen_scene(&model, &scene_spec(), 20 + s).unwrap()).collect();
    let dec = decompose_model(&model, &RankSpec::RootParts { root: 2, parts: 2 }, &AlsOptions::default()).unwrap().model;
    let taus = tau_grid(-1.0, 2.0, 15);
    let crit = MatchCriterion::default();
    let dense = roc_eval(&Scorer::Dense(&model), &scenes, &taus, &crit).unwrap();
    let cp = roc_eval(
        &Scorer::Decomposed {
            model: &dec,
            pruning: false,
            part_prune: PartPruneMode::KillHypothesis,
        },
        &scenes,
        &taus,
        &crit,
    )
    .unwrap();
    for (a, b) in dense.iter().zip(&cp) {
        assert_eq!(a.misses, b.misses);
        assert_eq!(a.false_positives, b.false_positives);
    }
}

#[test]
fn pipeline_is_deterministic_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let model = gen_model(&spec(), 4).unwrap();
        let scene = gen_scene(&model, &scene_spec(), 5).unwrap();
        let dec = decompose_model(&model, &RankSpec::RootParts { root: 3, parts: 2 }, &AlsOptions::default()).unwrap().model;
        let path = dir.path().join(format!("{tag}.json"));
        save_decomposed(&path, &dec).unwrap();
        let LoadedModel::Decomposed(back) = load_model(&path).unwrap() else {
            panic!("expected a decomposed model");
        };
        detect(&back, &scene.pyramid, &DetectOptions::new(0.0)).unwrap().detections
    };
    let a = run("a");
    assert!(!a.is_empty());
    assert_eq!(a, run("b"));
}

#[test]
fn bench_reports_consistent_counters() {
    let model = gen_model(&spec(), 6).unwrap();
    let scene = gen_scene(&model, &scene_spec(), 7).unwrap();
    let calibration: Vec<_> = (0..3).map(|s| gen_scene(&model, &scene_spec(), 30 + s).unwrap()).collect();
    let configs: Vec<BenchConfig> = [false, true]
        .into_iter()
        .map(|pruning| BenchConfig {
            label: format!("pruning {pruning}"),
            ranks: RankSpec::RootParts { root: 2, parts: 2 },
            pruning,
        })
        .collect();
    let opts = BenchOptions {
        repetitions: 1,
        ..BenchOptions::default()
    };
    let report = bench(&model, &scene, &calibration, &configs, &opts).unwrap();
    let (plain, pruned) = (&report.rows[0], &report.rows[1]);
    assert!(plain.mults < report.dense_mults);
    assert!(pruned.mults <= plain.mults);
    assert_eq!(plain.positions_pruned, 0);
    assert!((plain.counter_gain - report.dense_mults as f64 / plain.mults as f64).abs() < 1e-12);
    assert_eq!(plain.theoretical_gains.len(), 4);
}

#[test]
fn features_from_image_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ramp.png");
    let img = image::GrayImage::from_fn(32, 24, |x, y| image::Luma([((x * 7 + y * 3) % 256) as u8]));
    img.save(&path).unwrap();
    let gray = GrayImage::load(&path).unwrap();
    assert_eq!((gray.height(), gray.width()), (24, 32));
    let f = extract_features(&gray, 4, 9).unwrap();
    assert_eq!(f.tensor().dims(), (6, 8, 9));
    assert!(f.tensor().data().iter().all(|v| v.is_finite() && *v >= 0.0));
}
