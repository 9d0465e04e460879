mod scene;
mod table;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cpdpm::cp::{break_even_rank, kruskal_report, AlsOptions, RankCriterion};
use cpdpm::detector::{calibrate_thresholds, detect, detect_dense, DetectOptions, DetectOutput, PartPruneMode, Positive};
use cpdpm::dpm::{decompose_model, filter_name, load_model, save_decomposed, save_model, DecomposedModel, LoadedModel, RankSpec};
use cpdpm::harness::{
    bench, extract_features, gen_model, gen_scene, nms, roc_eval, tau_grid, BenchConfig, BenchOptions, GrayImage, MatchCriterion,
    ModelSpec, SceneSpec, Scorer, SyntheticScene,
};
use cpdpm::sepconv::theoretical_gain;

use scene::{load_scene, save_scene};
use table::{Cell, Format, Table};

/// Subset tests allowed per Kruskal check before reporting it as skipped.
const KRUSKAL_BUDGET: u64 = 200_000;

#[derive(Parser, Debug)]
#[command(name = "cpdpm", version, about = "Part-based detection with CP-decomposed filters")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file. Tables go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads for parallel sections (1 gives stable timings).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dense part model.
    GenModel(GenModelArgs),
    /// Generate synthetic scenes with planted objects.
    GenScene(GenSceneArgs),
    /// Compute gradient-orientation features of an image as a one-level scene.
    Extract(ExtractArgs),
    /// Decompose every filter of a dense model.
    Decompose(DecomposeArgs),
    /// Fit per-rank pruning thresholds on the planted objects of scenes.
    Calibrate(CalibrateArgs),
    /// Run the detector on one scene.
    Detect(DetectArgs),
    /// Miss rate against false positives over a threshold grid.
    Roc(RocArgs),
    /// Operation counts and wall time against the dense detector.
    Bench(BenchArgs),
    /// Print filter statistics, gains and uniqueness checks.
    Inspect(InspectArgs),
}

fn parse_pair(s: &str, sep: char) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(sep).ok_or_else(|| format!("expected A{sep}B, got {s:?}"))?;
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok((num(a)?, num(b)?))
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_pair(s, 'x')
}

fn parse_ranks(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_pair(s, ',')
}

#[derive(Args, Debug)]
struct GenModelArgs {
    /// Root filter size HxW.
    #[arg(long, value_parser = parse_size, default_value = "5x11")]
    root: (usize, usize),
    /// Part filter size HxW.
    #[arg(long, value_parser = parse_size, default_value = "8x8")]
    part: (usize, usize),
    #[arg(long, default_value_t = 8)]
    parts: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// Build every filter as an exact sum of this many rank-1 terms.
    #[arg(long)]
    low_rank: Option<usize>,
    /// Dense noise added to the low-rank spectrum.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    search_radius: usize,
    #[arg(long, default_value_t = 0.0)]
    bias: f64,
    #[arg(long, default_value = "synthetic")]
    id: String,
}

#[derive(Args, Debug)]
struct GenSceneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Pyramid level sizes, HxW each.
    #[arg(long, value_parser = parse_size, value_delimiter = ',', default_value = "40x48,32x38")]
    levels: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 2)]
    objects: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    /// Scenes to write; seeds run from --seed upward and files are numbered.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// PNG, PGM or PPM image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 8)]
    cell: usize,
    #[arg(long, default_value_t = 9)]
    bins: usize,
}

#[derive(Args, Debug)]
struct AlsArgs {
    #[arg(long, default_value_t = 200)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
}

impl AlsArgs {
    fn options(&self, seed: u64) -> AlsOptions {
        AlsOptions {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            restarts: self.restarts,
            seed,
            ..AlsOptions::default()
        }
    }
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Rank of every filter.
    #[arg(long, conflicts_with_all = ["ranks", "select"])]
    rank: Option<usize>,
    /// Root and part ranks as ROOT,PARTS.
    #[arg(long, value_parser = parse_ranks, conflicts_with = "select")]
    root_parts: Option<(usize, usize)>,
    /// One rank per filter, root first.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["root_parts", "select"])]
    ranks: Option<Vec<usize>>,
    /// Smallest rank whose residual is below E times the squared inverse gain.
    #[arg(long)]
    select: Option<f64>,
    #[command(flatten)]
    als: AlsArgs,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Decomposed model.
    #[arg(long)]
    model: PathBuf,
    /// Scenes whose planted objects serve as positives.
    #[arg(long, num_args = 1.., required = true)]
    scene: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct PruneArgs {
    /// Stop accumulating positions whose partial score falls below the thresholds.
    #[arg(long)]
    pruning: bool,
    /// Let a fully pruned part contribute zero instead of dropping the hypothesis.
    #[arg(long)]
    lenient_parts: bool,
}

impl PruneArgs {
    fn mode(&self) -> PartPruneMode {
        if self.lenient_parts {
            PartPruneMode::ZeroContribution
        } else {
            PartPruneMode::KillHypothesis
        }
    }
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    tau: f64,
    #[command(flatten)]
    prune: PruneArgs,
    /// Suppress root boxes overlapping a better one at this IoU.
    #[arg(long)]
    nms: Option<f64>,
    /// Process pyramid levels in parallel.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
struct RocArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    scene: Vec<PathBuf>,
    /// Threshold grid LO:HI:POINTS. Defaults to 20 points over the planted
    /// score range widened by 0.5 on each side.
    #[arg(long, allow_hyphen_values = true)]
    taus: Option<String>,
    #[command(flatten)]
    prune: PruneArgs,
    /// Matching radius in cells.
    #[arg(long, default_value_t = 1)]
    radius: usize,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Dense model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Scenes used to calibrate pruning thresholds.
    #[arg(long, num_args = 1..)]
    calibration: Vec<PathBuf>,
    /// Rank pairs ROOT,PARTS; repeat for several configurations.
    #[arg(long = "ranks", value_parser = parse_ranks, default_value = "6,6")]
    ranks: Vec<(usize, usize)>,
    /// Also run every configuration with pruning.
    #[arg(long)]
    pruning: bool,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    tau: f64,
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    als: AlsArgs,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dense model to measure decomposition residuals against.
    #[arg(long)]
    dense: Option<PathBuf>,
}

/// Bad flags or flag combinations.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn required_out(out: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    out.clone().ok_or_else(|| usage(format!("--out is required to write {what}")))
}

fn emit(table: &Table, format: Format, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            table.write(format, BufWriter::new(file))
        }
        None => table.write(format, io::stdout().lock()),
    }
}

fn emit_json(value: &serde_json::Value, out: &Option<PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => Ok(io::stdout().lock().write_all(text.as_bytes())?),
    }
}

fn load_dense(path: &Path) -> Result<cpdpm::dpm::PartModel> {
    match load_model(path)? {
        LoadedModel::Dense(m) => Ok(m),
        LoadedModel::Decomposed(m) => {
            log::info!("{}: using the reconstruction of a decomposed model", path.display());
            Ok(m.reconstructed())
        }
    }
}

fn load_decomposed(path: &Path) -> Result<DecomposedModel> {
    match load_model(path)? {
        LoadedModel::Decomposed(m) => Ok(m),
        LoadedModel::Dense(_) => Err(usage(format!("{} is a dense model; decompose it first", path.display()))),
    }
}

fn load_scenes(paths: &[PathBuf]) -> Result<Vec<SyntheticScene>> {
    paths.iter().map(|p| load_scene(p)).collect()
}

fn positives(scenes: &[SyntheticScene]) -> Vec<Positive<'_>> {
    scenes
        .iter()
        .flat_map(|s| s.planted.iter().map(move |h| (&s.pyramid[h.level], h)))
        .collect()
}

fn numbered(path: &Path, i: usize, count: usize) -> PathBuf {
    if count == 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "json".into());
    path.with_file_name(format!("{stem}-{i}.{ext}"))
}

fn gen_model_cmd(cli: &Cli, a: &GenModelArgs) -> Result<()> {
    let out = required_out(&cli.out, "the model")?;
    let spec = ModelSpec {
        root: a.root,
        part: a.part,
        parts: a.parts,
        channels: a.channels,
        low_rank: a.low_rank,
        noise: a.noise,
        search_radius: a.search_radius,
        bias: a.bias,
        id: a.id.clone(),
        ..ModelSpec::default()
    };
    let model = gen_model(&spec, cli.seed)?;
    save_model(&out, &model)?;
    log::info!("wrote {} with {} parts", out.display(), model.parts.len());
    Ok(())
}

fn gen_scene_cmd(cli: &Cli, a: &GenSceneArgs) -> Result<()> {
    let out = required_out(&cli.out, "the scene")?;
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let model = load_dense(&a.model)?;
    let spec = SceneSpec {
        levels: a.levels.clone(),
        objects: a.objects,
        noise: a.noise,
        signal: a.signal,
        ..SceneSpec::default()
    };
    for i in 0..a.count {
        let scene = gen_scene(&model, &spec, cli.seed + i as u64)?;
        save_scene(&numbered(&out, i, a.count), &scene)?;
    }
    Ok(())
}

fn extract_cmd(cli: &Cli, a: &ExtractArgs) -> Result<()> {
    let out = required_out(&cli.out, "the features")?;
    let img = GrayImage::load(&a.image)?;
    let map = extract_features(&img, a.cell, a.bins)?;
    let scene = SyntheticScene {
        pyramid: vec![map],
        planted: vec![],
        noise_level: 0.0,
        seed: cli.seed,
    };
    save_scene(&out, &scene)
}

fn decompose_cmd(cli: &Cli, a: &DecomposeArgs) -> Result<()> {
    let model = load_dense(&a.model)?;
    let spec = match (a.rank, a.root_parts, &a.ranks, a.select) {
        (Some(r), None, None, None) => RankSpec::RootParts { root: r, parts: r },
        (None, Some((root, parts)), None, None) => RankSpec::RootParts { root, parts },
        (None, None, Some(r), None) => RankSpec::PerFilter(r.clone()),
        (None, None, None, Some(e)) => RankSpec::Select(RankCriterion::GainSquared { e }),
        (None, None, None, None) => return Err(usage("give one of --rank, --root-parts, --ranks or --select")),
        _ => return Err(usage("--rank, --root-parts, --ranks and --select are exclusive")),
    };
    let out = required_out(&cli.out, "the decomposed model")?;
    let dec = decompose_model(&model, &spec, &a.als.options(cli.seed))?;
    save_decomposed(&out, &dec.model)?;
    let mut t = Table::new(&["filter", "n", "m", "l", "rank", "residual", "relative_residual", "theoretical_gain", "criterion_met"]);
    for (i, ((f, d), (res, met))) in model
        .filters()
        .zip(dec.model.filters())
        .zip(dec.residuals.iter().zip(&dec.criterion_met))
        .enumerate()
    {
        let (n, m, l) = f.dims();
        let rank = d.cp.rank();
        let norm = f.frobenius_norm();
        t.push(vec![
            filter_name(i).into(),
            n.into(),
            m.into(),
            l.into(),
            rank.into(),
            (*res).into(),
            (if norm > 0.0 { res / norm } else { 0.0 }).into(),
            theoretical_gain(n, m, l, rank).into(),
            (*met).into(),
        ]);
    }
    // The model goes to --out, so the summary always goes to stdout.
    emit(&t, cli.format, &None)
}

fn calibrate_cmd(cli: &Cli, a: &CalibrateArgs) -> Result<()> {
    let dec = load_decomposed(&a.model)?;
    let scenes = load_scenes(&a.scene)?;
    let pos = positives(&scenes);
    if pos.is_empty() {
        bail!(cpdpm::Error::InvalidArgument("the scenes contain no planted objects".into()));
    }
    let calibrated = calibrate_thresholds(&dec, &pos)?;
    let out = cli.out.clone().unwrap_or_else(|| a.model.clone());
    save_decomposed(&out, &calibrated)?;
    let mut t = Table::new(&["filter", "rank", "threshold"]);
    for (i, f) in calibrated.filters().enumerate() {
        let th = f.thresholds.as_ref().expect("calibration sets every filter");
        for (r, v) in th.values().iter().enumerate() {
            t.push(vec![filter_name(i).into(), (r + 1).into(), (*v).into()]);
        }
    }
    emit(&t, cli.format, &None)
}

fn run_detector(model: &LoadedModel, scene: &SyntheticScene, opts: &DetectOptions) -> Result<DetectOutput> {
    Ok(match model {
        LoadedModel::Dense(m) => detect_dense(m, &scene.pyramid, opts)?,
        LoadedModel::Decomposed(m) => detect(m, &scene.pyramid, opts)?,
    })
}

fn root_extent(model: &LoadedModel) -> (usize, usize) {
    let d = match model {
        LoadedModel::Dense(m) => m.root.dims(),
        LoadedModel::Decomposed(m) => m.root.cp.dims(),
    };
    (d.0, d.1)
}

fn detect_cmd(cli: &Cli, a: &DetectArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    if a.prune.pruning && matches!(model, LoadedModel::Dense(_)) {
        return Err(usage("--pruning needs a calibrated decomposed model"));
    }
    let scene = load_scene(&a.scene)?;
    let mut opts = DetectOptions::new(a.tau).with_pruning(a.prune.pruning);
    opts.part_prune = a.prune.mode();
    opts.parallel = a.parallel;
    let out = run_detector(&model, &scene, &opts)?;
    let detections = match a.nms {
        Some(iou) => nms(&out.detections, root_extent(&model), iou),
        None => out.detections,
    };
    let s = &out.stats;
    log::info!(
        "{} detections; {} positions examined, {} pruned, {} killed by parts; {} mults ({} executed); {:.4}s",
        detections.len(),
        s.positions_examined,
        s.positions_pruned(),
        s.positions_killed_by_parts,
        s.mults,
        s.executed_mults,
        s.wall_time_s
    );
    let mut t = Table::new(&["model", "level", "y", "x", "score", "parts"]);
    for d in &detections {
        let h = &d.hypothesis;
        let parts: Vec<String> = h.parts.iter().map(|p| format!("{}:{}", p.0, p.1)).collect();
        t.push(vec![
            d.model_id.as_str().into(),
            h.level.into(),
            h.root.0.into(),
            h.root.1.into(),
            d.score.into(),
            parts.join(";").into(),
        ]);
    }
    match cli.format {
        Format::Csv => emit(&t, cli.format, &cli.out),
        Format::Json => emit_json(&serde_json::json!({ "detections": t.to_json(), "stats": s }), &cli.out),
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let fields: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = fields[..] else {
        return Err(usage(format!("--taus expects LO:HI:POINTS, got {s:?}")));
    };
    let lo: f64 = lo.parse().map_err(|_| usage(format!("bad grid start {lo:?}")))?;
    let hi: f64 = hi.parse().map_err(|_| usage(format!("bad grid end {hi:?}")))?;
    let n: usize = n.parse().map_err(|_| usage(format!("bad grid size {n:?}")))?;
    if !(lo <= hi) || n == 0 {
        return Err(usage("grid needs LO <= HI and at least one point"));
    }
    Ok(tau_grid(lo, hi, n))
}

fn roc_cmd(cli: &Cli, a: &RocArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let scenes = load_scenes(&a.scene)?;
    let taus = match &a.taus {
        Some(s) => parse_grid(s)?,
        None => {
            let scores: Vec<f64> = scenes.iter().flat_map(|s| s.planted.iter().map(|h| h.score)).collect();
            if scores.is_empty() {
                return Err(usage("no planted objects to derive a grid from; pass --taus"));
            }
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            tau_grid(lo - 0.5, hi + 0.5, 20)
        }
    };
    let scorer = match &model {
        LoadedModel::Dense(m) => {
            if a.prune.pruning {
                return Err(usage("--pruning needs a calibrated decomposed model"));
            }
            Scorer::Dense(m)
        }
        LoadedModel::Decomposed(m) => Scorer::Decomposed {
            model: m,
            pruning: a.prune.pruning,
            part_prune: a.prune.mode(),
        },
    };
    let criterion = MatchCriterion {
        radius: a.radius,
        nms_iou: a.nms_iou,
    };
    let points = roc_eval(&scorer, &scenes, &taus, &criterion)?;
    let mut t = Table::new(&["tau", "false_positives", "misses", "fp_per_scene", "fp_per_window", "misdetection_rate"]);
    for p in &points {
        t.push(vec![
            p.tau.into(),
            p.false_positives.into(),
            p.misses.into(),
            p.fp_per_scene.into(),
            p.fp_per_window.into(),
            p.misdetection_rate.into(),
        ]);
    }
    emit(&t, cli.format, &cli.out)
}

fn bench_cmd(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let model = load_dense(&a.model)?;
    let scene = load_scene(&a.scene)?;
    let calibration = load_scenes(&a.calibration)?;
    if a.pruning && calibration.iter().all(|s| s.planted.is_empty()) {
        return Err(usage("--pruning needs --calibration scenes with planted objects"));
    }
    let mut configs = Vec::new();
    for &(root, parts) in &a.ranks {
        for pruning in [false, true] {
            if pruning && !a.pruning {
                continue;
            }
            configs.push(BenchConfig {
                label: format!("ranks {root},{parts}{}", if pruning { " pruned" } else { "" }),
                ranks: RankSpec::RootParts { root, parts },
                pruning,
            });
        }
    }
    let opts = BenchOptions {
        repetitions: a.repetitions,
        tau: a.tau,
        als: a.als.options(cli.seed),
        parallel: a.parallel,
    };
    let report = bench(&model, &scene, &calibration, &configs, &opts)?;
    if cli.format == Format::Json {
        return emit_json(&serde_json::to_value(&report)?, &cli.out);
    }
    let mut t = Table::new(&[
        "label",
        "ranks",
        "pruning",
        "mults",
        "executed_mults",
        "dense_mults",
        "counter_gain",
        "min_theoretical_gain",
        "wall_median_s",
        "dense_wall_median_s",
        "speedup",
        "detections",
        "missing_vs_dense",
        "extra_vs_dense",
        "positions_pruned",
    ]);
    for r in &report.rows {
        let ranks: Vec<String> = r.ranks.iter().map(ToString::to_string).collect();
        t.push(vec![
            r.label.as_str().into(),
            ranks.join(";").into(),
            r.pruning.into(),
            r.mults.into(),
            r.executed_mults.into(),
            r.dense_mults.into(),
            r.counter_gain.into(),
            r.theoretical_gains.iter().copied().fold(f64::INFINITY, f64::min).into(),
            r.wall_median_s.into(),
            r.dense_wall_median_s.into(),
            r.speedup.into(),
            r.detections.into(),
            r.missing_vs_dense.into(),
            r.extra_vs_dense.into(),
            r.positions_pruned.into(),
        ]);
    }
    emit(&t, cli.format, &cli.out)
}

fn inspect_cmd(cli: &Cli, a: &InspectArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let t = match &model {
        LoadedModel::Dense(m) => {
            let mut t = Table::new(&["filter", "n", "m", "l", "frobenius_norm", "elements", "break_even_rank"]);
            for (i, f) in m.filters().enumerate() {
                let (n, mm, l) = f.dims();
                t.push(vec![
                    filter_name(i).into(),
                    n.into(),
                    mm.into(),
                    l.into(),
                    f.frobenius_norm().into(),
                    f.len().into(),
                    break_even_rank(f.dims()).into(),
                ]);
            }
            t
        }
        LoadedModel::Decomposed(m) => {
            let dense = a.dense.as_deref().map(load_dense).transpose()?;
            if let Some(d) = &dense {
                if d.parts.len() != m.parts.len() {
                    return Err(anyhow!(cpdpm::Error::InvalidModel(format!(
                        "dense model has {} parts, decomposed model {}",
                        d.parts.len(),
                        m.parts.len()
                    ))));
                }
            }
            let mut t = Table::new(&[
                "filter",
                "n",
                "m",
                "l",
                "rank",
                "theoretical_gain",
                "factor_elements",
                "dense_elements",
                "calibrated",
                "k_ranks",
                "kruskal_bound",
                "kruskal_holds",
                "residual",
            ]);
            let dense_filters: Vec<_> = dense.iter().flat_map(|d| d.filters()).collect();
            for (i, f) in m.filters().enumerate() {
                let (n, mm, l) = f.cp.dims();
                let rank = f.cp.rank();
                let kr = kruskal_report(&f.cp, Some(KRUSKAL_BUDGET));
                let residual = match dense_filters.get(i) {
                    Some(d) => f.cp.residual(d)?.into(),
                    None => "".into(),
                };
                t.push(vec![
                    filter_name(i).into(),
                    n.into(),
                    mm.into(),
                    l.into(),
                    rank.into(),
                    theoretical_gain(n, mm, l, rank).into(),
                    f.cp.factor_len().into(),
                    (n * mm * l).into(),
                    f.thresholds.is_some().into(),
                    kr.as_ref()
                        .map(|k| format!("{};{};{}", k.k_ranks[0], k.k_ranks[1], k.k_ranks[2]))
                        .unwrap_or_else(|| "skipped".into())
                        .into(),
                    kr.as_ref().map(|k| Cell::Real(k.bound)).unwrap_or_else(|| "".into()),
                    kr.as_ref().map(|k| Cell::Flag(k.holds)).unwrap_or_else(|| "skipped".into()),
                    residual,
                ]);
            }
            t
        }
    };
    log::debug!("{} filters inspected", t.rows());
    emit(&t, cli.format, &cli.out)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::GenModel(a) => gen_model_cmd(cli, a),
        Command::GenScene(a) => gen_scene_cmd(cli, a),
        Command::Extract(a) => extract_cmd(cli, a),
        Command::Decompose(a) => decompose_cmd(cli, a),
        Command::Calibrate(a) => calibrate_cmd(cli, a),
        Command::Detect(a) => detect_cmd(cli, a),
        Command::Roc(a) => roc_cmd(cli, a),
        Command::Bench(a) => bench_cmd(cli, a),
        Command::Inspect(a) => inspect_cmd(cli, a),
    }
}

fn library_code(e: &cpdpm::Error) -> u8 {
    match e {
        cpdpm::Error::Filter { source, .. } => library_code(source),
        cpdpm::Error::Numeric(_) => 3,
        cpdpm::Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

/// 1 for usage errors, 3 for numeric failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<cpdpm::Error>() {
            return library_code(e);
        }
    }
    2
}

/// The error chain joined by `: `, skipping causes whose text the previous
/// message already includes.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed stdout (e.g. piped into `head`) is not a failure.
        Err(e) if e.chain().any(|c| c.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
