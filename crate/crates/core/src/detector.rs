//! Hypothesis scoring, threshold calibration and detection with
//! convolution shortening.
//!
//! A root position is a hypothesis only if every part's search window,
//! clipped to that part's valid support, is non-empty. Positions near the
//! borders where some window vanishes are not examined by any scorer.
//!
//! With pruning on, partial scores are accumulated term by term in the CP
//! model's descending-`|λ|` order. All surviving positions advance one term
//! at a time, and each filter keeps memoized per-term planes so a cell is
//! never computed twice for the same term. The arithmetic per position is
//! identical to [`correlate3_cp`](crate::sepconv::correlate3_cp), so a
//! position that is never pruned gets the same bits as with pruning off.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::dpm::{DecomposedModel, PartGeometry, PartModel, PruningThresholds};
use crate::error::{Error, Result};
use crate::sepconv::{correlate3_cp_with, correlate3_full, partial_scores_at, FeatureMap, NoCount, PassOrder, PreparedCp, ScoreMap, TermCursor};
use crate::tensor::Tensor3;

/// Root and part positions on one pyramid level, with their score.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub level: usize,
    pub root: (usize, usize),
    pub parts: Vec<(usize, usize)>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub hypothesis: Hypothesis,
    pub model_id: String,
    /// Score including the bias; equals `hypothesis.score`.
    pub score: f64,
    pub tau: f64,
}

/// What happens when every position in a part's window is pruned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum PartPruneMode {
    /// The whole hypothesis is dropped.
    #[default]
    KillHypothesis,
    /// The part contributes zero and sits at its clipped nominal position.
    ZeroContribution,
}

#[derive(Clone, Debug)]
pub struct DetectOptions {
    pub tau: f64,
    pub pruning: bool,
    pub part_prune: PartPruneMode,
    /// Keep the rank at which every position was pruned.
    pub record_trace: bool,
    /// Process pyramid levels on the rayon pool.
    pub parallel: bool,
}

impl DetectOptions {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            pruning: false,
            part_prune: PartPruneMode::default(),
            record_trace: false,
            parallel: false,
        }
    }

    pub fn with_pruning(mut self, pruning: bool) -> Self {
        self.pruning = pruning;
        self
    }
}

/// Work done by one detection run. Merging sums every field.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DetectStats {
    pub positions_examined: u64,
    /// Root positions pruned at rank `r`, at index `r − 1`.
    pub positions_pruned_at_rank: Vec<u64>,
    /// Hypotheses dropped because a part window was fully pruned.
    pub positions_killed_by_parts: u64,
    /// Hypotheses that received a full score.
    pub positions_surviving: u64,
    /// Part positions whose partial score was accumulated.
    pub part_positions_evaluated: u64,
    /// Part positions pruned at rank `r`, at index `r − 1`, over all parts.
    pub part_positions_pruned_at_rank: Vec<u64>,
    /// Multiplications under the per-position convention.
    pub mults: u64,
    /// Multiplications actually performed.
    pub executed_mults: u64,
    pub wall_time_s: f64,
}

fn add_hist(into: &mut Vec<u64>, from: &[u64]) {
    if into.len() < from.len() {
        into.resize(from.len(), 0);
    }
    into.iter_mut().zip(from).for_each(|(a, b)| *a += b);
}

impl DetectStats {
    pub fn merge(&mut self, other: &DetectStats) {
        self.positions_examined += other.positions_examined;
        add_hist(&mut self.positions_pruned_at_rank, &other.positions_pruned_at_rank);
        self.positions_killed_by_parts += other.positions_killed_by_parts;
        self.positions_surviving += other.positions_surviving;
        self.part_positions_evaluated += other.part_positions_evaluated;
        add_hist(&mut self.part_positions_pruned_at_rank, &other.part_positions_pruned_at_rank);
        self.mults += other.mults;
        self.executed_mults += other.executed_mults;
        self.wall_time_s += other.wall_time_s;
    }

    /// Root positions pruned at any rank.
    pub fn positions_pruned(&self) -> u64 {
        self.positions_pruned_at_rank.iter().sum()
    }
}

/// Rank at which each position of a support was pruned; 0 means never.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneTrace {
    pub support: (usize, usize),
    pub pruned_at: Vec<u32>,
}

impl PruneTrace {
    fn new(support: (usize, usize)) -> Self {
        Self {
            support,
            pruned_at: vec![0; support.0 * support.1],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.pruned_at[y * self.support.1 + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelTrace {
    pub root: PruneTrace,
    pub parts: Vec<PruneTrace>,
}

#[derive(Clone, Debug)]
pub struct DetectOutput {
    /// Sorted by `(level, y, x)` of the root.
    pub detections: Vec<Detection>,
    pub stats: DetectStats,
    /// One entry per level when requested; `None` for levels the root does
    /// not fit.
    pub trace: Option<Vec<Option<LevelTrace>>>,
}

/// Deformation-penalised argmax of `score` over a part's search window.
/// Ties go to the first maximum in row-major order, i.e. the smallest
/// `(dy, dx)`. Positions where `score` is `None` are skipped.
fn best_in_window(
    g: &PartGeometry,
    support: (usize, usize),
    root: (usize, usize),
    mut score: impl FnMut(usize, usize) -> Option<f64>,
) -> Option<((usize, usize), f64)> {
    let (ys, xs) = g.window(root, support)?;
    let (ny, nx) = g.nominal(root);
    let mut best: Option<((usize, usize), f64)> = None;
    for y in ys {
        for x in xs.clone() {
            if let Some(s) = score(y, x) {
                let v = s - g.deformation.cost(y as i64 - ny, x as i64 - nx);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some(((y, x), v));
                }
            }
        }
    }
    best
}

/// Best placement of a part for a root at `root`, given the part's score
/// map: `argmax_p (score(p) − d·ψ(p − nominal))` over the clipped window.
pub fn best_part_placement(part: &PartGeometry, scores: &ScoreMap, root: (usize, usize)) -> Result<((usize, usize), f64)> {
    best_in_window(part, (scores.height(), scores.width()), root, |y, x| Some(scores.get(y, x)))
        .ok_or_else(|| Error::invalid(format!("search window empty for root at {root:?}")))
}

fn check_position(map: &FeatureMap, dims: (usize, usize, usize), p: (usize, usize), what: &str) -> Result<()> {
    let (hv, wv) = map
        .valid_support(dims.0, dims.1)
        .ok_or_else(|| Error::dims(format!("{what} filter does not fit the feature map")))?;
    if p.0 >= hv || p.1 >= wv {
        return Err(Error::invalid(format!(
            "{what} position {p:?} outside valid support {hv}x{wv}"
        )));
    }
    Ok(())
}

fn dense_response(map: &FeatureMap, filt: &Tensor3, p: (usize, usize)) -> f64 {
    let (n, m, l) = filt.dims();
    let data = map.tensor().data();
    let f = filt.data();
    let row = m * l;
    let mut s = 0.0;
    for i in 0..n {
        let start = map.tensor().index(p.0 + i, p.1, 0);
        for (a, b) in f[i * row..(i + 1) * row].iter().zip(&data[start..start + row]) {
            s += a * b;
        }
    }
    s
}

/// Reference score `f_0·φ(p_0) + Σ (f_i·φ(p_i) − d_i·ψ(p_i, p_0)) + bias`
/// from dense filters, with no decomposition and no pruning.
pub fn score_hypothesis(model: &PartModel, map: &FeatureMap, root: (usize, usize), parts: &[(usize, usize)]) -> Result<f64> {
    if parts.len() != model.parts.len() {
        return Err(Error::invalid(format!(
            "{} part positions for {} parts",
            parts.len(),
            model.parts.len()
        )));
    }
    if map.channels() != model.channels() {
        return Err(Error::dims(format!(
            "model has {} channels, feature map has {}",
            model.channels(),
            map.channels()
        )));
    }
    check_position(map, model.root.dims(), root, "root")?;
    let mut total = dense_response(map, &model.root, root);
    for (i, (spec, &p)) in model.parts.iter().zip(parts).enumerate() {
        check_position(map, spec.filter.dims(), p, &format!("part {i}"))?;
        let (ny, nx) = spec.geometry.nominal(root);
        let penalty = spec.geometry.deformation.cost(p.0 as i64 - ny, p.1 as i64 - nx);
        total += dense_response(map, &spec.filter, p) - penalty;
    }
    Ok(total + model.bias)
}

/// Valid root positions of a level and the part supports, or `None` when
/// some filter does not fit.
struct LevelGeometry {
    root_support: (usize, usize),
    part_supports: Vec<(usize, usize)>,
    roots: Vec<(usize, usize)>,
}

fn level_geometry(
    map: &FeatureMap,
    root_dims: (usize, usize, usize),
    parts: &[((usize, usize, usize), PartGeometry)],
) -> Option<LevelGeometry> {
    let root_support = map.valid_support(root_dims.0, root_dims.1)?;
    let part_supports: Vec<(usize, usize)> = parts
        .iter()
        .map(|(d, _)| map.valid_support(d.0, d.1))
        .collect::<Option<_>>()?;
    let mut roots = Vec::new();
    for y in 0..root_support.0 {
        for x in 0..root_support.1 {
            let all = parts
                .iter()
                .zip(&part_supports)
                .all(|((_, g), &s)| g.window((y, x), s).is_some());
            if all {
                roots.push((y, x));
            }
        }
    }
    Some(LevelGeometry {
        root_support,
        part_supports,
        roots,
    })
}

/// Valid hypothesis root positions for `model` on `map`.
pub fn hypothesis_roots(model: &PartModel, map: &FeatureMap) -> Vec<(usize, usize)> {
    let parts: Vec<_> = model.parts.iter().map(|p| (p.filter.dims(), p.geometry)).collect();
    level_geometry(map, model.root.dims(), &parts).map(|g| g.roots).unwrap_or_default()
}

struct Assembly<'a> {
    level: usize,
    geometries: &'a [PartGeometry],
    supports: &'a [(usize, usize)],
    bias: f64,
    tau: f64,
    mode: PartPruneMode,
    model_id: &'a str,
}

impl Assembly<'_> {
    /// Place every part for each surviving root and emit detections.
    fn run(
        &self,
        roots: impl Iterator<Item = ((usize, usize), f64)>,
        mut part_score: impl FnMut(usize, usize, usize) -> Option<f64>,
        stats: &mut DetectStats,
    ) -> Vec<Detection> {
        let mut out = Vec::new();
        'roots: for (root, root_score) in roots {
            let mut total = root_score;
            let mut positions = Vec::with_capacity(self.geometries.len());
            for (i, (g, &support)) in self.geometries.iter().zip(self.supports).enumerate() {
                match best_in_window(g, support, root, |y, x| part_score(i, y, x)) {
                    Some((p, placed)) => {
                        total += placed;
                        positions.push(p);
                    }
                    None => match self.mode {
                        PartPruneMode::KillHypothesis => {
                            stats.positions_killed_by_parts += 1;
                            continue 'roots;
                        }
                        PartPruneMode::ZeroContribution => {
                            let (ys, xs) = g.window(root, support).expect("roots have non-empty windows");
                            let (ny, nx) = g.nominal(root);
                            let clamp = |c: i64, r: std::ops::Range<usize>| (c.max(r.start as i64) as usize).min(r.end - 1);
                            positions.push((clamp(ny, ys), clamp(nx, xs)));
                        }
                    },
                }
            }
            stats.positions_surviving += 1;
            let score = total + self.bias;
            if score >= self.tau {
                out.push(Detection {
                    hypothesis: Hypothesis {
                        level: self.level,
                        root,
                        parts: positions,
                        score,
                    },
                    model_id: self.model_id.to_string(),
                    score,
                    tau: self.tau,
                });
            }
        }
        out
    }
}

type LevelResult = (Vec<Detection>, DetectStats, Option<LevelTrace>);

fn check_channels(expected: usize, pyramid: &[FeatureMap]) -> Result<()> {
    for (i, map) in pyramid.iter().enumerate() {
        if map.channels() != expected {
            return Err(Error::dims(format!(
                "level {i} has {} channels, model has {expected}",
                map.channels()
            )));
        }
    }
    Ok(())
}

fn run_levels(
    pyramid: &[FeatureMap],
    parallel: bool,
    want_trace: bool,
    f: impl Fn(usize, &FeatureMap) -> Result<Option<LevelResult>> + Sync,
) -> Result<DetectOutput> {
    let start = Instant::now();
    let results: Vec<Result<Option<LevelResult>>> = if parallel {
        pyramid.par_iter().enumerate().map(|(i, m)| f(i, m)).collect()
    } else {
        pyramid.iter().enumerate().map(|(i, m)| f(i, m)).collect()
    };
    let mut detections = Vec::new();
    let mut stats = DetectStats::default();
    let mut trace = Vec::with_capacity(pyramid.len());
    for r in results {
        match r? {
            Some((d, s, t)) => {
                detections.extend(d);
                stats.merge(&s);
                trace.push(t);
            }
            None => trace.push(None),
        }
    }
    detections.sort_by_key(|d| (d.hypothesis.level, d.hypothesis.root));
    stats.wall_time_s = start.elapsed().as_secs_f64();
    Ok(DetectOutput {
        detections,
        stats,
        trace: want_trace.then_some(trace),
    })
}

/// Detection with dense filters: full correlation maps for every filter,
/// then exhaustive placement. This is the baseline the CP paths are
/// compared against.
pub fn detect_dense(model: &PartModel, pyramid: &[FeatureMap], opts: &DetectOptions) -> Result<DetectOutput> {
    let problems = crate::dpm::validate(model);
    if let Some(v) = problems.first() {
        return Err(Error::InvalidModel(v.to_string()));
    }
    check_channels(model.channels(), pyramid)?;
    let parts: Vec<_> = model.parts.iter().map(|p| (p.filter.dims(), p.geometry)).collect();
    let geometries = model.geometries();
    run_levels(pyramid, opts.parallel, opts.record_trace, |level, map| {
        let Some(geo) = level_geometry(map, model.root.dims(), &parts) else {
            return Ok(None);
        };
        let mut stats = DetectStats::default();
        let root_map = correlate3_full(map, &model.root)?;
        let mut part_maps = Vec::with_capacity(model.parts.len());
        for p in &model.parts {
            part_maps.push(correlate3_full(map, &p.filter)?);
        }
        for s in std::iter::once(&root_map).chain(&part_maps) {
            stats.mults += s.mults;
            stats.executed_mults += s.executed_mults;
        }
        stats.positions_examined = geo.roots.len() as u64;
        let asm = Assembly {
            level,
            geometries: &geometries,
            supports: &geo.part_supports,
            bias: model.bias,
            tau: opts.tau,
            mode: opts.part_prune,
            model_id: &model.id,
        };
        let dets = asm.run(
            geo.roots.iter().map(|&r| (r, root_map.get(r.0, r.1))),
            |i, y, x| Some(part_maps[i].get(y, x)),
            &mut stats,
        );
        let trace = opts.record_trace.then(|| LevelTrace {
            root: PruneTrace::new(geo.root_support),
            parts: geo.part_supports.iter().map(|&s| PruneTrace::new(s)).collect(),
        });
        Ok(Some((dets, stats, trace)))
    })
}

fn thresholds_of(dec: &DecomposedModel) -> Result<Vec<&PruningThresholds>> {
    dec.filters()
        .enumerate()
        .map(|(i, f)| {
            f.thresholds
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("{} has no thresholds; calibrate first", crate::dpm::filter_name(i))))
        })
        .collect()
}

/// Detection with CP-decomposed filters.
///
/// With `opts.pruning` off every filter's full CP score map is computed and
/// the counters are the separable engine's. With it on, positions are
/// pruned term by term against the calibrated thresholds.
pub fn detect(dec: &DecomposedModel, pyramid: &[FeatureMap], opts: &DetectOptions) -> Result<DetectOutput> {
    if let Some(v) = dec.violations().first() {
        return Err(Error::InvalidModel(v.to_string()));
    }
    check_channels(dec.channels(), pyramid)?;
    let thresholds = if opts.pruning { Some(thresholds_of(dec)?) } else { None };
    let prepared: Vec<PreparedCp> = dec.filters().map(|f| PreparedCp::new(&f.cp)).collect();
    let parts: Vec<_> = dec.parts.iter().map(|p| (p.filter.cp.dims(), p.geometry)).collect();
    let geometries: Vec<PartGeometry> = dec.parts.iter().map(|p| p.geometry).collect();
    run_levels(pyramid, opts.parallel, opts.record_trace, |level, map| {
        let Some(geo) = level_geometry(map, dec.root.cp.dims(), &parts) else {
            return Ok(None);
        };
        let asm = Assembly {
            level,
            geometries: &geometries,
            supports: &geo.part_supports,
            bias: dec.bias,
            tau: opts.tau,
            mode: opts.part_prune,
            model_id: &dec.id,
        };
        match &thresholds {
            None => level_full(map, &prepared, &geo, &asm, opts.record_trace).map(Some),
            Some(t) => level_pruned(map, &prepared, t, &geo, &asm, opts.record_trace).map(Some),
        }
    })
}

fn level_full(
    map: &FeatureMap,
    prepared: &[PreparedCp],
    geo: &LevelGeometry,
    asm: &Assembly<'_>,
    record_trace: bool,
) -> Result<LevelResult> {
    let mut stats = DetectStats::default();
    let mut maps = Vec::with_capacity(prepared.len());
    for cp in prepared {
        let s = correlate3_cp_with(map, cp, None, PassOrder::ChannelYX, &mut NoCount)?;
        stats.mults += s.mults;
        stats.executed_mults += s.executed_mults;
        maps.push(s);
    }
    stats.positions_examined = geo.roots.len() as u64;
    let root_map = &maps[0];
    let dets = asm.run(
        geo.roots.iter().map(|&r| (r, root_map.get(r.0, r.1))),
        |i, y, x| Some(maps[i + 1].get(y, x)),
        &mut stats,
    );
    let trace = record_trace.then(|| LevelTrace {
        root: PruneTrace::new(geo.root_support),
        parts: geo.part_supports.iter().map(|&s| PruneTrace::new(s)).collect(),
    });
    Ok((dets, stats, trace))
}

fn bump(hist: &mut Vec<u64>, r: usize) {
    if hist.len() < r {
        hist.resize(r, 0);
    }
    hist[r - 1] += 1;
}

fn level_pruned(
    map: &FeatureMap,
    prepared: &[PreparedCp],
    thresholds: &[&PruningThresholds],
    geo: &LevelGeometry,
    asm: &Assembly<'_>,
    record_trace: bool,
) -> Result<LevelResult> {
    let mut stats = DetectStats {
        positions_examined: geo.roots.len() as u64,
        ..Default::default()
    };
    let mut root_trace = PruneTrace::new(geo.root_support);

    // Root: all positions advance one term at a time.
    let root_cp = &prepared[0];
    let mut cursor = TermCursor::new(map, root_cp)?;
    let mut partial = vec![0.0; geo.roots.len()];
    let mut alive: Vec<usize> = (0..geo.roots.len()).collect();
    let mut evaluations = 0u64;
    for r in 0..root_cp.rank() {
        cursor.select(r);
        let t = thresholds[0].at_rank(r + 1);
        alive.retain(|&k| {
            let (y, x) = geo.roots[k];
            partial[k] += cursor.value_at(y, x);
            evaluations += 1;
            if partial[k] < t {
                bump(&mut stats.positions_pruned_at_rank, r + 1);
                root_trace.pruned_at[y * geo.root_support.1 + x] = (r + 1) as u32;
                false
            } else {
                true
            }
        });
    }
    stats.mults += evaluations * root_cp.term_cost();
    stats.executed_mults += cursor.executed_mults();
    if stats.positions_pruned_at_rank.len() < root_cp.rank() {
        stats.positions_pruned_at_rank.resize(root_cp.rank(), 0);
    }

    // Parts: only cells inside a surviving root's window are evaluated.
    let mut part_scores: Vec<Vec<Option<f64>>> = Vec::with_capacity(prepared.len() - 1);
    let mut part_traces = Vec::with_capacity(prepared.len() - 1);
    for (i, cp) in prepared[1..].iter().enumerate() {
        let support = geo.part_supports[i];
        let g = &asm.geometries[i];
        let mut needed = vec![false; support.0 * support.1];
        for &k in &alive {
            let (ys, xs) = g.window(geo.roots[k], support).expect("roots have non-empty windows");
            for y in ys {
                needed[y * support.1 + xs.start..y * support.1 + xs.end].iter_mut().for_each(|v| *v = true);
            }
        }
        let mut cells: Vec<usize> = (0..needed.len()).filter(|&c| needed[c]).collect();
        stats.part_positions_evaluated += cells.len() as u64;
        let mut trace = PruneTrace::new(support);
        let mut acc = vec![0.0; needed.len()];
        let mut cursor = TermCursor::new(map, cp)?;
        let mut evaluations = 0u64;
        for r in 0..cp.rank() {
            cursor.select(r);
            let t = thresholds[i + 1].at_rank(r + 1);
            cells.retain(|&c| {
                let (y, x) = (c / support.1, c % support.1);
                acc[c] += cursor.value_at(y, x);
                evaluations += 1;
                if acc[c] < t {
                    bump(&mut stats.part_positions_pruned_at_rank, r + 1);
                    trace.pruned_at[c] = (r + 1) as u32;
                    false
                } else {
                    true
                }
            });
        }
        stats.mults += evaluations * cp.term_cost();
        stats.executed_mults += cursor.executed_mults();
        let mut scores = vec![None; needed.len()];
        for c in cells {
            scores[c] = Some(acc[c]);
        }
        part_scores.push(scores);
        part_traces.push(trace);
    }

    let dets = asm.run(
        alive.iter().map(|&k| (geo.roots[k], partial[k])),
        |i, y, x| part_scores[i][y * geo.part_supports[i].1 + x],
        &mut stats,
    );
    let trace = record_trace.then_some(LevelTrace {
        root: root_trace,
        parts: part_traces,
    });
    Ok((dets, stats, trace))
}

/// Run several models over the same pyramid and keep, per root position,
/// the highest-scoring detection (the earlier model on ties).
pub fn detect_mixture(models: &[DecomposedModel], pyramid: &[FeatureMap], opts: &DetectOptions) -> Result<DetectOutput> {
    let mut opts = opts.clone();
    opts.record_trace = false;
    let mut all: Vec<Detection> = Vec::new();
    let mut stats = DetectStats::default();
    for (i, m) in models.iter().enumerate() {
        let out = detect(m, pyramid, &opts).map_err(|e| e.in_filter(format!("model {i} ({})", m.id)))?;
        stats.merge(&out.stats);
        all.extend(out.detections);
    }
    // Stable sort keeps model order among equal keys.
    all.sort_by_key(|d| (d.hypothesis.level, d.hypothesis.root));
    let mut detections: Vec<Detection> = Vec::with_capacity(all.len());
    for d in all {
        match detections.last_mut() {
            Some(last) if (last.hypothesis.level, last.hypothesis.root) == (d.hypothesis.level, d.hypothesis.root) => {
                if d.score > last.score {
                    *last = d;
                }
            }
            _ => detections.push(d),
        }
    }
    Ok(DetectOutput {
        detections,
        stats,
        trace: None,
    })
}

/// A positive example: the pyramid level it lives on and its hypothesis.
pub type Positive<'a> = (&'a FeatureMap, &'a Hypothesis);

/// Set every filter's thresholds to the minimum, over `positives`, of the
/// partial CP score through each term at the positive's position.
pub fn calibrate_thresholds(dec: &DecomposedModel, positives: &[Positive<'_>]) -> Result<DecomposedModel> {
    if positives.is_empty() {
        return Err(Error::invalid("calibration needs at least one positive"));
    }
    let prepared: Vec<PreparedCp> = dec.filters().map(|f| PreparedCp::new(&f.cp)).collect();
    let mut mins: Vec<Vec<f64>> = prepared.iter().map(|cp| vec![f64::INFINITY; cp.rank()]).collect();
    for (k, (map, hyp)) in positives.iter().enumerate() {
        if hyp.parts.len() != dec.parts.len() {
            return Err(Error::invalid(format!(
                "positive {k}: {} part positions for {} parts",
                hyp.parts.len(),
                dec.parts.len()
            )));
        }
        let positions = std::iter::once(hyp.root).chain(hyp.parts.iter().copied());
        for (f, (cp, p)) in prepared.iter().zip(positions).enumerate() {
            let partials = partial_scores_at(map, cp, p.0, p.1)
                .map_err(|e| e.in_filter(format!("positive {k}, {}", crate::dpm::filter_name(f))))?;
            for (m, v) in mins[f].iter_mut().zip(partials) {
                *m = m.min(v);
            }
        }
    }
    let mut out = dec.clone();
    for (f, t) in out.filters_mut().zip(mins) {
        f.thresholds = Some(PruningThresholds::new(t)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpm::{Deformation, PartSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Tensor3 {
        Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn geometry(anchor: (i64, i64), d: Deformation, radius: usize) -> PartGeometry {
        PartGeometry {
            anchor,
            deformation: d,
            search_radius: radius,
        }
    }

    #[test]
    fn root_only_score_is_correlation_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = FeatureMap::new(random_tensor(&mut rng, (6, 7, 3)));
        let model = PartModel {
            id: "r".into(),
            root: random_tensor(&mut rng, (2, 3, 3)),
            parts: vec![],
            bias: 0.75,
        };
        let full = correlate3_full(&map, &model.root).unwrap();
        for y in 0..full.height() {
            for x in 0..full.width() {
                let s = score_hypothesis(&model, &map, (y, x), &[]).unwrap();
                assert!((s - (full.get(y, x) + 0.75)).abs() < 1e-12);
            }
        }
        assert!(score_hypothesis(&model, &map, (5, 0), &[]).is_err());
    }

    #[test]
    fn part_at_anchor_has_no_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = FeatureMap::new(random_tensor(&mut rng, (8, 8, 2)));
        let part = PartSpec {
            filter: random_tensor(&mut rng, (2, 2, 2)),
            geometry: geometry((1, 2), Deformation::new(3.0, -1.0, 2.0, 5.0), 2),
        };
        let model = PartModel {
            id: "p".into(),
            root: Tensor3::zeros((2, 2, 2)),
            parts: vec![part.clone()],
            bias: 0.0,
        };
        let s = score_hypothesis(&model, &map, (2, 1), &[(3, 3)]).unwrap();
        let raw = correlate3_full(&map, &part.filter).unwrap().get(3, 3);
        assert_eq!(s, raw);
    }

    #[test]
    fn zero_deformation_picks_window_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores = correlate3_full(&FeatureMap::new(random_tensor(&mut rng, (12, 12, 1))), &Tensor3::new((1, 1, 1), vec![1.0]).unwrap()).unwrap();
        let g = geometry((0, 0), Deformation::default(), 2);
        let (p, v) = best_part_placement(&g, &scores, (5, 5)).unwrap();
        let mut best = f64::NEG_INFINITY;
        for y in 3..8 {
            for x in 3..8 {
                best = best.max(scores.get(y, x));
            }
        }
        assert_eq!(v, best);
        assert_eq!(scores.get(p.0, p.1), best);
    }

    #[test]
    fn huge_penalty_keeps_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores = correlate3_full(&FeatureMap::new(random_tensor(&mut rng, (10, 10, 1))), &Tensor3::new((1, 1, 1), vec![1.0]).unwrap()).unwrap();
        let g = geometry((1, -1), Deformation::new(0.0, 0.0, 1e6, 1e6), 3);
        let (p, _) = best_part_placement(&g, &scores, (4, 4)).unwrap();
        assert_eq!(p, (5, 3));
    }

    #[test]
    fn placement_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Deformation::new(0.1, 0.1, 0.05, 0.05);
        let g = geometry((0, 0), d, 4);
        for _ in 0..20 {
            let map = FeatureMap::new(random_tensor(&mut rng, (15, 15, 1)));
            let scores = correlate3_full(&map, &Tensor3::new((1, 1, 1), vec![1.0]).unwrap()).unwrap();
            let root = (rng.random_range(0..15), rng.random_range(0..15));
            let (p, v) = best_part_placement(&g, &scores, root).unwrap();
            // Oracle: scan displacements in (dy, dx) lexicographic order.
            let mut best: Option<((usize, usize), f64)> = None;
            for dy in -4i64..=4 {
                for dx in -4i64..=4 {
                    let (y, x) = (root.0 as i64 + dy, root.1 as i64 + dx);
                    if y < 0 || x < 0 || y >= 15 || x >= 15 {
                        continue;
                    }
                    let val = scores.get(y as usize, x as usize) - (0.1 * dx as f64 + 0.1 * dy as f64 + 0.05 * (dx * dx) as f64 + 0.05 * (dy * dy) as f64);
                    if best.is_none_or(|(_, b)| val > b) {
                        best = Some(((y as usize, x as usize), val));
                    }
                }
            }
            let (bp, bv) = best.unwrap();
            assert_eq!(p, bp);
            assert!((v - bv).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_prefer_smallest_displacement() {
        let scores = correlate3_full(&FeatureMap::zeros(5, 5, 1), &Tensor3::new((1, 1, 1), vec![1.0]).unwrap()).unwrap();
        let g = geometry((0, 0), Deformation::default(), 1);
        assert_eq!(best_part_placement(&g, &scores, (2, 2)).unwrap().0, (1, 1));
    }

    #[test]
    fn empty_window_is_an_error() {
        let scores = ScoreMap::zeros(3, 3);
        let g = geometry((10, 0), Deformation::default(), 1);
        assert!(best_part_placement(&g, &scores, (0, 0)).is_err());
    }

    #[test]
    fn calibration_rejects_empty_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = PartModel {
            id: "c".into(),
            root: random_tensor(&mut rng, (2, 2, 2)),
            parts: vec![],
            bias: 0.0,
        };
        let dec = crate::dpm::decompose_model(&model, &crate::dpm::RankSpec::PerFilter(vec![1]), &Default::default()).unwrap();
        assert!(calibrate_thresholds(&dec.model, &[]).is_err());
        let opts = DetectOptions::new(0.0).with_pruning(true);
        assert!(detect(&dec.model, &[FeatureMap::zeros(4, 4, 2)], &opts).is_err());
    }

    #[test]
    fn stats_merge_sums() {
        let mut a = DetectStats {
            positions_examined: 3,
            positions_pruned_at_rank: vec![1],
            mults: 10,
            ..Default::default()
        };
        let b = DetectStats {
            positions_examined: 4,
            positions_pruned_at_rank: vec![0, 2],
            mults: 5,
            ..Default::default()
        };
        a.merge(&b);
        assert_eq!(a.positions_examined, 7);
        assert_eq!(a.positions_pruned_at_rank, vec![1, 2]);
        assert_eq!(a.mults, 15);
    }
}
