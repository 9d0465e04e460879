//! Miss rate against false positives over a threshold grid.
//!
//! Detections are produced once per scene at `τ = −∞`. Greedy NMS and
//! greedy truth matching both walk detections in descending score order,
//! so the outcome for every detection above `τ` does not depend on those
//! below it. Raising `τ` therefore only removes matches and false
//! positives from a fixed ranking, which makes the curve monotone.

use serde::Serialize;

use crate::detector::{detect, detect_dense, hypothesis_roots, DetectOptions, Detection, PartPruneMode};
use crate::dpm::{DecomposedModel, PartModel};
use crate::error::{Error, Result};

use super::synth::SyntheticScene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub tau: f64,
    pub false_positives: u64,
    pub misses: u64,
    pub fp_per_scene: f64,
    pub fp_per_window: f64,
    pub misdetection_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchCriterion {
    /// Largest Chebyshev distance between a detection's root and a planted
    /// root on the same level.
    pub radius: usize,
    /// Boxes overlapping a higher-scoring box at or above this IoU are suppressed.
    pub nms_iou: f64,
}

impl Default for MatchCriterion {
    fn default() -> Self {
        Self {
            radius: 1,
            nms_iou: 0.5,
        }
    }
}

/// Which detector produces the detections.
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a> {
    Dense(&'a PartModel),
    Decomposed {
        model: &'a DecomposedModel,
        pruning: bool,
        part_prune: PartPruneMode,
    },
}

impl Scorer<'_> {
    fn root_extent(&self) -> (usize, usize) {
        let d = match self {
            Scorer::Dense(m) => m.root.dims(),
            Scorer::Decomposed { model, .. } => model.root.cp.dims(),
        };
        (d.0, d.1)
    }

    fn run(&self, scene: &SyntheticScene) -> Result<Vec<Detection>> {
        let opts = DetectOptions::new(f64::NEG_INFINITY);
        Ok(match *self {
            Scorer::Dense(m) => detect_dense(m, &scene.pyramid, &opts)?.detections,
            Scorer::Decomposed {
                model,
                pruning,
                part_prune,
            } => {
                let mut opts = opts.with_pruning(pruning);
                opts.part_prune = part_prune;
                detect(model, &scene.pyramid, &opts)?.detections
            }
        })
    }
}

fn iou(a: (usize, usize), b: (usize, usize), extent: (usize, usize)) -> f64 {
    let overlap = |p: usize, q: usize, len: usize| (p.min(q) + len).saturating_sub(p.max(q));
    let inter = (overlap(a.0, b.0, extent.0) * overlap(a.1, b.1, extent.1)) as f64;
    let area = (extent.0 * extent.1) as f64;
    inter / (2.0 * area - inter)
}

/// Order for greedy processing: score descending, then `(level, y, x)`.
fn ranking(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .total_cmp(&dets[i].score)
            .then_with(|| (dets[i].hypothesis.level, dets[i].hypothesis.root).cmp(&(dets[j].hypothesis.level, dets[j].hypothesis.root)))
    });
    order
}

/// Greedy per-level non-maximum suppression of root boxes of size `extent`.
/// Returns the kept detections in descending score order.
pub fn nms(dets: &[Detection], extent: (usize, usize), iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<&Detection> = Vec::new();
    for i in ranking(dets) {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| {
            k.hypothesis.level == d.hypothesis.level && iou(k.hypothesis.root, d.hypothesis.root, extent) >= iou_threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Per detection (in descending score order): whether it matched a truth.
fn match_flags(kept: &[Detection], scene: &SyntheticScene, radius: usize) -> Vec<bool> {
    let mut used = vec![false; scene.planted.len()];
    kept.iter()
        .map(|d| {
            let mut best: Option<(usize, usize)> = None;
            for (t, truth) in scene.planted.iter().enumerate() {
                if used[t] || truth.level != d.hypothesis.level {
                    continue;
                }
                let (a, b) = (truth.root, d.hypothesis.root);
                let dist = a.0.abs_diff(b.0).max(a.1.abs_diff(b.1));
                if dist <= radius && best.is_none_or(|(bd, _)| dist < bd) {
                    best = Some((dist, t));
                }
            }
            match best {
                Some((_, t)) => {
                    used[t] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// One point per `τ` in `taus` (which must be sorted ascending).
pub fn roc_eval(scorer: &Scorer<'_>, scenes: &[SyntheticScene], taus: &[f64], criterion: &MatchCriterion) -> Result<Vec<RocPoint>> {
    if scenes.is_empty() {
        return Err(Error::invalid("ROC evaluation needs at least one scene"));
    }
    if taus.windows(2).any(|w| !(w[0] <= w[1])) || taus.iter().any(|t| t.is_nan()) {
        return Err(Error::invalid("threshold grid must be sorted ascending"));
    }
    let extent = scorer.root_extent();
    let mut windows = 0u64;
    let mut truths = 0u64;
    // (score, matched) for every kept detection of every scene.
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for scene in scenes {
        let dets = scorer.run(scene)?;
        let kept = nms(&dets, extent, criterion.nms_iou);
        let flags = match_flags(&kept, scene, criterion.radius);
        ranked.extend(kept.iter().map(|d| d.score).zip(flags));
        truths += scene.planted.len() as u64;
        windows += match scorer {
            Scorer::Dense(m) => scene.pyramid.iter().map(|l| hypothesis_roots(m, l).len() as u64).sum::<u64>(),
            Scorer::Decomposed { model, .. } => {
                let dense = model.reconstructed();
                scene.pyramid.iter().map(|l| hypothesis_roots(&dense, l).len() as u64).sum::<u64>()
            }
        };
    }
    let n_scenes = scenes.len() as f64;
    Ok(taus
        .iter()
        .map(|&tau| {
            let (mut fp, mut hits) = (0u64, 0u64);
            for &(s, matched) in &ranked {
                if s >= tau {
                    if matched {
                        hits += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let misses = truths - hits;
            RocPoint {
                tau,
                false_positives: fp,
                misses,
                fp_per_scene: fp as f64 / n_scenes,
                fp_per_window: if windows == 0 { 0.0 } else { fp as f64 / windows as f64 },
                misdetection_rate: if truths == 0 { 0.0 } else { misses as f64 / truths as f64 },
            }
        })
        .collect())
}

/// `points` evenly spaced thresholds spanning `[lo, hi]`.
pub fn tau_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![lo],
        _ => (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Hypothesis;

    fn det(level: usize, root: (usize, usize), score: f64) -> Detection {
        Detection {
            hypothesis: Hypothesis {
                level,
                root,
                parts: vec![],
                score,
            },
            model_id: String::new(),
            score,
            tau: f64::NEG_INFINITY,
        }
    }

    #[test]
    fn iou_values() {
        assert_eq!(iou((0, 0), (0, 0), (5, 11)), 1.0);
        assert_eq!(iou((0, 0), (5, 0), (5, 11)), 0.0);
        assert!((iou((0, 0), (1, 0), (5, 11)) - 44.0 / 66.0).abs() < 1e-15);
    }

    #[test]
    fn nms_keeps_best_per_cluster_and_level() {
        let dets = vec![det(0, (0, 0), 1.0), det(0, (0, 1), 2.0), det(1, (0, 0), 0.5), det(0, (10, 10), 0.1)];
        let kept = nms(&dets, (4, 4), 0.5);
        let roots: Vec<_> = kept.iter().map(|d| (d.hypothesis.level, d.hypothesis.root)).collect();
        assert_eq!(roots, vec![(0, (0, 1)), (1, (0, 0)), (0, (10, 10))]);
    }

    #[test]
    fn matching_is_one_to_one() {
        let scene = SyntheticScene {
            pyramid: vec![],
            planted: vec![Hypothesis {
                level: 0,
                root: (5, 5),
                parts: vec![],
                score: 0.0,
            }],
            noise_level: 0.0,
            seed: 0,
        };
        let kept = vec![det(0, (5, 6), 2.0), det(0, (5, 5), 1.0), det(1, (5, 5), 0.5)];
        assert_eq!(match_flags(&kept, &scene, 1), vec![true, false, false]);
    }

    #[test]
    fn grid() {
        assert_eq!(tau_grid(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        assert_eq!(tau_grid(2.0, 5.0, 1), vec![2.0]);
        assert_eq!(tau_grid(2.0, 5.0, 20).len(), 20);
    }
}
