//! Synthetic part models and scenes with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::detector::{hypothesis_roots, score_hypothesis, Hypothesis};
use crate::dpm::{validate, Deformation, PartGeometry, PartModel, PartSpec};
use crate::error::{Error, Result};
use crate::io::quantize_f32;
use crate::sepconv::FeatureMap;
use crate::tensor::Tensor3;

/// Shape and content parameters for [`gen_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// Root extents `(n_0, m_0)`.
    pub root: (usize, usize),
    /// Extents `(n_i, m_i)` shared by all parts.
    pub part: (usize, usize),
    pub parts: usize,
    pub channels: usize,
    /// Build every filter as an exact sum of this many rank-1 terms with
    /// dyadic entries, so its CP decomposition at that rank is exact.
    pub low_rank: Option<usize>,
    /// Rank-1 components of a full-rank filter, with weights `decay^r`.
    pub spectrum_terms: usize,
    pub spectrum_decay: f64,
    /// Standard deviation of the dense noise added before normalisation,
    /// relative to a unit-norm filter.
    pub noise: f64,
    pub search_radius: usize,
    pub deformation: Deformation,
    pub bias: f64,
    pub id: String,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            root: (5, 11),
            part: (8, 8),
            parts: 8,
            channels: 32,
            low_rank: None,
            spectrum_terms: 8,
            spectrum_decay: 0.6,
            noise: 0.05,
            search_radius: 2,
            deformation: Deformation::new(0.0, 0.0, 0.05, 0.05),
            bias: 0.0,
            id: "synthetic".into(),
        }
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn spectral_filter(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), spec: &ModelSpec) -> Tensor3 {
    let (n, m, l) = dims;
    let mut t = Tensor3::zeros(dims);
    let mut weight = 1.0;
    for _ in 0..spec.spectrum_terms {
        let (a, b, c) = (unit_gaussian(rng, n), unit_gaussian(rng, m), unit_gaussian(rng, l));
        for i in 0..n {
            for j in 0..m {
                for k in 0..l {
                    let v = t.get(i, j, k) + weight * a[i] * b[j] * c[k];
                    t.set(i, j, k, v);
                }
            }
        }
        weight *= spec.spectrum_decay;
    }
    let scale = spec.noise / ((n * m * l) as f64).sqrt();
    for v in t.data_mut() {
        *v += scale * rng.sample::<f64, _>(StandardNormal);
    }
    let norm = t.frobenius_norm();
    if norm > 0.0 {
        t.scale(1.0 / norm);
    }
    quantize_f32(&mut t);
    t
}

/// Sum of `rank` outer products of vectors with entries in `{-8..8}/16`.
/// Every element is a multiple of `2^-12` well inside `f32` precision, and
/// the final power-of-two scale keeps it that way.
fn dyadic_low_rank(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), rank: usize) -> Tensor3 {
    let (n, m, l) = dims;
    let mut draw = |len: usize| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(-8i32..=8) as f64 / 16.0).collect();
            if v.iter().any(|&x| x != 0.0) {
                return v;
            }
        }
    };
    let mut t = Tensor3::zeros(dims);
    for _ in 0..rank {
        let (a, b, c) = (draw(n), draw(m), draw(l));
        for i in 0..n {
            for j in 0..m {
                for k in 0..l {
                    let v = t.get(i, j, k) + a[i] * b[j] * c[k];
                    t.set(i, j, k, v);
                }
            }
        }
    }
    let norm = t.frobenius_norm();
    if norm > 0.0 {
        t.scale(2f64.powi(-(norm.log2().round() as i32)));
    }
    t
}

/// Anchors on a grid of four columns, spaced by three cells.
fn anchor(i: usize) -> (i64, i64) {
    ((i / 4) as i64 * 3 - 2, (i % 4) as i64 * 3 - 1)
}

/// Deterministic synthetic model.
pub fn gen_model(spec: &ModelSpec, seed: u64) -> Result<PartModel> {
    let dims_ok = |(n, m): (usize, usize)| n >= 1 && m >= 1;
    if !dims_ok(spec.root) || (spec.parts > 0 && !dims_ok(spec.part)) || spec.channels == 0 {
        return Err(Error::invalid("filter extents and channels must be positive"));
    }
    if spec.low_rank == Some(0) || (spec.low_rank.is_none() && spec.spectrum_terms == 0) {
        return Err(Error::invalid("filters need at least one rank-1 term"));
    }
    if !(spec.spectrum_decay > 0.0) || !(spec.noise >= 0.0) {
        return Err(Error::invalid("spectrum decay must be positive and noise non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filter = |rng: &mut ChaCha8Rng, (n, m): (usize, usize)| match spec.low_rank {
        Some(r) => dyadic_low_rank(rng, (n, m, spec.channels), r),
        None => spectral_filter(rng, (n, m, spec.channels), spec),
    };
    let root = filter(&mut rng, spec.root);
    let parts = (0..spec.parts)
        .map(|i| PartSpec {
            filter: filter(&mut rng, spec.part),
            geometry: PartGeometry {
                anchor: anchor(i),
                deformation: spec.deformation,
                search_radius: spec.search_radius,
            },
        })
        .collect();
    let model = PartModel {
        id: spec.id.clone(),
        root,
        parts,
        bias: spec.bias,
    };
    if let Some(v) = validate(&model).first() {
        return Err(Error::InvalidModel(v.to_string()));
    }
    Ok(model)
}

/// Parameters for [`gen_scene`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// `(H, W)` of each pyramid level.
    pub levels: Vec<(usize, usize)>,
    pub objects: usize,
    /// Standard deviation of the Gaussian background.
    pub noise: f64,
    /// Amplitude of a planted filter pattern.
    pub signal: f64,
    /// Largest planted part displacement per axis (capped by the search radius).
    pub max_displacement: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            levels: vec![(40, 48), (32, 38)],
            objects: 2,
            noise: 0.3,
            signal: 1.0,
            max_displacement: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub pyramid: Vec<FeatureMap>,
    /// Planted objects; `score` is the dense score at the planted positions.
    pub planted: Vec<Hypothesis>,
    pub noise_level: f64,
    pub seed: u64,
}

type Rect = (i64, i64, i64, i64);

fn footprint(model: &PartModel, root: (usize, usize), parts: &[(usize, usize)]) -> Rect {
    let (n0, m0, _) = model.root.dims();
    let mut r = (root.0 as i64, root.1 as i64, (root.0 + n0) as i64, (root.1 + m0) as i64);
    for (p, spec) in parts.iter().zip(&model.parts) {
        let (n, m, _) = spec.filter.dims();
        r.0 = r.0.min(p.0 as i64);
        r.1 = r.1.min(p.1 as i64);
        r.2 = r.2.max((p.0 + n) as i64);
        r.3 = r.3.max((p.1 + m) as i64);
    }
    r
}

fn overlaps(a: Rect, b: Rect) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

/// Deterministic scene: Gaussian background with `spec.objects` planted,
/// non-overlapping copies of the model's filters at displaced part positions.
pub fn gen_scene(model: &PartModel, spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    if spec.levels.is_empty() {
        return Err(Error::invalid("a scene needs at least one level"));
    }
    if !(spec.noise >= 0.0) || !spec.signal.is_finite() {
        return Err(Error::invalid("noise must be non-negative and signal finite"));
    }
    let l = model.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pyramid: Vec<FeatureMap> = spec
        .levels
        .iter()
        .map(|&(h, w)| {
            FeatureMap::new(Tensor3::from_fn((h, w, l), |_, _, _| {
                spec.noise * rng.sample::<f64, _>(StandardNormal)
            }))
        })
        .collect();
    let candidates: Vec<Vec<(usize, usize)>> = pyramid.iter().map(|m| hypothesis_roots(model, m)).collect();
    let usable: Vec<usize> = (0..pyramid.len()).filter(|&i| !candidates[i].is_empty()).collect();
    if spec.objects > 0 && usable.is_empty() {
        return Err(Error::invalid("no pyramid level can hold the model"));
    }

    let mut occupied: Vec<Vec<Rect>> = vec![Vec::new(); pyramid.len()];
    let mut planted = Vec::with_capacity(spec.objects);
    for _ in 0..spec.objects {
        let mut placed = false;
        for _attempt in 0..1000 {
            let level = usable[rng.random_range(0..usable.len())];
            let root = candidates[level][rng.random_range(0..candidates[level].len())];
            let map = &pyramid[level];
            let mut parts = Vec::with_capacity(model.parts.len());
            for p in &model.parts {
                let (n, m, _) = p.filter.dims();
                let (hv, wv) = map.valid_support(n, m).expect("roots imply parts fit");
                let (ys, xs) = p.geometry.window(root, (hv, wv)).expect("roots have windows");
                let d = spec.max_displacement.min(p.geometry.search_radius) as i64;
                let (ny, nx) = p.geometry.nominal(root);
                let pick = |rng: &mut ChaCha8Rng, c: i64, r: &std::ops::Range<usize>| {
                    let clamp = |v: i64| v.clamp(r.start as i64, r.end as i64 - 1);
                    rng.random_range(clamp(c - d)..=clamp(c + d)) as usize
                };
                parts.push((pick(&mut rng, ny, &ys), pick(&mut rng, nx, &xs)));
            }
            let fp = footprint(model, root, &parts);
            if occupied[level].iter().any(|&o| overlaps(o, fp)) {
                continue;
            }
            occupied[level].push(fp);
            let t = pyramid[level].tensor_mut();
            t.add_block(root.0, root.1, &model.root, spec.signal)?;
            for (p, spec_p) in parts.iter().zip(&model.parts) {
                t.add_block(p.0, p.1, &spec_p.filter, spec.signal)?;
            }
            planted.push(Hypothesis {
                level,
                root,
                parts,
                score: 0.0,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not place {} non-overlapping objects",
                spec.objects
            )));
        }
    }
    for h in &mut planted {
        h.score = score_hypothesis(model, &pyramid[h.level], h.root, &h.parts)?;
    }
    planted.sort_by_key(|h| (h.level, h.root));
    Ok(SyntheticScene {
        pyramid,
        planted,
        noise_level: spec.noise,
        seed,
    })
}
