//! Star-structured part models and their CP-decomposed counterparts.

mod manifest;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cp::{cp_als, kruskal_report, select_rank_with, AlsOptions, CPModel, RankCriterion};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Subset tests allowed for the advisory uniqueness check per filter.
const KRUSKAL_LOG_BUDGET: u64 = 200_000;

pub use manifest::{load_model, save_decomposed, save_model, LoadedModel, Manifest, ManifestPart, MANIFEST_VERSION};

/// Coefficients of the deformation penalty `d·ψ` with
/// `ψ(dy, dx) = (dx, dy, dx², dy²)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    pub c_dx: f64,
    pub c_dy: f64,
    pub c_dxx: f64,
    pub c_dyy: f64,
}

impl Deformation {
    pub fn new(c_dx: f64, c_dy: f64, c_dxx: f64, c_dyy: f64) -> Self {
        Self { c_dx, c_dy, c_dxx, c_dyy }
    }

    /// `[c_dx, c_dy, c_dxx, c_dyy]`.
    pub fn to_array(self) -> [f64; 4] {
        [self.c_dx, self.c_dy, self.c_dxx, self.c_dyy]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Displacement features `ψ` for a part displaced by `(dy, dx)` from its
    /// nominal position.
    pub fn features(dy: i64, dx: i64) -> [f64; 4] {
        let (dy, dx) = (dy as f64, dx as f64);
        [dx, dy, dx * dx, dy * dy]
    }

    /// Penalty `d·ψ(dy, dx)`.
    #[inline]
    pub fn cost(&self, dy: i64, dx: i64) -> f64 {
        let (dy, dx) = (dy as f64, dx as f64);
        self.c_dx * dx + self.c_dy * dy + self.c_dxx * dx * dx + self.c_dyy * dy * dy
    }
}

/// Placement of one part relative to the root.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartGeometry {
    /// Nominal offset `(dy, dx)` from the root position, in cells.
    pub anchor: (i64, i64),
    pub deformation: Deformation,
    /// Largest displacement searched per axis.
    pub search_radius: usize,
}

impl PartGeometry {
    /// Nominal part position for a root at `root`.
    #[inline]
    pub fn nominal(&self, root: (usize, usize)) -> (i64, i64) {
        (root.0 as i64 + self.anchor.0, root.1 as i64 + self.anchor.1)
    }

    /// Search window for a root at `root`, clipped to the part's valid
    /// support `(hv, wv)`: inclusive-exclusive ranges per axis, or `None`
    /// when clipping leaves nothing.
    pub fn window(&self, root: (usize, usize), support: (usize, usize)) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let (ny, nx) = self.nominal(root);
        let r = self.search_radius as i64;
        let clip = |c: i64, len: usize| {
            let lo = (c - r).max(0);
            let hi = (c + r + 1).min(len as i64);
            (lo < hi).then_some(lo as usize..hi as usize)
        };
        Some((clip(ny, support.0)?, clip(nx, support.1)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartSpec {
    pub filter: Tensor3,
    pub geometry: PartGeometry,
}

/// Root filter, parts and bias. The channel extent is the root's third axis.
#[derive(Clone, Debug, PartialEq)]
pub struct PartModel {
    pub id: String,
    pub root: Tensor3,
    pub parts: Vec<PartSpec>,
    pub bias: f64,
}

impl PartModel {
    #[inline]
    pub fn channels(&self) -> usize {
        self.root.dims().2
    }

    /// Root first, then the parts in order.
    pub fn filters(&self) -> impl Iterator<Item = &Tensor3> {
        std::iter::once(&self.root).chain(self.parts.iter().map(|p| &p.filter))
    }

    pub fn geometries(&self) -> Vec<PartGeometry> {
        self.parts.iter().map(|p| p.geometry).collect()
    }

    /// Dense filter element count `Σ n_i·m_i·l`.
    pub fn dense_len(&self) -> usize {
        self.filters().map(Tensor3::len).sum()
    }
}

/// Name used for filter `index` in errors and reports (0 is the root).
pub fn filter_name(index: usize) -> String {
    if index == 0 {
        "root".to_string()
    } else {
        format!("part {}", index - 1)
    }
}

/// One broken invariant: which field, and which rule it breaks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn violation(field: impl Into<String>, rule: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        rule: rule.into(),
    }
}

fn check_geometry(out: &mut Vec<Violation>, prefix: &str, g: &PartGeometry) {
    let d = g.deformation;
    for (name, v) in [("c_dx", d.c_dx), ("c_dy", d.c_dy), ("c_dxx", d.c_dxx), ("c_dyy", d.c_dyy)] {
        if !v.is_finite() {
            out.push(violation(format!("{prefix}.deformation.{name}"), "must be finite"));
        }
    }
    if d.c_dxx < 0.0 {
        out.push(violation(format!("{prefix}.deformation.c_dxx"), format!("must be >= 0, got {}", d.c_dxx)));
    }
    if d.c_dyy < 0.0 {
        out.push(violation(format!("{prefix}.deformation.c_dyy"), format!("must be >= 0, got {}", d.c_dyy)));
    }
    if g.search_radius < 1 {
        out.push(violation(format!("{prefix}.search_radius"), "must be >= 1"));
    }
}

/// Every broken invariant of `model`; empty when the model is well formed.
pub fn validate(model: &PartModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let l = model.channels();
    if !model.bias.is_finite() {
        out.push(violation("bias", "must be finite"));
    }
    for (i, p) in model.parts.iter().enumerate() {
        let name = format!("parts[{i}]");
        let pl = p.filter.dims().2;
        if pl != l {
            out.push(violation(
                format!("{name}.filter"),
                format!("has {pl} channels but root has {l}"),
            ));
        }
        check_geometry(&mut out, &name, &p.geometry);
    }
    out
}

/// Per-filter pruning thresholds `t_1..t_R`.
#[derive(Clone, Debug, PartialEq)]
pub struct PruningThresholds(Vec<f64>);

impl PruningThresholds {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("thresholds must be non-empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `t_r` for 1-based rank `r`.
    #[inline]
    pub fn at_rank(&self, r: usize) -> f64 {
        self.0[r - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedFilter {
    pub cp: CPModel,
    pub thresholds: Option<PruningThresholds>,
}

impl DecomposedFilter {
    pub fn new(cp: CPModel) -> Self {
        Self { cp, thresholds: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedPart {
    pub filter: DecomposedFilter,
    pub geometry: PartGeometry,
}

/// A [`PartModel`] whose filters are CP models.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedModel {
    pub id: String,
    pub root: DecomposedFilter,
    pub parts: Vec<DecomposedPart>,
    pub bias: f64,
}

impl DecomposedModel {
    #[inline]
    pub fn channels(&self) -> usize {
        self.root.cp.dims().2
    }

    /// Root first, then the parts in order.
    pub fn filters(&self) -> impl Iterator<Item = &DecomposedFilter> {
        std::iter::once(&self.root).chain(self.parts.iter().map(|p| &p.filter))
    }

    pub fn filters_mut(&mut self) -> impl Iterator<Item = &mut DecomposedFilter> {
        std::iter::once(&mut self.root).chain(self.parts.iter_mut().map(|p| &mut p.filter))
    }

    /// `(R_0, R_1, …, R_n)`.
    pub fn ranks(&self) -> Vec<usize> {
        self.filters().map(|f| f.cp.rank()).collect()
    }

    pub fn is_calibrated(&self) -> bool {
        self.filters().all(|f| f.thresholds.is_some())
    }

    pub fn clear_thresholds(&mut self) {
        self.filters_mut().for_each(|f| f.thresholds = None);
    }

    /// Factor element count `Σ R_i·(n_i+m_i+l)`.
    pub fn factor_len(&self) -> usize {
        self.filters().map(|f| f.cp.factor_len()).sum()
    }

    /// Structural checks: shared channel extent, threshold lengths and the
    /// same geometry rules as [`validate`].
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let l = self.channels();
        if !self.bias.is_finite() {
            out.push(violation("bias", "must be finite"));
        }
        for (i, f) in self.filters().enumerate() {
            let name = if i == 0 { "root".to_string() } else { format!("parts[{}]", i - 1) };
            if f.cp.dims().2 != l {
                out.push(violation(
                    format!("{name}.filter"),
                    format!("has {} channels but root has {l}", f.cp.dims().2),
                ));
            }
            if let Some(t) = &f.thresholds {
                if t.len() != f.cp.rank() {
                    out.push(violation(
                        format!("{name}.thresholds"),
                        format!("length {} differs from rank {}", t.len(), f.cp.rank()),
                    ));
                }
            }
        }
        for (i, p) in self.parts.iter().enumerate() {
            check_geometry(&mut out, &format!("parts[{i}]"), &p.geometry);
        }
        out
    }

    /// Dense model with every filter reconstructed from its factors.
    pub fn reconstructed(&self) -> PartModel {
        PartModel {
            id: self.id.clone(),
            root: self.root.cp.reconstruct(),
            parts: self
                .parts
                .iter()
                .map(|p| PartSpec {
                    filter: p.filter.cp.reconstruct(),
                    geometry: p.geometry,
                })
                .collect(),
            bias: self.bias,
        }
    }
}

/// How [`decompose_model`] picks each filter's rank.
#[derive(Clone, Debug, PartialEq)]
pub enum RankSpec {
    /// One rank per filter, root first.
    PerFilter(Vec<usize>),
    /// Rank `root` for the root and `parts` for every part.
    RootParts { root: usize, parts: usize },
    /// Rank selection per filter with the given criterion, scanning up to
    /// the break-even rank.
    Select(RankCriterion),
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub model: DecomposedModel,
    /// `‖f − CP(f)‖_F` per filter, root first.
    pub residuals: Vec<f64>,
    /// Whether the selection criterion was met per filter; always true for
    /// fixed ranks.
    pub criterion_met: Vec<bool>,
}

/// Replace every filter of a valid model by its CP decomposition.
/// Thresholds are left empty.
pub fn decompose_model(model: &PartModel, spec: &RankSpec, opts: &AlsOptions) -> Result<Decomposition> {
    let problems = validate(model);
    if !problems.is_empty() {
        let list: Vec<String> = problems.iter().map(ToString::to_string).collect();
        return Err(Error::InvalidModel(list.join("; ")));
    }
    let filters: Vec<&Tensor3> = model.filters().collect();
    let ranks: Option<Vec<usize>> = match spec {
        RankSpec::PerFilter(r) => {
            if r.len() != filters.len() {
                return Err(Error::invalid(format!(
                    "{} ranks given for {} filters",
                    r.len(),
                    filters.len()
                )));
            }
            Some(r.clone())
        }
        RankSpec::RootParts { root, parts } => {
            Some(std::iter::once(*root).chain(std::iter::repeat_n(*parts, model.parts.len())).collect())
        }
        RankSpec::Select(_) => None,
    };

    let results: Vec<Result<(CPModel, f64, bool)>> = filters
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let out = match (&ranks, spec) {
                (Some(r), _) => cp_als(f, r[i], opts).map(|(m, res)| (m, res, true)),
                (None, RankSpec::Select(c)) => {
                    select_rank_with(f, *c, None, opts).map(|s| (s.model, s.residuals[s.rank - 1], s.criterion_met))
                }
                (None, _) => unreachable!("ranks are fixed for every other spec"),
            };
            out.map_err(|e| e.in_filter(filter_name(i)))
        })
        .collect();

    let mut cps = Vec::with_capacity(filters.len());
    let mut residuals = Vec::with_capacity(filters.len());
    let mut criterion_met = Vec::with_capacity(filters.len());
    for (i, r) in results.into_iter().enumerate() {
        let (m, res, met) = r?;
        log::debug!("{}: rank {} residual {res:.3e}", filter_name(i), m.rank());
        if log::log_enabled!(log::Level::Info) {
            match kruskal_report(&m, Some(KRUSKAL_LOG_BUDGET)) {
                Some(k) if !k.holds => log::info!(
                    "{}: rank {} exceeds the uniqueness bound {} (k-ranks {:?})",
                    filter_name(i),
                    k.rank,
                    k.bound,
                    k.k_ranks
                ),
                Some(_) => {}
                None => log::debug!("{}: uniqueness check skipped, too many subsets", filter_name(i)),
            }
        }
        cps.push(m);
        residuals.push(res);
        criterion_met.push(met);
    }
    let mut cps = cps.into_iter();
    let root = DecomposedFilter::new(cps.next().expect("root is always present"));
    let parts = model
        .parts
        .iter()
        .zip(cps)
        .map(|(p, cp)| DecomposedPart {
            filter: DecomposedFilter::new(cp),
            geometry: p.geometry,
        })
        .collect();
    Ok(Decomposition {
        model: DecomposedModel {
            id: model.id.clone(),
            root,
            parts,
            bias: model.bias,
        },
        residuals,
        criterion_met,
    })
}
