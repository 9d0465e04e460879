//! Dense and CP-separable "valid" correlation of a feature map with a filter.
//!
//! # Counting convention
//!
//! Every [`ScoreMap`] carries two multiplication counts.
//!
//! * `mults` follows the per-output-position accounting used for speed-up
//!   statements: a dense `n × m × l` filter costs `n·m·l` per valid output
//!   position, and every CP term costs `n + m + l` per valid output
//!   position. The term weight `λ_r` is folded into the final 1-D pass
//!   vector once per term, so it adds nothing per position. With this
//!   convention `dense.mults / cp.mults` equals `n·m·l / (R·(n+m+l))`
//!   exactly.
//! * `executed_mults` counts the scalar multiplications the engine really
//!   performs. For the dense engine the two agree. The separable engine
//!   runs its first passes over the full map, not just the valid support,
//!   so per term it executes `H·W·l + H'·W·n + H'·W'·m` (channel, then y,
//!   then x) which exceeds the convention by the border rows and columns.
//!
//! The `*_counted` variants increment an [`OpCounter`] inside their loops;
//! tests compare that count with the closed forms.

use crate::cp::CPModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Feature map `φ` of height `H` (axis 0), width `W` (axis 1) and `L`
/// channels (axis 2).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor3);

impl FeatureMap {
    pub fn new(t: Tensor3) -> Self {
        FeatureMap(t)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap(Tensor3::zeros((height, width, channels)))
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.dims().0
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.dims().1
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.0.dims().2
    }

    #[inline]
    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor3 {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    /// Number of valid placements of an `n × m` filter, `(H', W')`.
    pub fn valid_support(&self, n: usize, m: usize) -> Option<(usize, usize)> {
        (n >= 1 && m >= 1 && n <= self.height() && m <= self.width())
            .then(|| (self.height() - n + 1, self.width() - m + 1))
    }

    /// `‖φ(p)‖_F` for the `n × m` window anchored at `(y, x)`.
    pub fn window_norm(&self, y: usize, x: usize, n: usize, m: usize) -> f64 {
        let l = self.channels();
        let data = self.0.data();
        let mut acc = 0.0;
        for i in 0..n {
            let start = self.0.index(y + i, x, 0);
            acc += data[start..start + m * l].iter().map(|v| v * v).sum::<f64>();
        }
        acc.sqrt()
    }

    /// Largest `‖φ(p)‖_F` over all valid `n × m` windows.
    pub fn max_window_norm(&self, n: usize, m: usize) -> f64 {
        let Some((hv, wv)) = self.valid_support(n, m) else {
            return 0.0;
        };
        let mut best = 0.0f64;
        for y in 0..hv {
            for x in 0..wv {
                best = best.max(self.window_norm(y, x, n, m));
            }
        }
        best
    }
}

/// Row-major 2-D array of correlation scores with its operation counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
    /// Multiplications under the per-position convention (module docs).
    pub mults: u64,
    /// Multiplications actually performed.
    pub executed_mults: u64,
}

impl ScoreMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
            mults: 0,
            executed_mults: 0,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Largest absolute elementwise difference. Panics on a shape mismatch.
    pub fn max_abs_diff(&self, other: &ScoreMap) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |a, (x, y)| a.max((x - y).abs()))
    }

    /// The scores as an `H' × W' × 1` tensor.
    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::new((self.height, self.width, 1), self.data.clone()).expect("finite scores")
    }
}

/// Receives multiplication counts from inside the correlation loops.
pub trait OpCounter {
    fn add(&mut self, mults: u64);
}

/// Counter that compiles away.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoCount;

impl OpCounter for NoCount {
    #[inline(always)]
    fn add(&mut self, _: u64) {}
}

/// Counter that accumulates every reported multiplication.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoopCount(pub u64);

impl OpCounter for LoopCount {
    #[inline]
    fn add(&mut self, mults: u64) {
        self.0 += mults;
    }
}

/// Order of the three 1-D passes in the separable engine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PassOrder {
    /// Channel contraction, then y, then x.
    #[default]
    ChannelYX,
    /// x, then y, then channel contraction.
    XYChannel,
}

fn check_fit(img: &FeatureMap, dims: (usize, usize, usize)) -> Result<(usize, usize)> {
    let (n, m, l) = dims;
    if l != img.channels() {
        return Err(Error::dims(format!(
            "filter has {l} channels, feature map has {}",
            img.channels()
        )));
    }
    img.valid_support(n, m).ok_or_else(|| {
        Error::dims(format!(
            "{n}x{m} filter does not fit a {}x{} feature map",
            img.height(),
            img.width()
        ))
    })
}

/// Dense multiplications for a `dims` filter over an `(H, W)` map.
pub fn full_mults(img_hw: (usize, usize), dims: (usize, usize, usize)) -> u64 {
    let (n, m, l) = dims;
    let (hv, wv) = (img_hw.0 + 1 - n, img_hw.1 + 1 - m);
    (hv * wv * n * m * l) as u64
}

/// Convention count for `terms` CP terms of a `dims` filter.
pub fn cp_mults(img_hw: (usize, usize), dims: (usize, usize, usize), terms: usize) -> u64 {
    let (n, m, l) = dims;
    let (hv, wv) = (img_hw.0 + 1 - n, img_hw.1 + 1 - m);
    (terms * hv * wv * (n + m + l)) as u64
}

/// Multiplications the separable engine performs for `terms` terms.
pub fn cp_executed_mults(img_hw: (usize, usize), dims: (usize, usize, usize), terms: usize, order: PassOrder) -> u64 {
    let (h, w) = img_hw;
    let (n, m, l) = dims;
    let (hv, wv) = (h + 1 - n, w + 1 - m);
    let per_term = match order {
        PassOrder::ChannelYX => h * w * l + hv * w * n + hv * wv * m,
        PassOrder::XYChannel => h * wv * l * m + hv * wv * l * n + hv * wv * l,
    };
    (terms * per_term) as u64
}

/// Dense valid correlation, `score[y,x] = Σ filt[i,j,k] · img[y+i, x+j, k]`.
pub fn correlate3_full(img: &FeatureMap, filt: &Tensor3) -> Result<ScoreMap> {
    correlate3_full_counted(img, filt, &mut NoCount)
}

pub fn correlate3_full_counted<C: OpCounter>(img: &FeatureMap, filt: &Tensor3, counter: &mut C) -> Result<ScoreMap> {
    let dims = filt.dims();
    let (hv, wv) = check_fit(img, dims)?;
    let (n, m, l) = dims;
    let row_len = m * l;
    let data = img.tensor().data();
    let f = filt.data();
    let mut out = ScoreMap::zeros(hv, wv);
    for y in 0..hv {
        for x in 0..wv {
            let mut s = 0.0;
            for i in 0..n {
                // Rows of the window and of the filter are contiguous m·l runs.
                let start = img.tensor().index(y + i, x, 0);
                let win = &data[start..start + row_len];
                let fr = &f[i * row_len..(i + 1) * row_len];
                for (a, b) in fr.iter().zip(win) {
                    s += a * b;
                }
                counter.add(row_len as u64);
            }
            out.data[y * wv + x] = s;
        }
    }
    out.mults = full_mults((img.height(), img.width()), dims);
    out.executed_mults = out.mults;
    Ok(out)
}

/// One CP term ready for correlation: `λ` is folded into the x-direction
/// vector, which is the final pass in the default order.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTerm {
    pub y: Vec<f64>,
    pub x_weighted: Vec<f64>,
    pub channel: Vec<f64>,
}

/// CP model unpacked into per-term 1-D kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCp {
    dims: (usize, usize, usize),
    terms: Vec<PreparedTerm>,
}

impl PreparedCp {
    pub fn new(model: &CPModel) -> Self {
        let terms = (0..model.rank())
            .map(|r| {
                let (a, b, c) = model.term(r);
                let w = model.weights()[r];
                PreparedTerm {
                    y: a,
                    x_weighted: b.iter().map(|v| w * v).collect(),
                    channel: c,
                }
            })
            .collect();
        Self {
            dims: model.dims(),
            terms,
        }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    #[inline]
    pub fn term(&self, r: usize) -> &PreparedTerm {
        &self.terms[r]
    }

    /// Convention cost of one term at one output position.
    #[inline]
    pub fn term_cost(&self) -> u64 {
        let (n, m, l) = self.dims;
        (n + m + l) as u64
    }
}

/// Scratch planes for one term in the default pass order.
struct Planes {
    channel: Vec<f64>,
    ypass: Vec<f64>,
    term: Vec<f64>,
}

/// Sum of the first `upto_rank` CP terms (all when `None`), each computed as
/// three chained 1-D correlations.
pub fn correlate3_cp(img: &FeatureMap, model: &CPModel, upto_rank: Option<usize>) -> Result<ScoreMap> {
    correlate3_cp_with(img, &PreparedCp::new(model), upto_rank, PassOrder::ChannelYX, &mut NoCount)
}

pub fn correlate3_cp_with<C: OpCounter>(
    img: &FeatureMap,
    cp: &PreparedCp,
    upto_rank: Option<usize>,
    order: PassOrder,
    counter: &mut C,
) -> Result<ScoreMap> {
    let terms = upto_rank.unwrap_or(cp.rank());
    if terms == 0 || terms > cp.rank() {
        return Err(Error::invalid(format!(
            "upto_rank {terms} outside [1, {}]",
            cp.rank()
        )));
    }
    let dims = cp.dims();
    let (hv, wv) = check_fit(img, dims)?;
    let mut out = ScoreMap::zeros(hv, wv);
    let (h, w) = (img.height(), img.width());
    let mut planes = Planes {
        channel: vec![0.0; h * w],
        ypass: vec![0.0; hv * w],
        term: vec![0.0; hv * wv],
    };
    let mut xplanes = Vec::new();
    for r in 0..terms {
        match order {
            PassOrder::ChannelYX => term_channel_yx(img, cp.term(r), dims, &mut planes, counter),
            PassOrder::XYChannel => term_xy_channel(img, cp.term(r), dims, &mut xplanes, &mut planes.term, counter),
        }
        for (s, t) in out.data.iter_mut().zip(&planes.term) {
            *s += t;
        }
    }
    out.mults = cp_mults((h, w), dims, terms);
    out.executed_mults = cp_executed_mults((h, w), dims, terms, order);
    Ok(out)
}

/// `λ_r`-weighted contribution of the single term `r` (0-based).
pub fn correlate3_term(img: &FeatureMap, cp: &PreparedCp, r: usize) -> Result<ScoreMap> {
    if r >= cp.rank() {
        return Err(Error::invalid(format!("term {r} outside rank {}", cp.rank())));
    }
    let dims = cp.dims();
    let (hv, wv) = check_fit(img, dims)?;
    let (h, w) = (img.height(), img.width());
    let mut planes = Planes {
        channel: vec![0.0; h * w],
        ypass: vec![0.0; hv * w],
        term: vec![0.0; hv * wv],
    };
    term_channel_yx(img, cp.term(r), dims, &mut planes, &mut NoCount);
    let mut out = ScoreMap::zeros(hv, wv);
    out.data = planes.term;
    out.mults = cp_mults((h, w), dims, 1);
    out.executed_mults = cp_executed_mults((h, w), dims, 1, PassOrder::ChannelYX);
    Ok(out)
}

fn term_channel_yx<C: OpCounter>(
    img: &FeatureMap,
    term: &PreparedTerm,
    (n, m, l): (usize, usize, usize),
    planes: &mut Planes,
    counter: &mut C,
) {
    let (h, w) = (img.height(), img.width());
    let (hv, wv) = (h + 1 - n, w + 1 - m);
    let data = img.tensor().data();

    // Channel contraction over the whole map.
    for (cell, dst) in planes.channel.iter_mut().enumerate() {
        let px = &data[cell * l..(cell + 1) * l];
        let mut s = 0.0;
        for (c, v) in term.channel.iter().zip(px) {
            s += c * v;
        }
        counter.add(l as u64);
        *dst = s;
    }

    // y pass: rows y'..y'+n of the channel plane.
    for y in 0..hv {
        let dst = &mut planes.ypass[y * w..(y + 1) * w];
        dst.iter_mut().for_each(|v| *v = 0.0);
        for (i, &a) in term.y.iter().enumerate() {
            let src = &planes.channel[(y + i) * w..(y + i + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
            counter.add(w as u64);
        }
    }

    // x pass with the weighted vector.
    for y in 0..hv {
        let dst = &mut planes.term[y * wv..(y + 1) * wv];
        dst.iter_mut().for_each(|v| *v = 0.0);
        let src = &planes.ypass[y * w..(y + 1) * w];
        for (j, &b) in term.x_weighted.iter().enumerate() {
            for (d, s) in dst.iter_mut().zip(&src[j..j + wv]) {
                *d += b * s;
            }
            counter.add(wv as u64);
        }
    }
}

fn term_xy_channel<C: OpCounter>(
    img: &FeatureMap,
    term: &PreparedTerm,
    (n, m, l): (usize, usize, usize),
    scratch: &mut Vec<Vec<f64>>,
    out: &mut [f64],
    counter: &mut C,
) {
    let (h, w) = (img.height(), img.width());
    let (hv, wv) = (h + 1 - n, w + 1 - m);
    let data = img.tensor().data();
    if scratch.len() != 2 {
        *scratch = vec![vec![0.0; h * wv * l], vec![0.0; hv * wv * l]];
    }
    let (xs, ys) = scratch.split_at_mut(1);
    let (xs, ys) = (&mut xs[0], &mut ys[0]);

    // x pass per channel: X[y][x'][k] = Σ_j b'_j · img[y][x'+j][k].
    xs.iter_mut().for_each(|v| *v = 0.0);
    for y in 0..h {
        let dst = &mut xs[y * wv * l..(y + 1) * wv * l];
        for (j, &b) in term.x_weighted.iter().enumerate() {
            let start = (y * w + j) * l;
            let src = &data[start..start + wv * l];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += b * s;
            }
            counter.add((wv * l) as u64);
        }
    }

    // y pass: Y[y'][x'][k] = Σ_i a_i · X[y'+i][x'][k].
    ys.iter_mut().for_each(|v| *v = 0.0);
    let row = wv * l;
    for y in 0..hv {
        let dst = &mut ys[y * row..(y + 1) * row];
        for (i, &a) in term.y.iter().enumerate() {
            let src = &xs[(y + i) * row..(y + i + 1) * row];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
            counter.add(row as u64);
        }
    }

    // Channel contraction on the valid support.
    for (p, dst) in out.iter_mut().enumerate() {
        let px = &ys[p * l..(p + 1) * l];
        let mut s = 0.0;
        for (c, v) in term.channel.iter().zip(px) {
            s += c * v;
        }
        counter.add(l as u64);
        *dst = s;
    }
}

/// Lazily evaluated single-term planes for sparse position queries.
///
/// Produces bit-identical values to the full-map engine in the default pass
/// order: each plane cell is computed by the same expression in the same
/// summation order, just on demand and memoized per term.
pub struct TermCursor<'a> {
    img: &'a FeatureMap,
    cp: &'a PreparedCp,
    term: usize,
    epoch: u32,
    channel: Vec<f64>,
    channel_epoch: Vec<u32>,
    ypass: Vec<f64>,
    ypass_epoch: Vec<u32>,
    executed: u64,
}

impl<'a> TermCursor<'a> {
    pub fn new(img: &'a FeatureMap, cp: &'a PreparedCp) -> Result<Self> {
        let dims = cp.dims();
        let (hv, _) = check_fit(img, dims)?;
        let (h, w) = (img.height(), img.width());
        Ok(Self {
            img,
            cp,
            term: 0,
            epoch: 1,
            channel: vec![0.0; h * w],
            channel_epoch: vec![0; h * w],
            ypass: vec![0.0; hv * w],
            ypass_epoch: vec![0; hv * w],
            executed: 0,
        })
    }

    /// Switch to term `r` (0-based), invalidating the memoized planes.
    pub fn select(&mut self, r: usize) {
        assert!(r < self.cp.rank(), "term {r} outside rank {}", self.cp.rank());
        if r != self.term {
            self.term = r;
            self.epoch += 1;
        }
    }

    #[inline]
    pub fn term(&self) -> usize {
        self.term
    }

    /// Multiplications performed so far.
    #[inline]
    pub fn executed_mults(&self) -> u64 {
        self.executed
    }

    fn channel_at(&mut self, y: usize, x: usize) -> f64 {
        let w = self.img.width();
        let cell = y * w + x;
        if self.channel_epoch[cell] != self.epoch {
            let l = self.img.channels();
            let px = &self.img.tensor().data()[cell * l..(cell + 1) * l];
            let mut s = 0.0;
            for (c, v) in self.cp.term(self.term).channel.iter().zip(px) {
                s += c * v;
            }
            self.executed += l as u64;
            self.channel[cell] = s;
            self.channel_epoch[cell] = self.epoch;
        }
        self.channel[cell]
    }

    fn ypass_at(&mut self, y: usize, x: usize) -> f64 {
        let w = self.img.width();
        let cell = y * w + x;
        if self.ypass_epoch[cell] != self.epoch {
            let n = self.cp.dims().0;
            let mut s = 0.0;
            for i in 0..n {
                let a = self.cp.term(self.term).y[i];
                s += a * self.channel_at(y + i, x);
            }
            self.executed += n as u64;
            self.ypass[cell] = s;
            self.ypass_epoch[cell] = self.epoch;
        }
        self.ypass[cell]
    }

    /// Contribution of the selected term at valid position `(y, x)`.
    pub fn value_at(&mut self, y: usize, x: usize) -> f64 {
        let m = self.cp.dims().1;
        let mut s = 0.0;
        for j in 0..m {
            let b = self.cp.term(self.term).x_weighted[j];
            s += b * self.ypass_at(y, x + j);
        }
        self.executed += m as u64;
        s
    }
}

/// Running partial sums `Σ_{r<i} term_r(y, x)` for `i = 1..=R` at one position.
pub fn partial_scores_at(img: &FeatureMap, cp: &PreparedCp, y: usize, x: usize) -> Result<Vec<f64>> {
    let mut cursor = TermCursor::new(img, cp)?;
    let (hv, wv) = img.valid_support(cp.dims().0, cp.dims().1).expect("checked by cursor");
    if y >= hv || x >= wv {
        return Err(Error::invalid(format!(
            "position ({y},{x}) outside valid support {hv}x{wv}"
        )));
    }
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(cp.rank());
    for r in 0..cp.rank() {
        cursor.select(r);
        acc += cursor.value_at(y, x);
        out.push(acc);
    }
    Ok(out)
}

/// Speed-up of the separable engine predicted from filter extents and rank,
/// `n·m·l / (R·(n+m+l))`.
pub fn theoretical_gain(n: usize, m: usize, l: usize, rank: usize) -> f64 {
    (n * m * l) as f64 / (rank * (n + m + l)) as f64
}

/// Ratio of the dense and separable engines' convention counters, obtained
/// by running both on a zero map of `img_dims`.
pub fn measured_gain(img_dims: (usize, usize, usize), filt_dims: (usize, usize, usize), rank: usize) -> Result<f64> {
    if rank == 0 {
        return Err(Error::invalid("rank must be positive"));
    }
    let img = FeatureMap::new(Tensor3::new(img_dims, vec![0.0; img_dims.0 * img_dims.1 * img_dims.2])?);
    let filt = Tensor3::new(filt_dims, vec![0.0; filt_dims.0 * filt_dims.1 * filt_dims.2])?;
    let dense = correlate3_full(&img, &filt)?;
    let unit = |rows: usize| {
        let cols: Vec<Vec<f64>> = (0..rank)
            .map(|_| {
                let mut c = vec![0.0; rows];
                c[0] = 1.0;
                c
            })
            .collect();
        crate::tensor::Matrix::from_columns(&cols)
    };
    let model = CPModel::new(vec![0.0; rank], unit(filt_dims.0)?, unit(filt_dims.1)?, unit(filt_dims.2)?)?;
    let cp = correlate3_cp(&img, &model, None)?;
    Ok(dense.mults as f64 / cp.mults as f64)
}
