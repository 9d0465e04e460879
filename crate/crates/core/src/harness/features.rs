//! Minimal gradient-orientation histogram features for image demos.
//!
//! Central-difference gradients (one-sided at the borders), unsigned
//! orientation in `[0, π)` hard-binned into `bins` sectors weighted by
//! gradient magnitude, summed per `cell × cell` block of pixels. Each cell's
//! histogram is then divided by the L2 energy of its 3×3 cell neighbourhood
//! (clipped at the borders) plus `ε²`.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sepconv::FeatureMap;
use crate::tensor::Tensor3;

const NORMALIZATION_EPSILON: f64 = 1e-3;

/// Row-major grayscale image with values in any range.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims(format!(
                "{} pixels for a {height}x{width} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    /// Load any PNG/PGM/PPM file as luma in `[0, 1]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.into_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data,
        })
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
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

fn gradient(img: &GrayImage, y: usize, x: usize) -> (f64, f64) {
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
    let (x0, x1) = (x.saturating_sub(1), (x + 1).min(img.width - 1));
    let (y0, y1) = (y.saturating_sub(1), (y + 1).min(img.height - 1));
    let gx = diff(img.get(y, x0), img.get(y, x1), x1 - x0);
    let gy = diff(img.get(y0, x), img.get(y1, x), y1 - y0);
    (gy, gx)
}

/// Orientation bin of an unsigned gradient direction.
fn bin_of(gy: f64, gx: f64, bins: usize) -> usize {
    let theta = gy.atan2(gx).rem_euclid(PI);
    ((theta / PI * bins as f64) as usize).min(bins - 1) % bins
}

/// `(H / cell) × (W / cell) × bins` feature map; trailing pixels that do
/// not fill a cell are dropped.
pub fn extract_features(img: &GrayImage, cell_size: usize, bins: usize) -> Result<FeatureMap> {
    if cell_size == 0 || bins == 0 {
        return Err(Error::invalid("cell size and bin count must be positive"));
    }
    if img.height < cell_size || img.width < cell_size {
        return Err(Error::dims(format!(
            "{}x{} image is smaller than one {cell_size}-pixel cell",
            img.height, img.width
        )));
    }
    let (hc, wc) = (img.height / cell_size, img.width / cell_size);
    let mut hist = Tensor3::zeros((hc, wc, bins));
    for y in 0..hc * cell_size {
        for x in 0..wc * cell_size {
            let (gy, gx) = gradient(img, y, x);
            let mag = (gy * gy + gx * gx).sqrt();
            if mag == 0.0 {
                continue;
            }
            let (cy, cx, b) = (y / cell_size, x / cell_size, bin_of(gy, gx, bins));
            hist.set(cy, cx, b, hist.get(cy, cx, b) + mag);
        }
    }
    let energy: Vec<f64> = (0..hc * wc)
        .map(|c| hist.data()[c * bins..(c + 1) * bins].iter().map(|v| v * v).sum())
        .collect();
    let mut out = Tensor3::zeros((hc, wc, bins));
    for cy in 0..hc {
        for cx in 0..wc {
            let mut e = NORMALIZATION_EPSILON * NORMALIZATION_EPSILON;
            for ny in cy.saturating_sub(1)..(cy + 2).min(hc) {
                for nx in cx.saturating_sub(1)..(cx + 2).min(wc) {
                    e += energy[ny * wc + nx];
                }
            }
            let s = 1.0 / e.sqrt();
            for b in 0..bins {
                out.set(cy, cx, b, hist.get(cy, cx, b) * s);
            }
        }
    }
    Ok(FeatureMap::new(out))
}
