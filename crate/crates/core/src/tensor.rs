//! Dense order-3 tensors and the matricization helpers used by CP-ALS.
//!
//! Layout is axis-major everywhere: element `(i, j, k)` of an `n × m × l`
//! tensor lives at flat index `(i * m + j) * l + k`, so axis 0 varies
//! slowest and axis 2 fastest.
//!
//! Mode-k unfoldings keep this ordering for the remaining axes. The
//! unfolding of mode `k` has one row per index along axis `k` and one
//! column per pair of the other two indices, taken in ascending axis order
//! with the later axis varying fastest:
//!
//! | mode | row | column          |
//! |------|-----|-----------------|
//! | 0    | `i` | `j * l + k`     |
//! | 1    | `j` | `i * l + k`     |
//! | 2    | `k` | `i * m + j`     |
//!
//! [`khatri_rao`] flattens its column outer products with the first operand
//! slowest, which is what makes `unfold(t, 0) == A · diag(λ) · khatri_rao(B, C)ᵀ`
//! for a CP model (and likewise `(A, C)` for mode 1, `(A, B)` for mode 2).

use crate::error::{Error, Result};

/// Dense `n × m × l` array of `f64`, axis-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    /// Wrap `data` as a tensor, checking length and finiteness.
    pub fn new(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (n, m, l) = dims;
        if n == 0 || m == 0 || l == 0 {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {n}x{m}x{l}"
            )));
        }
        if data.len() != n * m * l {
            return Err(Error::dims(format!(
                "data length {} does not match {n}x{m}x{l}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { dims, data })
    }

    /// All-zero tensor. Panics on a zero extent.
    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        assert!(dims.0 > 0 && dims.1 > 0 && dims.2 > 0, "zero tensor extent");
        Self {
            dims,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_fn(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let (n, m, l) = dims;
        let mut idx = 0;
        for i in 0..n {
            for j in 0..m {
                for k in 0..l {
                    t.data[idx] = f(i, j, k);
                    idx += 1;
                }
            }
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the flat buffer. Callers must keep values finite.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// Sum of squares of all entries.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Frobenius inner product with a tensor of the same dims.
    pub fn dot(&self, other: &Tensor3) -> Result<f64> {
        if self.dims != other.dims {
            return Err(mismatch(self.dims, other.dims));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Copy of the `n × m × l` block whose corner sits at `(y, x, 0)`.
    pub fn block(&self, y: usize, x: usize, dims: (usize, usize, usize)) -> Result<Tensor3> {
        let (n, m, l) = dims;
        if y + n > self.dims.0 || x + m > self.dims.1 || l != self.dims.2 {
            return Err(Error::dims(format!(
                "block {n}x{m}x{l} at ({y},{x}) does not fit in {:?}",
                self.dims
            )));
        }
        let mut data = Vec::with_capacity(n * m * l);
        for i in 0..n {
            let start = self.index(y + i, x, 0);
            data.extend_from_slice(&self.data[start..start + m * l]);
        }
        Ok(Tensor3 { dims, data })
    }

    /// Add `s * patch` into the block at `(y, x, 0)`.
    pub fn add_block(&mut self, y: usize, x: usize, patch: &Tensor3, s: f64) -> Result<()> {
        let (n, m, l) = patch.dims;
        if y + n > self.dims.0 || x + m > self.dims.1 || l != self.dims.2 {
            return Err(Error::dims(format!(
                "patch {:?} at ({y},{x}) does not fit in {:?}",
                patch.dims, self.dims
            )));
        }
        for i in 0..n {
            let start = self.index(y + i, x, 0);
            let row = &mut self.data[start..start + m * l];
            let src = &patch.data[i * m * l..(i + 1) * m * l];
            for (d, p) in row.iter_mut().zip(src) {
                *d += s * p;
            }
        }
        Ok(())
    }
}

fn mismatch(a: (usize, usize, usize), b: (usize, usize, usize)) -> Error {
    Error::dims(format!("{a:?} vs {b:?}"))
}

/// Rank-1 tensor `a ⊗ b ⊗ c`.
pub fn outer3(a: &[f64], b: &[f64], c: &[f64]) -> Result<Tensor3> {
    if a.is_empty() || b.is_empty() || c.is_empty() {
        return Err(Error::invalid("outer3 requires non-empty vectors"));
    }
    let mut data = Vec::with_capacity(a.len() * b.len() * c.len());
    for &ai in a {
        for &bj in b {
            let ab = ai * bj;
            data.extend(c.iter().map(|&ck| ab * ck));
        }
    }
    Tensor3::new((a.len(), b.len(), c.len()), data)
}

pub fn frobenius_norm(t: &Tensor3) -> f64 {
    t.norm_sq().sqrt()
}

/// Elementwise `x - y`.
pub fn tensor_sub(x: &Tensor3, y: &Tensor3) -> Result<Tensor3> {
    if x.dims != y.dims {
        return Err(mismatch(x.dims, y.dims));
    }
    let data = x.data.iter().zip(&y.data).map(|(a, b)| a - b).collect();
    Ok(Tensor3 { dims: x.dims, data })
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix extents must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::dims(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::dims("columns have different lengths"));
        }
        let mut data = vec![0.0; rows * cols];
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                data[i * cols + j] = *v;
            }
        }
        Matrix::new(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, v) in values.iter().enumerate() {
            self.set(r, c, *v);
        }
    }

    pub fn column_norm(&self, c: usize) -> f64 {
        (0..self.rows).map(|r| self.get(r, c).powi(2)).sum::<f64>().sqrt()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `selfᵀ · self`, a `cols × cols` Gramian.
    pub fn gram(&self) -> Matrix {
        let r = self.cols;
        let mut g = Matrix::zeros(r, r);
        for row in self.data.chunks_exact(r) {
            for a in 0..r {
                let va = row[a];
                for b in a..r {
                    g.data[a * r + b] += va * row[b];
                }
            }
        }
        for a in 0..r {
            for b in 0..a {
                g.data[a * r + b] = g.data[b * r + a];
            }
        }
        g
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dims(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Elementwise product with a matrix of the same shape.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dims("hadamard shape mismatch"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

/// Mode-`mode` unfolding; see the module docs for the column order.
pub fn unfold(t: &Tensor3, mode: usize) -> Result<Matrix> {
    let (n, m, l) = t.dims;
    let (rows, cols) = match mode {
        0 => (n, m * l),
        1 => (m, n * l),
        2 => (l, n * m),
        _ => return Err(Error::invalid(format!("mode must be 0, 1 or 2, got {mode}"))),
    };
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..n {
        for j in 0..m {
            for k in 0..l {
                let (r, c) = unfold_position(t.dims, mode, i, j, k);
                out.data[r * cols + c] = t.get(i, j, k);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`unfold`] for a tensor of extents `dims`.
pub fn refold(mat: &Matrix, mode: usize, dims: (usize, usize, usize)) -> Result<Tensor3> {
    let (n, m, l) = dims;
    let expected = match mode {
        0 => (n, m * l),
        1 => (m, n * l),
        2 => (l, n * m),
        _ => return Err(Error::invalid(format!("mode must be 0, 1 or 2, got {mode}"))),
    };
    if (mat.rows, mat.cols) != expected {
        return Err(Error::dims(format!(
            "{}x{} matrix cannot refold into {dims:?} along mode {mode}",
            mat.rows, mat.cols
        )));
    }
    let mut t = Tensor3::zeros(dims);
    for i in 0..n {
        for j in 0..m {
            for k in 0..l {
                let (r, c) = unfold_position(dims, mode, i, j, k);
                t.set(i, j, k, mat.get(r, c));
            }
        }
    }
    Ok(t)
}

#[inline]
fn unfold_position(
    (_, m, l): (usize, usize, usize),
    mode: usize,
    i: usize,
    j: usize,
    k: usize,
) -> (usize, usize) {
    match mode {
        0 => (i, j * l + k),
        1 => (j, i * l + k),
        _ => (k, i * m + j),
    }
}

/// Columnwise Kronecker product: row `a * q + b` of column `r` is `x[a, r] * y[b, r]`.
pub fn khatri_rao(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.cols != y.cols {
        return Err(Error::dims(format!(
            "khatri_rao column counts differ: {} vs {}",
            x.cols, y.cols
        )));
    }
    let r = x.cols;
    let mut out = Matrix::zeros(x.rows * y.rows, r);
    for a in 0..x.rows {
        for b in 0..y.rows {
            let row = a * y.rows + b;
            for c in 0..r {
                out.data[row * r + c] = x.get(a, c) * y.get(b, c);
            }
        }
    }
    Ok(out)
}
