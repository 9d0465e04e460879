//! Binary interchange formats.
//!
//! Both formats are little-endian throughout.
//!
//! **T3F** (dense tensor), `16 + 4·n·m·l` bytes:
//!
//! | offset | size      | content                                  |
//! |--------|-----------|------------------------------------------|
//! | 0      | 4         | magic `T3F1`                             |
//! | 4      | 12        | extents `n`, `m`, `l` as `u32`           |
//! | 16     | 4·n·m·l   | elements as `f32`, axis-major            |
//!
//! **CPF** (CP decomposition), `20 + 8·R + 4·R·(n+m+l)` bytes:
//!
//! | offset        | size        | content                             |
//! |---------------|-------------|-------------------------------------|
//! | 0             | 4           | magic `CPF1`                        |
//! | 4             | 4           | rank `R` as `u32`                   |
//! | 8             | 12          | extents `n`, `m`, `l` as `u32`      |
//! | 20            | 8·R         | weights `λ` as `f64`                |
//! | 20 + 8R       | 4·n·R       | factor A, row-major `f32`           |
//! | …             | 4·m·R       | factor B, row-major `f32`           |
//! | …             | 4·l·R       | factor C, row-major `f32`           |
//!
//! Elements are narrowed to `f32` on write and widened exactly on read, so
//! anything that was read from disk writes back bit-identically.

use std::fs;
use std::path::Path;

use crate::cp::CPModel;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor3};

pub const T3F_MAGIC: &[u8; 4] = b"T3F1";
pub const CPF_MAGIC: &[u8; 4] = b"CPF1";
pub const T3F_HEADER_LEN: usize = 16;
pub const CPF_HEADER_LEN: usize = 20;

/// Which payload kind a byte buffer holds, judged by its magic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    Dense,
    Decomposed,
}

pub fn sniff(bytes: &[u8]) -> Option<PayloadKind> {
    match bytes.get(..4)? {
        m if m == T3F_MAGIC => Some(PayloadKind::Dense),
        m if m == CPF_MAGIC => Some(PayloadKind::Decomposed),
        _ => None,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Self { bytes, pos: 0, format }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Malformed {
            format: self.format,
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!(
                "truncated {what}: need {len} bytes, {} left",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            self.pos -= 4;
            return Err(self.err(format!("bad magic {got:?}")));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn extent(&mut self, what: &str) -> Result<usize> {
        let v = self.u32(what)?;
        if v == 0 {
            self.pos -= 4;
            return Err(self.err(format!("{what} must be positive")));
        }
        Ok(v as usize)
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| self.err(format!("{what} size overflows")))?;
        let start = self.pos;
        let raw = self.take(len, what)?;
        let mut out = Vec::with_capacity(count);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Malformed {
                    format: self.format,
                    offset: start + 4 * i,
                    reason: format!("non-finite {what} element"),
                });
            }
            out.push(f64::from(v));
        }
        Ok(out)
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| self.err(format!("{what} size overflows")))?;
        let start = self.pos;
        let raw = self.take(len, what)?;
        let mut out = Vec::with_capacity(count);
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Malformed {
                    format: self.format,
                    offset: start + 8 * i,
                    reason: format!("non-finite {what} element"),
                });
            }
            out.push(v);
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn extent_u32(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::invalid(format!("extent {v} does not fit in u32")))
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_t3f(t: &Tensor3) -> Result<Vec<u8>> {
    let (n, m, l) = t.dims();
    let mut out = Vec::with_capacity(T3F_HEADER_LEN + 4 * t.len());
    out.extend_from_slice(T3F_MAGIC);
    for e in [n, m, l] {
        out.extend_from_slice(&extent_u32(e)?);
    }
    push_f32s(&mut out, t.data());
    Ok(out)
}

pub fn decode_t3f(bytes: &[u8]) -> Result<Tensor3> {
    let mut r = Reader::new(bytes, "T3F");
    r.magic(T3F_MAGIC)?;
    let n = r.extent("extent n")?;
    let m = r.extent("extent m")?;
    let l = r.extent("extent l")?;
    let count = n
        .checked_mul(m)
        .and_then(|v| v.checked_mul(l))
        .ok_or_else(|| r.err("element count overflows"))?;
    let data = r.f32s(count, "tensor")?;
    r.finish()?;
    Tensor3::new((n, m, l), data)
}

pub fn encode_cpf(model: &CPModel) -> Result<Vec<u8>> {
    let (n, m, l) = model.dims();
    let rank = model.rank();
    let mut out = Vec::with_capacity(CPF_HEADER_LEN + 8 * rank + 4 * model.factor_len());
    out.extend_from_slice(CPF_MAGIC);
    for e in [rank, n, m, l] {
        out.extend_from_slice(&extent_u32(e)?);
    }
    for w in model.weights() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for mode in 0..3 {
        push_f32s(&mut out, model.factor(mode).data());
    }
    Ok(out)
}

pub fn decode_cpf(bytes: &[u8]) -> Result<CPModel> {
    let mut r = Reader::new(bytes, "CPF");
    r.magic(CPF_MAGIC)?;
    let rank = r.extent("rank")?;
    let n = r.extent("extent n")?;
    let m = r.extent("extent m")?;
    let l = r.extent("extent l")?;
    let weights = r.f64s(rank, "weights")?;
    let mut factors = Vec::with_capacity(3);
    for (rows, name) in [(n, "factor A"), (m, "factor B"), (l, "factor C")] {
        let count = rows.checked_mul(rank).ok_or_else(|| r.err("factor size overflows"))?;
        let data = r.f32s(count, name)?;
        factors.push(Matrix::new(rows, rank, data)?);
    }
    r.finish()?;
    let c = factors.pop().unwrap();
    let b = factors.pop().unwrap();
    let a = factors.pop().unwrap();
    CPModel::new(weights, a, b, c).map_err(|e| Error::Malformed {
        format: "CPF",
        offset: CPF_HEADER_LEN,
        reason: e.to_string(),
    })
}

pub fn write_t3f(path: impl AsRef<Path>, t: &Tensor3) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_t3f(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_t3f(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    decode_t3f(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_cpf(path: impl AsRef<Path>, model: &CPModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cpf(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_cpf(path: impl AsRef<Path>) -> Result<CPModel> {
    let path = path.as_ref();
    decode_cpf(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Round every element to the nearest `f32`, the precision kept on disk.
pub fn quantize_f32(t: &mut Tensor3) {
    t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::{cp_als, AlsOptions};

    #[test]
    fn t3f_layout_is_exact() {
        let t = Tensor3::new((1, 2, 1), vec![1.5, -2.0]).unwrap();
        let bytes = encode_t3f(&t).unwrap();
        assert_eq!(&bytes[..4], b"T3F1");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.5f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &(-2.0f32).to_le_bytes());
        assert_eq!(decode_t3f(&bytes).unwrap(), t);
        assert_eq!(sniff(&bytes), Some(PayloadKind::Dense));
    }

    #[test]
    fn t3f_errors_name_offsets() {
        let t = Tensor3::new((1, 1, 2), vec![1.0, 2.0]).unwrap();
        let bytes = encode_t3f(&t).unwrap();
        match decode_t3f(&bytes[..20]) {
            Err(Error::Malformed { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_t3f(&bad), Err(Error::Malformed { offset: 0, .. })));
        let mut zero = bytes.clone();
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_t3f(&zero), Err(Error::Malformed { offset: 8, .. })));
        let mut nan = bytes;
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_t3f(&nan), Err(Error::Malformed { offset: 20, .. })));
    }

    #[test]
    fn cpf_size_and_idempotent_round_trip() {
        let t = Tensor3::from_fn((3, 4, 5), |i, j, k| ((i * 7 + j * 3 + k) % 5) as f64 - 2.0);
        let (model, _) = cp_als(&t, 3, &AlsOptions::default()).unwrap();
        let bytes = encode_cpf(&model).unwrap();
        assert_eq!(bytes.len(), CPF_HEADER_LEN + 8 * 3 + 4 * 3 * (3 + 4 + 5));
        let loaded = decode_cpf(&bytes).unwrap();
        assert_eq!(loaded.rank(), 3);
        assert_eq!(loaded.dims(), (3, 4, 5));
        assert_eq!(loaded.weights(), model.weights());
        // Widened data re-encodes to the same bytes.
        assert_eq!(encode_cpf(&loaded).unwrap(), bytes);
        for truncate in [3, 19, 30, bytes.len() - 1] {
            assert!(decode_cpf(&bytes[..truncate]).is_err());
        }
    }
}
