//! Little-endian byte encoder/decoder shared by the binary formats.

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

/// Float width used by a file: assets use `f32`, checkpoints `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Width {
    F32,
    F64,
}

impl Width {
    fn bytes(self) -> usize {
        match self {
            Width::F32 => 4,
            Width::F64 => 8,
        }
    }
}

pub struct Encoder {
    pub buf: Vec<u8>,
    width: Width,
}

impl Encoder {
    pub fn new(magic: &[u8; 8], width: Width) -> Self {
        Encoder {
            buf: magic.to_vec(),
            width,
        }
    }

    pub fn u32(&mut self, x: usize) {
        let x = u32::try_from(x).expect("count exceeds u32");
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn f(&mut self, x: f64) {
        match self.width {
            Width::F32 => self.buf.extend_from_slice(&(x as f32).to_le_bytes()),
            Width::F64 => self.buf.extend_from_slice(&x.to_le_bytes()),
        }
    }

    pub fn fs(&mut self, xs: &[f64]) {
        xs.iter().for_each(|&x| self.f(x));
    }

    pub fn v3(&mut self, v: &Vec3) {
        self.fs(v.as_slice());
    }

    /// Row-major.
    pub fn m3(&mut self, m: &Mat3) {
        for r in 0..3 {
            for c in 0..3 {
                self.f(m[(r, c)]);
            }
        }
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    width: Width,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8], magic: &[u8; 8], width: Width) -> Result<Self> {
        match buf.get(..8) {
            Some(m) if m == magic => Ok(Decoder { buf, pos: 8, width }),
            Some(m) => Err(Error::malformed(
                "magic",
                format!(
                    "expected {:?}, found {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(m)
                ),
            )),
            None => Err(Error::malformed("magic", "file shorter than the 8-byte magic")),
        }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, field: &str, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::malformed(
                field,
                format!("truncated: need {n} bytes at offset {}, {} left", self.pos, self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Fails before allocating if `count` elements of `size` bytes cannot fit.
    pub fn count_fits(&self, field: &str, count: usize, size: usize) -> Result<()> {
        self.reserve(field, count, size)
    }

    fn reserve(&self, field: &str, count: usize, size: usize) -> Result<()> {
        match count.checked_mul(size) {
            Some(n) if n <= self.remaining() => Ok(()),
            _ => Err(Error::malformed(
                field,
                format!("truncated: {count} elements do not fit in {} bytes", self.remaining()),
            )),
        }
    }

    pub fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(field, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    pub fn u32s(&mut self, field: &str, n: usize) -> Result<Vec<usize>> {
        self.reserve(field, n, 4)?;
        (0..n).map(|_| self.u32(field)).collect()
    }

    pub fn f(&mut self, field: &str) -> Result<f64> {
        let x = match self.width {
            Width::F32 => f32::from_le_bytes(self.take(field, 4)?.try_into().unwrap()) as f64,
            Width::F64 => f64::from_le_bytes(self.take(field, 8)?.try_into().unwrap()),
        };
        if !x.is_finite() {
            return Err(Error::malformed(field, format!("non-finite value at offset {}", self.pos)));
        }
        Ok(x)
    }

    pub fn fs(&mut self, field: &str, n: usize) -> Result<Vec<f64>> {
        self.reserve(field, n, self.width.bytes())?;
        (0..n).map(|_| self.f(field)).collect()
    }

    pub fn v3(&mut self, field: &str) -> Result<Vec3> {
        Ok(Vec3::new(self.f(field)?, self.f(field)?, self.f(field)?))
    }

    pub fn v3s(&mut self, field: &str, n: usize) -> Result<Vec<Vec3>> {
        self.reserve(field, n, 3 * self.width.bytes())?;
        (0..n).map(|_| self.v3(field)).collect()
    }

    pub fn m3(&mut self, field: &str) -> Result<Mat3> {
        let v = self.fs(field, 9)?;
        Ok(Mat3::from_row_slice(&v))
    }

    pub fn float_size(&self) -> usize {
        self.width.bytes()
    }

    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::malformed(
                "trailer",
                format!("{} unexpected bytes after the last field", self.remaining()),
            ));
        }
        Ok(())
    }
}
