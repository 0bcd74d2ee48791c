//! Little-endian primitives shared by the checkpoint and dataset formats.

use std::path::Path;

use crate::carray::{CArray, C64};
use crate::error::{Error, Result};

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_shape(out: &mut Vec<u8>, shape: &[usize]) {
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
}

/// Shape header followed by interleaved `(re, im)` pairs.
pub(crate) fn put_carray(out: &mut Vec<u8>, a: &CArray) {
    put_shape(out, a.shape());
    for z in a.data() {
        put_f64(out, z.re);
        put_f64(out, z.im);
    }
}

pub(crate) fn put_reals(out: &mut Vec<u8>, shape: &[usize], data: &[f64]) {
    put_shape(out, shape);
    for &x in data {
        put_f64(out, x);
    }
}

/// Cursor over a byte buffer; errors carry the originating path.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub origin: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], origin: &'a Path) -> Self {
        Reader {
            bytes,
            pos: 0,
            origin,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.origin, "count overflows usize"))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(self.origin, "invalid UTF-8 string"))
    }

    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(self.origin, "array size overflows"))?;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(Error::format(self.origin, "array larger than remaining file"));
        }
        Ok(shape)
    }

    pub fn reals(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.shape()?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((shape, data))
    }

    pub fn carray(&mut self) -> Result<CArray> {
        let shape = self.shape()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| Ok(C64::new(self.f64()?, self.f64()?)))
            .collect::<Result<Vec<_>>>()?;
        CArray::from_vec(&shape, data)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.origin, "trailing bytes"));
        }
        Ok(())
    }
}
