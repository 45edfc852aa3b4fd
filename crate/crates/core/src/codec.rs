//! Little-endian primitives shared by the bundle, adaptor and checkpoint files.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor32;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8], version: u32) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    /// Raw values only; the shape must be known to the reader.
    pub fn values(&mut self, t: &Tensor32) {
        t.write_le(&mut self.buf);
    }

    pub fn tensor(&mut self, t: &Tensor32) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.values(t);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    /// Checks the magic header and returns the reader with the format version.
    pub fn open(buf: &'a [u8], magic: &[u8], path: &Path) -> Result<(Self, u32)> {
        if buf.len() < magic.len() || &buf[..magic.len()] != magic {
            return Err(Error::format(
                path,
                format!("missing {} header", String::from_utf8_lossy(magic)),
            ));
        }
        let mut r = Self {
            buf,
            pos: magic.len(),
            path: path.to_path_buf(),
        };
        let version = r.u32()?;
        Ok((r, version))
    }

    pub fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(&self.path, reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| self.err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let bytes = n.checked_mul(8).ok_or_else(|| self.err("array size overflow"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid utf-8 string"))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    pub fn values(&mut self, shape: Vec<usize>) -> Result<Tensor32> {
        let n: usize = shape.iter().product();
        let bytes = n.checked_mul(4).ok_or_else(|| self.err("tensor size overflow"))?;
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor32::new(shape, data)
    }

    pub fn tensor(&mut self) -> Result<Tensor32> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.err(format!("implausible tensor rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        self.values(shape)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
