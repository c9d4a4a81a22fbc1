//! Little-endian cursor helpers for the binary containers.

use crate::error::{Error, Result, Section};
use crate::tensor::{Tensor, MAX_RANK};

/// Bounds-checked reader that reports the byte offset and section of any
/// failure.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn error(&self, section: Section, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            section,
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize, section: Section) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(
                section,
                format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, section: Section) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    pub fn u32(&mut self, section: Section) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, section: Section) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| self.error(section.clone(), "element count overflows"))?;
        let b = self.take(len, section)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// `(u8 rank, u32 extents..., f32 data...)`
    pub fn tensor(&mut self, section: Section) -> Result<Tensor> {
        let rank = self.u8(section.clone())? as usize;
        if rank > MAX_RANK {
            return Err(self.error(section, format!("tensor rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(section.clone())? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.error(section.clone(), "tensor extents overflow"))?;
        let data = self.f32s(count, section)?;
        Ok(Tensor::new(shape, data).expect("length matches extents"))
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(
                Section::Trailing,
                format!("{} unexpected trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.rank() as u8);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    put_f32s(out, t.data());
}
