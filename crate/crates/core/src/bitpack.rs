//! LSB-first bit streams.

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BitWriter {
    bytes: Vec<u8>,
    len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `width` bits of `value`.
    pub fn push(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        debug_assert!(width == 64 || value >> width == 0, "{value} wider than {width} bits");
        for b in 0..width {
            if self.len % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.len % 8);
            }
            self.len += 1;
        }
    }

    pub fn bit_len(&self) -> usize {
        self.len
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    len: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8], bit_len: usize) -> Result<Self> {
        if bit_len.div_ceil(8) != bytes.len() {
            return Err(Error::Format(format!(
                "{bit_len} bits need {} bytes, have {}",
                bit_len.div_ceil(8),
                bytes.len()
            )));
        }
        Ok(BitReader { bytes, pos: 0, len: bit_len })
    }

    pub fn read(&mut self, width: u32) -> Result<u64> {
        if self.pos + width as usize > self.len {
            return Err(Error::Format("bit stream exhausted".into()));
        }
        let mut v = 0u64;
        for b in 0..width as usize {
            let p = self.pos + b;
            v |= (((self.bytes[p / 8] >> (p % 8)) & 1) as u64) << b;
        }
        self.pos += width as usize;
        Ok(v)
    }

    pub fn remaining(&self) -> usize {
        self.len - self.pos
    }
}
