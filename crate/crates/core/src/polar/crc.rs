//! Bitwise CRC over bit vectors (one bit per `u8`, most significant first).

use crate::error::{AsrError, Result};

/// Generator polynomials (without the leading `x^r` term) for widths 0..=16.
/// Each entry for `r >= 2` is a primitive polynomial, so every single-bit and
/// double-bit error within `2^r - 1` bits is detected.
const STANDARD_POLYS: [u32; 17] = [
    0x0, 0x1, 0x3, 0x3, 0x3, 0x05, 0x03, 0x09, 0x1D, 0x011, 0x009, 0x005, 0x053, 0x01B, 0x443,
    0x0003, 0x100B,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrcSpec {
    pub width: u32,
    pub poly: u32,
    pub init: u32,
}

impl CrcSpec {
    /// The pinned generator for `width` bits with a zero initial register.
    pub fn standard(width: u32) -> Result<Self> {
        let poly = *STANDARD_POLYS
            .get(width as usize)
            .ok_or_else(|| AsrError::InvalidConfig(format!("no CRC polynomial for width {width}")))?;
        Ok(CrcSpec {
            width,
            poly,
            init: 0,
        })
    }

    fn mask(&self) -> u32 {
        if self.width == 0 {
            0
        } else {
            (1u32 << self.width) - 1
        }
    }

    /// Remainder register after shifting `bits` through the generator.
    pub fn checksum(&self, bits: &[u8]) -> u32 {
        if self.width == 0 {
            return 0;
        }
        let mask = self.mask();
        let top = self.width - 1;
        let mut reg = self.init & mask;
        for &b in bits {
            let feedback = ((reg >> top) & 1) ^ (b as u32 & 1);
            reg = (reg << 1) & mask;
            if feedback == 1 {
                reg ^= self.poly;
            }
        }
        reg
    }

    /// `message || CRC(message)`.
    pub fn append(&self, message: &[u8]) -> Vec<u8> {
        let crc = self.checksum(message);
        let mut out = Vec::with_capacity(message.len() + self.width as usize);
        out.extend_from_slice(message);
        out.extend((0..self.width).rev().map(|i| ((crc >> i) & 1) as u8));
        out
    }

    /// Checks the trailing `width` bits against the checksum of the rest.
    pub fn verify(&self, bits: &[u8]) -> bool {
        let w = self.width as usize;
        if bits.len() < w {
            return false;
        }
        let (msg, tail) = bits.split_at(bits.len() - w);
        let crc = self.checksum(msg);
        tail.iter()
            .enumerate()
            .all(|(i, &b)| ((crc >> (w - 1 - i)) & 1) as u8 == b)
    }
}
