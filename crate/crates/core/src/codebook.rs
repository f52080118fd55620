//! Spreading dictionaries and the index split.
//!
//! Entry `(t, row, j)` of the per-symbol dictionary `A_t` is bit `row % 64`
//! of `prf(seed, DICTIONARY, t, j, row / 64)`; a set bit means `-1/sqrt(n)`.
//! Nothing is stored, so dictionaries for any `n` cost O(1) memory.

use crate::error::{AsrError, Result};
use crate::model::SystemConfig;
use crate::rng::{domain, prf};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpreadingDictionary {
    pub master_seed: u64,
    /// Spreading length.
    pub l: usize,
    /// Sequences per symbol.
    pub j: usize,
    pub n: usize,
    /// Number of per-symbol dictionaries.
    pub n_c: usize,
    scale: f64,
}

impl SpreadingDictionary {
    pub fn new(master_seed: u64, l: usize, j: usize, n: usize, n_c: usize) -> Self {
        SpreadingDictionary {
            master_seed,
            l,
            j,
            n,
            n_c,
            scale: 1.0 / (n as f64).sqrt(),
        }
    }

    pub fn from_config(config: &SystemConfig) -> Self {
        Self::new(config.master_seed, config.l, config.j(), config.n, config.n_c)
    }

    /// Magnitude of every entry, `1/sqrt(n)`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn check(&self, t: usize, j: usize) -> Result<()> {
        if t >= self.n_c {
            return Err(AsrError::Domain(format!("symbol {t} outside [0, {})", self.n_c)));
        }
        if j >= self.j {
            return Err(AsrError::Domain(format!("sequence {j} outside [0, {})", self.j)));
        }
        Ok(())
    }

    #[inline]
    fn word(&self, t: usize, j: usize, w: usize) -> u64 {
        prf(self.master_seed, domain::DICTIONARY, t as u64, j as u64, w as u64)
    }

    /// Single entry of `A_t`, addressable without generating its neighbours.
    pub fn entry(&self, t: usize, row: usize, j: usize) -> Result<f64> {
        self.check(t, j)?;
        if row >= self.l {
            return Err(AsrError::Domain(format!("row {row} outside [0, {})", self.l)));
        }
        let bit = (self.word(t, j, row / 64) >> (row % 64)) & 1;
        Ok(if bit == 1 { -self.scale } else { self.scale })
    }

    /// Column `j` of `A_t`.
    pub fn sequence(&self, t: usize, j: usize) -> Result<Vec<f64>> {
        self.check(t, j)?;
        let mut out = vec![0.0; self.l];
        self.add_scaled(t, j, 1.0, &mut out);
        Ok(out)
    }

    /// `<a_{t,j}, segment>` for a length-`L` segment. Indices are not checked.
    #[inline]
    pub fn correlate(&self, t: usize, j: usize, segment: &[f64]) -> f64 {
        debug_assert_eq!(segment.len(), self.l);
        let mut acc = 0.0;
        for (w, chunk) in segment.chunks(64).enumerate() {
            let bits = self.word(t, j, w);
            for (r, &y) in chunk.iter().enumerate() {
                let flip = ((bits >> r) & 1) << 63;
                acc += f64::from_bits(y.to_bits() ^ flip);
            }
        }
        acc * self.scale
    }

    /// `out += scale * a_{t,j}`. Indices are not checked.
    #[inline]
    pub fn add_scaled(&self, t: usize, j: usize, scale: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.l);
        let v = scale * self.scale;
        for (w, chunk) in out.chunks_mut(64).enumerate() {
            let bits = self.word(t, j, w);
            for (r, o) in chunk.iter_mut().enumerate() {
                let flip = ((bits >> r) & 1) << 63;
                *o += f64::from_bits(v.to_bits() ^ flip);
            }
        }
    }
}

/// An index split into its spreading index and its polar payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MessageSplit {
    /// The `B_f` most significant bits.
    pub j: usize,
    /// The remaining `B_s` bits.
    pub payload: u64,
}

impl MessageSplit {
    pub fn join(&self, b_s: u32) -> usize {
        (self.j << b_s) | self.payload as usize
    }

    /// Payload bits, most significant first.
    pub fn payload_bits(&self, b_s: u32) -> Vec<u8> {
        (0..b_s).rev().map(|i| ((self.payload >> i) & 1) as u8).collect()
    }
}

/// Splits `k` into its `B_f` most significant bits and the rest.
pub fn split_index(k: usize, config: &SystemConfig) -> Result<MessageSplit> {
    split_index_bits(k, config.b(), config.b_f)
}

pub fn split_index_bits(k: usize, b: u32, b_f: u32) -> Result<MessageSplit> {
    if b_f > b || b >= usize::BITS {
        return Err(AsrError::Domain(format!("B_f = {b_f} with B = {b}")));
    }
    if k >= 1usize << b {
        return Err(AsrError::Domain(format!("index {k} outside [0, 2^{b})")));
    }
    let b_s = b - b_f;
    Ok(MessageSplit {
        j: k >> b_s,
        payload: (k & ((1usize << b_s) - 1)) as u64,
    })
}

/// Inverse of [`MessageSplit::payload_bits`].
pub fn bits_to_payload(bits: &[u8]) -> u64 {
    bits.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64)
}
