//! The implicit measurement matrix and the noisy observation model.
//!
//! Column `k` of the measurement matrix is the concatenation over symbols
//! `t` of `b_t * a_{t,j}`, where `j` is the spreading index of `k` and `b`
//! the BPSK image of the polar codeword carrying the rest of `k`. Columns are
//! synthesized on demand.

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};

use crate::codebook::{split_index, MessageSplit, SpreadingDictionary};
use crate::error::{AsrError, Result};
use crate::model::{SparseInstance, SystemConfig};
use crate::polar::{build_code, polar_encode, CrcSpec, FrozenPattern, PolarCode};
use crate::rng::{self, domain};

/// Everything needed to synthesize or decode columns for one configuration.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub config: SystemConfig,
    pub dictionary: SpreadingDictionary,
    pub code: PolarCode,
}

impl Codebook {
    pub fn new(config: &SystemConfig) -> Result<Self> {
        config.validate()?;
        let crc = CrcSpec::standard(config.r_crc)?;
        let design_snr = config.design_snr.unwrap_or_else(|| config.equivalent_snr());
        let code = build_code(config.n_c, config.k_c(), design_snr, crc)?;
        Ok(Codebook {
            config: config.clone(),
            dictionary: SpreadingDictionary::from_config(config),
            code,
        })
    }

    pub fn m(&self) -> usize {
        self.config.m()
    }

    pub fn pattern(&self, j: usize) -> FrozenPattern {
        FrozenPattern::new(self.config.master_seed, j, &self.code)
    }

    /// Polar codeword (bits) transmitted by a split index.
    pub fn codeword(&self, split: &MessageSplit) -> Vec<u8> {
        let info = self.code.crc.append(&split.payload_bits(self.config.b_s()));
        polar_encode(&info, &self.code, &self.pattern(split.j))
            .expect("CRC-augmented payload has length k_c")
    }

    /// BPSK symbols `b_t = 1 - 2 c_t` of index `k`.
    pub fn symbols(&self, k: usize) -> Result<(usize, Vec<f64>)> {
        let split = split_index(k, &self.config)?;
        let bpsk = self
            .codeword(&split)
            .iter()
            .map(|&c| if c == 0 { 1.0 } else { -1.0 })
            .collect();
        Ok((split.j, bpsk))
    }

    /// `y += scale * column(k)`.
    pub fn add_column(&self, k: usize, scale: f64, y: &mut [f64]) -> Result<()> {
        if y.len() != self.m() {
            return Err(AsrError::LengthMismatch {
                expected: self.m(),
                actual: y.len(),
            });
        }
        let (j, symbols) = self.symbols(k)?;
        self.add_symbols(j, &symbols, scale, y);
        Ok(())
    }

    /// `y += scale * [b_1 a_{1,j}; ...; b_{n_c} a_{n_c,j}]` for given symbols.
    pub fn add_symbols(&self, j: usize, symbols: &[f64], scale: f64, y: &mut [f64]) {
        let l = self.config.l;
        for (t, (segment, &b)) in y.chunks_mut(l).zip(symbols).enumerate() {
            self.dictionary.add_scaled(t, j, scale * b, segment);
        }
    }

    pub fn column(&self, k: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.m()];
        self.add_column(k, 1.0, &mut out)?;
        Ok(out)
    }

    /// Noiseless `Phi x`.
    pub fn apply(&self, instance: &SparseInstance) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.m()];
        for (k, v) in instance.entries() {
            self.add_column(k, v, &mut y)?;
        }
        Ok(y)
    }

    /// `y = Phi x + w` with `w ~ N(0, 1/snr)` drawn from a stream independent
    /// of the codebook seed.
    pub fn measure(&self, instance: &SparseInstance, trial_seed: u64) -> Result<Measurement> {
        let mut y = self.apply(instance)?;
        let sigma = self.config.noise_variance().sqrt();
        if sigma > 0.0 {
            let mut noise = rng::stream(trial_seed, domain::NOISE, 0);
            for v in y.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut noise);
                *v += sigma * g;
            }
        }
        Ok(Measurement {
            y,
            config: self.config.clone(),
        })
    }
}

/// An observation `y` of length `L n_c` with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y: Vec<f64>,
    pub config: SystemConfig,
}

/// Writes `y` as a little-endian `u64` length followed by little-endian `f64`s.
pub fn write_samples<W: Write>(mut w: W, y: &[f64]) -> std::io::Result<()> {
    w.write_all(&(y.len() as u64).to_le_bytes())?;
    for v in y {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_samples<R: Read>(mut r: R) -> Result<Vec<f64>> {
    let io = |e: std::io::Error| AsrError::Parse(format!("sample dump: {e}"));
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != len * 8 {
        return Err(AsrError::LengthMismatch {
            expected: len * 8,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
