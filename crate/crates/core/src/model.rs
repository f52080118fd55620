//! Signal models, scheme configuration and support-recovery metrics.

use std::collections::BTreeSet;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{AsrError, Result};
use crate::rng::{self, domain};

/// Distribution of the non-zero amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Model {
    /// Every non-zero entry equals `sqrt(n/K)`.
    Sm1,
    /// Non-zero entries are i.i.d. `N(0, n/K)`.
    Sm2,
}

impl Model {
    pub fn as_str(self) -> &'static str {
        match self {
            Model::Sm1 => "sm1",
            Model::Sm2 => "sm2",
        }
    }
}

impl std::str::FromStr for Model {
    type Err = AsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sm1" => Ok(Model::Sm1),
            "sm2" => Ok(Model::Sm2),
            other => Err(AsrError::Parse(format!("unknown model '{other}'"))),
        }
    }
}

/// Every parameter of the measurement scheme and its decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    /// Signal dimension, a power of two.
    pub n: usize,
    /// Sparsity.
    pub k: usize,
    /// Linear SNR; noise variance per measurement is `1/snr`. May be infinite.
    pub snr: f64,
    /// Bits of the index that select the spreading sequence.
    pub b_f: u32,
    /// Spreading length.
    pub l: usize,
    /// Polar codeword length, a power of two.
    pub n_c: usize,
    /// CRC width in bits.
    pub r_crc: u32,
    /// Activity threshold. SM1: `T > (1 + gamma) n_c`; SM2: `llr > gamma`.
    pub gamma: f64,
    pub list_size: usize,
    /// Largest accepted Hamming distance between a decoded codeword and the
    /// hard decisions of its matched-filter outputs.
    pub d_max: usize,
    pub max_rounds: usize,
    pub master_seed: u64,
    pub model: Model,
    /// Linear design SNR for the polar construction; `None` uses the
    /// equivalent single-round decoding SNR.
    pub design_snr: Option<f64>,
    /// Gauss-Hermite nodes for the SM2 activity likelihood.
    pub quadrature_nodes: usize,
}

impl SystemConfig {
    /// Defaults for dimension `n` and sparsity `k`: `J` is the smallest power
    /// of two with `J >= 2K`, `n_c = 64`, `L = K`, 20 dB.
    pub fn new(n: usize, k: usize) -> Self {
        let mut b_f = 1;
        while (1usize << b_f) < 2 * k.max(1) {
            b_f += 1;
        }
        let n_c = 64;
        SystemConfig {
            n,
            k,
            snr: 100.0,
            b_f,
            l: k.max(1),
            n_c,
            r_crc: 8,
            gamma: 0.3,
            list_size: 8,
            d_max: default_d_max(n_c),
            max_rounds: 50,
            master_seed: 0,
            model: Model::Sm1,
            design_snr: None,
            quadrature_nodes: 63,
        }
    }

    /// `B = log2 n`.
    pub fn b(&self) -> u32 {
        self.n.trailing_zeros()
    }

    pub fn b_s(&self) -> u32 {
        self.b() - self.b_f
    }

    /// Number of spreading sequences per symbol, `J = 2^B_f`.
    pub fn j(&self) -> usize {
        1usize << self.b_f
    }

    /// Total number of measurements `m = L n_c`.
    pub fn m(&self) -> usize {
        self.l * self.n_c
    }

    pub fn rho(&self) -> f64 {
        self.m() as f64 / self.n as f64
    }

    pub fn beta(&self) -> f64 {
        self.l as f64 / self.k as f64
    }

    pub fn alpha(&self) -> f64 {
        self.j() as f64 / self.k as f64
    }

    pub fn kappa(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    /// Polar code dimension `B_s + r_crc`.
    pub fn k_c(&self) -> usize {
        (self.b_s() + self.r_crc) as usize
    }

    /// SM1 amplitude, and the SM2 amplitude standard deviation.
    pub fn amplitude(&self) -> f64 {
        (self.n as f64 / self.k as f64).sqrt()
    }

    pub fn noise_variance(&self) -> f64 {
        1.0 / self.snr
    }

    /// Effective per-symbol noise variance seen by an active sequence after
    /// `s` cancellations: `(K-1-s)/K + 1/snr`.
    pub fn active_variance(&self, s: usize) -> f64 {
        let k = self.k as f64;
        ((k - 1.0 - s as f64).max(0.0)) / k + self.noise_variance()
    }

    /// Effective per-symbol variance of an inactive sequence: `(K-s)/K + 1/snr`.
    pub fn inactive_variance(&self, s: usize) -> f64 {
        let k = self.k as f64;
        ((k - s as f64).max(0.0)) / k + self.noise_variance()
    }

    /// Equivalent decoding SNR of the first round, `beta / ((K-1)/K + 1/snr)`.
    pub fn equivalent_snr(&self) -> f64 {
        self.beta() / self.active_variance(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AsrError::InvalidConfig(msg));
        if self.n < 2 || !self.n.is_power_of_two() {
            return bad(format!("n = {} must be a power of two >= 2", self.n));
        }
        if self.k == 0 || self.k > self.n {
            return bad(format!("K = {} must lie in [1, n]", self.k));
        }
        if self.b_f == 0 || self.b_f > self.b() {
            return bad(format!("B_f = {} must lie in [1, B = {}]", self.b_f, self.b()));
        }
        if self.j() <= self.k {
            return bad(format!("J = {} must exceed K = {} (alpha > 1)", self.j(), self.k));
        }
        if self.l == 0 {
            return bad("L must be positive".into());
        }
        if self.n_c < 2 || !self.n_c.is_power_of_two() {
            return bad(format!("n_c = {} must be a power of two >= 2", self.n_c));
        }
        if self.k_c() == 0 || self.k_c() > self.n_c {
            return bad(format!("k_c = B_s + r_crc = {} must lie in [1, n_c = {}]", self.k_c(), self.n_c));
        }
        if self.r_crc > 16 {
            return bad(format!("r_crc = {} exceeds 16", self.r_crc));
        }
        if !(self.snr > 0.0) {
            return bad(format!("snr = {} must be positive", self.snr));
        }
        if self.list_size == 0 {
            return bad("list_size must be positive".into());
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be positive".into());
        }
        if self.quadrature_nodes < 2 {
            return bad("quadrature_nodes must be at least 2".into());
        }
        Ok(())
    }
}

/// Default hard-decision distance budget, `ceil(0.2 n_c)`.
pub fn default_d_max(n_c: usize) -> usize {
    (n_c as f64 * 0.2).ceil() as usize
}

/// A drawn K-sparse vector; `support` is sorted and `values[i]` belongs to
/// `support[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseInstance {
    pub support: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseInstance {
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.support.iter().copied().zip(self.values.iter().copied())
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Draws a K-sparse instance. The support is uniform without replacement.
pub fn sample_sparse(config: &SystemConfig, trial_seed: u64) -> Result<SparseInstance> {
    if config.k > config.n {
        return Err(AsrError::InvalidConfig(format!(
            "K = {} exceeds n = {}",
            config.k, config.n
        )));
    }
    if config.k == 0 {
        return Ok(SparseInstance {
            support: Vec::new(),
            values: Vec::new(),
        });
    }
    let mut rng = rng::stream(trial_seed, domain::SUPPORT, 0);
    let mut support = index::sample(&mut rng, config.n, config.k).into_vec();
    support.sort_unstable();
    let amp = config.amplitude();
    let values = match config.model {
        Model::Sm1 => vec![amp; config.k],
        Model::Sm2 => (0..config.k)
            .map(|_| loop {
                let g: f64 = StandardNormal.sample(&mut rng);
                if g != 0.0 {
                    break g * amp;
                }
            })
            .collect(),
    };
    Ok(SparseInstance { support, values })
}

/// Miss-detection, false-alarm and mismatch fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub e_m: f64,
    pub e_f: f64,
    pub d: f64,
}

/// `e_m = |true \ est| / |true|`, `e_f = |est \ true| / |est|`.
///
/// An empty estimate reports `e_f = 0` and `e_m = 1`; an empty truth
/// reports `e_m = 0`.
pub fn compute_metrics(true_support: &[usize], estimated_support: &[usize]) -> Metrics {
    let truth: BTreeSet<usize> = true_support.iter().copied().collect();
    let est: BTreeSet<usize> = estimated_support.iter().copied().collect();
    let e_m = if truth.is_empty() {
        0.0
    } else if est.is_empty() {
        1.0
    } else {
        truth.difference(&est).count() as f64 / truth.len() as f64
    };
    let e_f = if est.is_empty() {
        0.0
    } else {
        est.difference(&truth).count() as f64 / est.len() as f64
    };
    Metrics {
        e_m,
        e_f,
        d: e_m.max(e_f),
    }
}

/// Outcome of one recovery run scored against the true support.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub estimated_support: Vec<usize>,
    pub e_m: f64,
    pub e_f: f64,
    pub d: f64,
    pub rounds_used: usize,
    pub decodes_per_round: Vec<usize>,
    /// Indices output without a CRC-validated decode.
    pub low_confidence: Vec<usize>,
}

impl RecoveryReport {
    pub fn score(
        true_support: &[usize],
        estimated_support: Vec<usize>,
        rounds_used: usize,
        decodes_per_round: Vec<usize>,
        low_confidence: Vec<usize>,
    ) -> Self {
        let metrics = compute_metrics(true_support, &estimated_support);
        RecoveryReport {
            estimated_support,
            e_m: metrics.e_m,
            e_f: metrics.e_f,
            d: metrics.d,
            rounds_used,
            decodes_per_round,
            low_confidence,
        }
    }
}
