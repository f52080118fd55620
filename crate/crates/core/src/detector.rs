//! Matched filtering of the residual and the per-sequence activity tests.

use crate::codebook::SpreadingDictionary;
use crate::error::{AsrError, Result};
use crate::model::{Model, SystemConfig};
use crate::quadrature::{log_sum_exp, HermiteRule};

const VARIANCE_FLOOR: f64 = 1e-12;

/// The residual viewed as an `L x n_c` array; column `t` is the segment
/// belonging to coded symbol `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSketch {
    data: Vec<f64>,
    pub l: usize,
    pub n_c: usize,
    /// Number of indices already cancelled from the residual.
    pub s: usize,
}

impl ResidualSketch {
    pub fn column(&self, t: usize) -> &[f64] {
        &self.data[t * self.l..(t + 1) * self.l]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }
}

pub fn reshape(residual: &[f64], l: usize, n_c: usize, s: usize) -> Result<ResidualSketch> {
    if residual.len() != l * n_c {
        return Err(AsrError::LengthMismatch {
            expected: l * n_c,
            actual: residual.len(),
        });
    }
    Ok(ResidualSketch {
        data: residual.to_vec(),
        l,
        n_c,
        s,
    })
}

/// `Z_t = <a_{t,j}, ybar_t> sqrt(n / L)` for every symbol `t`.
pub fn matched_filter(sketch: &ResidualSketch, dict: &SpreadingDictionary, j: usize) -> Result<Vec<f64>> {
    if j >= dict.j {
        return Err(AsrError::Domain(format!("sequence {j} outside [0, {})", dict.j)));
    }
    if sketch.l != dict.l || sketch.n_c != dict.n_c {
        return Err(AsrError::InvalidConfig("sketch and dictionary shapes differ".into()));
    }
    let gain = (dict.n as f64 / dict.l as f64).sqrt();
    Ok((0..sketch.n_c)
        .map(|t| dict.correlate(t, j, sketch.column(t)) * gain)
        .collect())
}

/// Matched-filter outputs for all sequences; row `j` holds `Z_{1..n_c, j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfStatistics {
    z: Vec<f64>,
    pub j: usize,
    pub n_c: usize,
}

impl MfStatistics {
    pub fn compute(sketch: &ResidualSketch, dict: &SpreadingDictionary) -> Result<Self> {
        let mut z = Vec::with_capacity(dict.j * sketch.n_c);
        for j in 0..dict.j {
            z.extend(matched_filter(sketch, dict, j)?);
        }
        Ok(MfStatistics {
            z,
            j: dict.j,
            n_c: sketch.n_c,
        })
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.z[j * self.n_c..(j + 1) * self.n_c]
    }
}

/// Energy statistic `T = C(s)^2 sum_t Z_t^2`, `C(s)^2 = 1/((K-1-s)/K + 1/snr)`;
/// active iff `T > (1 + gamma) n_c`.
pub fn activity_test_sm1(z: &[f64], config: &SystemConfig, s: usize) -> (bool, f64) {
    let c2 = 1.0 / config.active_variance(s).max(VARIANCE_FLOOR);
    let t = c2 * z.iter().map(|v| v * v).sum::<f64>();
    (t > (1.0 + config.gamma) * z.len() as f64, t)
}

/// Per-symbol variances of matched-filter outputs after `s` cancellations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterferenceLevel {
    pub s: usize,
    /// Sequence carries a codeword: everyone else interferes.
    pub active: f64,
    /// Sequence is silent: every remaining index interferes.
    pub inactive: f64,
}

impl InterferenceLevel {
    /// Remaining indices assumed to carry average power `1/K` each.
    pub fn model(config: &SystemConfig, s: usize) -> Self {
        InterferenceLevel {
            s,
            active: config.active_variance(s).max(VARIANCE_FLOOR),
            inactive: config.inactive_variance(s).max(VARIANCE_FLOOR),
        }
    }

    /// Interference measured from the residual power `||r||^2 / m`. After
    /// cancelling the strongest SM2 indices the rest are far weaker than
    /// average, so the model level would overstate the interference.
    pub fn from_residual(config: &SystemConfig, s: usize, residual: &[f64]) -> Self {
        let power = residual.iter().map(|v| v * v).sum::<f64>() / residual.len().max(1) as f64;
        let noise = config.noise_variance();
        let interference = (power - noise).max(0.0);
        let remaining = config.k.saturating_sub(s).max(1) as f64;
        InterferenceLevel {
            s,
            active: (interference * (remaining - 1.0) / remaining + noise).max(VARIANCE_FLOOR),
            inactive: (interference + noise).max(VARIANCE_FLOOR),
        }
    }

    /// The level the decoder uses for `config.model`.
    pub fn for_model(config: &SystemConfig, s: usize, residual: &[f64]) -> Self {
        match config.model {
            Model::Sm1 => Self::model(config, s),
            Model::Sm2 => Self::from_residual(config, s, residual),
        }
    }
}

/// Posterior log-odds of activity under the Gaussian-amplitude model,
/// for a fixed configuration and interference level.
///
/// The integral over the amplitude uses Gauss-Hermite nodes centred on the
/// peak of the integrand and scaled by its curvature. Once interference is
/// low the integrand is far narrower than the spacing of a fixed rule.
#[derive(Debug, Clone)]
pub struct Sm2Likelihood {
    beta: f64,
    var_active: f64,
    var_inactive: f64,
    prior_log_odds: f64,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl Sm2Likelihood {
    pub fn new(config: &SystemConfig, s: usize) -> Self {
        Self::at_level(config, &InterferenceLevel::model(config, s))
    }

    pub fn at_level(config: &SystemConfig, level: &InterferenceLevel) -> Self {
        let rule = HermiteRule::new(config.quadrature_nodes);
        let remaining = config.k.saturating_sub(level.s).max(1) as f64;
        let p_active = -(remaining * (-1.0 / config.j() as f64).ln_1p()).exp_m1();
        Sm2Likelihood {
            beta: config.beta(),
            var_active: level.active,
            var_inactive: level.inactive,
            prior_log_odds: p_active.ln() - (-p_active).ln_1p(),
            nodes: rule.nodes,
            log_weights: rule.log_weights,
        }
    }

    /// Log of `N(x; 0, 1) prod_t cosh-mixture(Z_t | x)` up to the factor
    /// shared with the Gaussian ratio, and its first two derivatives in `x`.
    fn log_integrand(&self, z: &[f64], x: f64) -> (f64, f64, f64) {
        let rb = self.beta.sqrt();
        let v1 = self.var_active;
        let n_c = z.len() as f64;
        let (mut f, mut d1, mut d2) = (
            -0.5 * x * x - n_c * self.beta * x * x / (2.0 * v1),
            -x - n_c * self.beta * x / v1,
            -1.0 - n_c * self.beta / v1,
        );
        for &zt in z {
            let c = rb * zt / v1;
            let th = (c * x).tanh();
            f += log_cosh(c * x);
            d1 += c * th;
            d2 += c * c * (1.0 - th * th);
        }
        (f - 0.5 * (2.0 * std::f64::consts::PI).ln(), d1, d2)
    }

    /// Peak location `x* >= 0` and width of the integrand.
    fn peak(&self, z: &[f64]) -> (f64, f64) {
        let (_, _, d2_0) = self.log_integrand(z, 0.0);
        let mut x_star = 0.0;
        if d2_0 > 0.0 {
            // the origin is a local minimum: bracket the positive root of h'
            let bound: f64 = z.iter().map(|zt| (self.beta.sqrt() * zt / self.var_active).abs()).sum::<f64>()
                / (1.0 + z.len() as f64 * self.beta / self.var_active);
            let (mut lo, mut hi) = (0.0f64, bound.max(1e-12) * 1.01);
            // safeguarded Newton from the moment estimate
            let energy = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
            let mut x = ((energy - self.var_active).max(0.0) / self.beta).sqrt().clamp(lo, hi);
            if x <= lo || x >= hi {
                x = 0.5 * (lo + hi);
            }
            for _ in 0..100 {
                let (_, d1, d2) = self.log_integrand(z, x);
                if d1 > 0.0 {
                    lo = x;
                } else {
                    hi = x;
                }
                let newton = if d2 < 0.0 { x - d1 / d2 } else { f64::NAN };
                let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
                if (next - x).abs() <= 1e-12 * x.abs().max(1e-300) || hi - lo <= 1e-13 * hi {
                    x = next;
                    break;
                }
                x = next;
            }
            x_star = x;
        }
        let curvature = -self.log_integrand(z, x_star).2;
        let width = if curvature > 0.0 { 1.0 / curvature.sqrt() } else { 1.0 };
        (x_star, width)
    }

    /// Log of `E_{x ~ N(0,1)}[prod_t (N(Z_t; mu, v1) + N(Z_t; -mu, v1)) / 2]`
    /// relative to `prod_t N(Z_t; 0, v1)`, with `mu = sqrt(beta) x`.
    fn log_mixture(&self, z: &[f64]) -> f64 {
        let (mut x_star, mut width) = self.peak(z);
        if x_star < 3.0 * width {
            // overlapping bumps look like one broad bump: match its variance
            width = (x_star * x_star + width * width).sqrt();
            x_star = 0.0;
        }
        // proposal: even mixture of N(+-x*, width^2), the integrand is even too
        let ln_norm = (width * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let log_q = |x: f64| {
            let a = -(x - x_star).powi(2) / (2.0 * width * width);
            let b = -(x + x_star).powi(2) / (2.0 * width * width);
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln() - std::f64::consts::LN_2 - ln_norm
        };
        log_sum_exp(self.nodes.iter().zip(&self.log_weights).map(|(&t, &lw)| {
            let x = x_star + width * t;
            lw + self.log_integrand(z, x).0 - log_q(x)
        }))
    }

    /// `log Pr(S) f(Z|S) / (Pr(not S) prod_t f(Z_t|not S))`.
    pub fn llr(&self, z: &[f64]) -> f64 {
        let n_c = z.len() as f64;
        let energy: f64 = z.iter().map(|v| v * v).sum();
        let (v1, v0) = (self.var_active, self.var_inactive);
        let gaussian_ratio = 0.5 * n_c * (v0 / v1).ln() - 0.5 * energy * (1.0 / v1 - 1.0 / v0);
        self.prior_log_odds + gaussian_ratio + self.log_mixture(z)
    }
}

#[inline]
fn log_cosh(v: f64) -> f64 {
    let a = v.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

pub fn activity_llr_sm2(z: &[f64], config: &SystemConfig, s: usize) -> f64 {
    Sm2Likelihood::new(config, s).llr(z)
}

/// Result of one detection pass over all `J` sequences.
#[derive(Debug, Clone)]
pub struct Detection {
    /// Sequences passing the test, highest score first.
    pub active: Vec<usize>,
    /// Test score of every sequence (`T` for SM1, the LLR for SM2).
    pub scores: Vec<f64>,
    pub stats: MfStatistics,
}

impl Detection {
    /// All sequences ordered by decreasing score (ties: lower index first).
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order
    }
}

pub fn detect_active(
    sketch: &ResidualSketch,
    dict: &SpreadingDictionary,
    config: &SystemConfig,
    s: usize,
) -> Result<Detection> {
    detect_active_at(sketch, dict, config, &InterferenceLevel::model(config, s))
}

/// As [`detect_active`], with the SM2 likelihood evaluated at `level`.
pub fn detect_active_at(
    sketch: &ResidualSketch,
    dict: &SpreadingDictionary,
    config: &SystemConfig,
    level: &InterferenceLevel,
) -> Result<Detection> {
    let s = level.s;
    let stats = MfStatistics::compute(sketch, dict)?;
    let (scores, flags): (Vec<f64>, Vec<bool>) = match config.model {
        Model::Sm1 => (0..stats.j)
            .map(|j| {
                let (active, t) = activity_test_sm1(stats.row(j), config, s);
                (t, active)
            })
            .unzip(),
        Model::Sm2 => {
            let lik = Sm2Likelihood::at_level(config, level);
            (0..stats.j)
                .map(|j| {
                    let llr = lik.llr(stats.row(j));
                    (llr, llr > config.gamma)
                })
                .unzip()
        }
    };
    let mut active: Vec<usize> = (0..stats.j).filter(|&j| flags[j]).collect();
    active.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(Detection {
        active,
        scores,
        stats,
    })
}
