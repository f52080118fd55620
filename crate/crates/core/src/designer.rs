//! Error analysis of a single detection round and the parameter search that
//! minimizes the number of measurements under a per-index error target.

use rayon::prelude::*;
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{AsrError, Result};
use crate::model::SystemConfig;
use crate::quadrature::HermiteRule;

/// Probability that a given bin holds two or more balls when `K` balls go
/// into `alpha K` bins, in the large-K limit.
pub fn pr_e1(alpha: f64) -> f64 {
    assert!(alpha > 0.0, "alpha must be positive");
    let e = (-1.0 / alpha).exp();
    // 1 - e - e/alpha loses everything to cancellation for large alpha
    if alpha > 1e3 {
        let x = 1.0 / alpha;
        return x * x / 2.0 - x * x * x / 3.0 + x.powi(4) / 8.0;
    }
    (1.0 - e - e / alpha).max(0.0)
}

const SERIES_TOL: f64 = 1e-14;
const SERIES_MAX_TERMS: usize = 200_000;

fn ln_poisson(j: usize, mean: f64) -> f64 {
    j as f64 * mean.ln() - mean - ln_gamma(j as f64 + 1.0)
}

/// Poisson mixture `sum_j Pois(j; lambda/2) g(j)` summed outward from the
/// mode until the remaining Poisson mass is negligible.
fn poisson_mixture(lambda: f64, g: impl Fn(usize) -> f64) -> Result<f64> {
    let mean = lambda / 2.0;
    let mode = mean.floor() as usize;
    let mut total = 0.0;
    let mut mass = 0.0;
    let mut terms = 0;
    let mut j = mode;
    loop {
        let w = ln_poisson(j, mean).exp();
        total += w * g(j);
        mass += w;
        terms += 1;
        if w < SERIES_TOL && j > mean as usize {
            break;
        }
        j += 1;
        if terms > SERIES_MAX_TERMS {
            return Err(AsrError::Accuracy(format!(
                "chi-square series did not converge: lambda={lambda}, terms={terms}"
            )));
        }
    }
    let mut j = mode;
    while j > 0 {
        j -= 1;
        let w = ln_poisson(j, mean).exp();
        total += w * g(j);
        mass += w;
        if w < SERIES_TOL {
            break;
        }
    }
    if (1.0 - mass).abs() > 1e-9 {
        return Err(AsrError::Accuracy(format!(
            "chi-square series lost mass: lambda={lambda}, captured={mass}"
        )));
    }
    Ok(total)
}

fn check_chi2_args(x: f64, lambda: f64, df: f64) -> Result<()> {
    if !(x >= 0.0 && lambda >= 0.0 && df >= 1.0) || !lambda.is_finite() {
        return Err(AsrError::Domain(format!(
            "chi-square arguments out of range: x={x}, lambda={lambda}, df={df}"
        )));
    }
    Ok(())
}

/// Noncentral chi-square CDF with `df` degrees of freedom and
/// noncentrality `lambda`.
pub fn chi2_cdf(x: f64, lambda: f64, df: f64) -> Result<f64> {
    check_chi2_args(x, lambda, df)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    if lambda == 0.0 {
        return Ok(gamma_lr(df / 2.0, x / 2.0));
    }
    poisson_mixture(lambda, |j| gamma_lr(df / 2.0 + j as f64, x / 2.0)).map(|p| p.clamp(0.0, 1.0))
}

/// Upper tail `1 - chi2_cdf`, computed without cancellation.
pub fn chi2_sf(x: f64, lambda: f64, df: f64) -> Result<f64> {
    check_chi2_args(x, lambda, df)?;
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    if lambda == 0.0 {
        return Ok(gamma_ur(df / 2.0, x / 2.0));
    }
    poisson_mixture(lambda, |j| gamma_ur(df / 2.0 + j as f64, x / 2.0)).map(|p| p.clamp(0.0, 1.0))
}

/// Noncentrality of the activity statistic of an active sequence after `s`
/// cancellations.
pub fn activity_noncentrality(n_c: usize, l: usize, k: usize, snr: f64, s: usize) -> f64 {
    let k = k as f64;
    n_c as f64 * l as f64 / ((k - 1.0 - s as f64).max(0.0) + k / snr)
}

/// Probability that an active sequence falls below the activity threshold.
pub fn pr_e2(gamma: f64, n_c: usize, l: usize, k: usize, snr: f64, s: usize) -> Result<f64> {
    if gamma <= -1.0 {
        return Ok(0.0);
    }
    if gamma.is_infinite() {
        return Ok(1.0);
    }
    let lambda = activity_noncentrality(n_c, l, k, snr, s);
    chi2_cdf(n_c as f64 * (1.0 + gamma), lambda, n_c as f64)
}

/// Capacity (bits) and dispersion (bits^2) of the binary-input AWGN channel
/// with unit noise and symbol energy `snr`.
pub fn biawgn_capacity_dispersion(snr: f64) -> (f64, f64) {
    thread_local! {
        static RULE: HermiteRule = HermiteRule::new(151);
    }
    if snr <= 0.0 {
        return (0.0, 0.0);
    }
    RULE.with(|rule| {
        // information density given +1 sent: 1 - log2(1 + exp(-llr))
        let density = |x: f64| {
            let llr = 2.0 * snr + 2.0 * snr.sqrt() * x;
            1.0 - softplus(-llr) / std::f64::consts::LN_2
        };
        let (mut m1, mut m2) = (0.0, 0.0);
        for (x, lw) in rule.nodes.iter().zip(&rule.log_weights) {
            let w = lw.exp();
            let i = density(*x);
            m1 += w * i;
            m2 += w * i * i;
        }
        (m1, (m2 - m1 * m1).max(0.0))
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Gaussian tail `Q(x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Normal approximation of the block error rate of a `(n_c, k_c)` code on
/// the binary-input AWGN channel at `snr_eq`.
pub fn fbl_error(k_c: usize, n_c: usize, snr_eq: f64) -> f64 {
    let (c, v) = biawgn_capacity_dispersion(snr_eq);
    let n = n_c as f64;
    let margin = n * c - k_c as f64 + 0.5 * n.log2();
    if v <= 0.0 {
        return if margin > 0.0 { 0.0 } else { 1.0 };
    }
    q_function(margin / (n * v).sqrt())
}

/// Probability that a silent sequence passes the activity test and a
/// random list candidate passes the CRC.
pub fn pr_false(gamma: f64, n_c: usize, r_crc: usize) -> Result<f64> {
    if gamma.is_infinite() {
        return Ok(0.0);
    }
    let exceed = chi2_sf(n_c as f64 * (1.0 + gamma).max(0.0), 0.0, n_c as f64)?;
    Ok(exceed * 0.5f64.powi(r_crc as i32))
}

/// Target and search grids for [`design`].
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBudget {
    pub epsilon: f64,
    pub n: usize,
    pub k: usize,
    pub snr: f64,
    /// Candidate `L/K` values; each becomes `L = ceil(beta K)`.
    pub beta: Vec<f64>,
    pub n_c: Vec<usize>,
    pub r_crc: Vec<usize>,
    pub gamma: Vec<f64>,
    pub b_f: Vec<u32>,
}

impl DesignBudget {
    /// Default grids: `n_c` in {32..256}, `beta` in [0.5, 40] by 0.5,
    /// `r_crc` in 4..=16, `gamma` in [0, 4] by 0.05, and every `B_f` with
    /// `2^B_f >= 2K` that leaves a non-negative payload.
    pub fn new(epsilon: f64, n: usize, k: usize, snr: f64) -> Self {
        let b = if n > 1 { n.next_power_of_two().trailing_zeros() } else { 0 };
        let b_f = (0..=b).filter(|&bf| (1usize << bf) >= 2 * k).collect();
        DesignBudget {
            epsilon,
            n,
            k,
            snr,
            beta: (1..=80).map(|i| 0.5 * i as f64).collect(),
            n_c: vec![32, 64, 128, 256],
            r_crc: (4..=16).collect(),
            gamma: (0..=80).map(|i| 0.05 * i as f64).collect(),
            b_f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) && self.epsilon != 1.0 {
            return Err(AsrError::InvalidConfig(format!("epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        if !self.n.is_power_of_two() || self.k < 2 || self.k > self.n {
            return Err(AsrError::InvalidConfig(format!("need n a power of two and 2 <= K <= n, got n={}, K={}", self.n, self.k)));
        }
        if !(self.snr > 0.0) {
            return Err(AsrError::InvalidConfig(format!("snr must be positive, got {}", self.snr)));
        }
        if self.beta.is_empty() || self.n_c.is_empty() || self.r_crc.is_empty() || self.gamma.is_empty() || self.b_f.is_empty() {
            return Err(AsrError::InvalidConfig("design grids must be non-empty".into()));
        }
        if self.n_c.iter().any(|&c| !c.is_power_of_two() || c < 2) {
            return Err(AsrError::InvalidConfig("n_c grid must hold powers of two".into()));
        }
        let b = self.n.trailing_zeros();
        if self.b_f.iter().any(|&bf| bf > b) {
            return Err(AsrError::InvalidConfig("B_f grid exceeds log2 n".into()));
        }
        Ok(())
    }

    fn bits(&self) -> u32 {
        self.n.trailing_zeros()
    }
}

/// The chosen operating point and its predicted error terms.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignResult {
    pub beta: f64,
    pub l: usize,
    pub n_c: usize,
    pub r_crc: usize,
    pub gamma: f64,
    pub b_f: u32,
    pub pr_e1: f64,
    pub pr_e2: f64,
    pub pr_e3: f64,
    pub pr_f: f64,
    /// `Pr(E1) + Pr(E2) + Pr(E3)`.
    pub p_m_bound: f64,
    /// `K (alpha - 1) Pr(F)`.
    pub p_f_bound: f64,
    pub m: usize,
}

impl DesignResult {
    /// A system configuration at this operating point; decoder-side knobs
    /// keep their defaults.
    pub fn to_config(&self, n: usize, k: usize, snr: f64) -> SystemConfig {
        let mut c = SystemConfig::new(n, k);
        c.snr = snr;
        c.b_f = self.b_f;
        c.l = self.l;
        c.n_c = self.n_c;
        c.r_crc = self.r_crc as u32;
        c.gamma = self.gamma;
        c.d_max = crate::model::default_d_max(self.n_c);
        c
    }

    /// The four constraint checks, in order E1, E2, E3, F.
    pub fn constraints(&self, budget: &DesignBudget) -> [bool; 4] {
        let alpha = (1u64 << self.b_f) as f64 / budget.k as f64;
        [
            self.pr_e1 <= budget.epsilon / 3.0,
            self.pr_e2 <= budget.epsilon / 3.0,
            self.pr_e3 <= budget.epsilon / 3.0,
            self.pr_f <= false_alarm_budget(budget.epsilon, budget.k, alpha),
        ]
    }

    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("beta", self.beta.to_string()),
            ("L", self.l.to_string()),
            ("n_c", self.n_c.to_string()),
            ("r_crc", self.r_crc.to_string()),
            ("gamma", format!("{:.2}", self.gamma)),
            ("B_f", self.b_f.to_string()),
            ("pr_e1", format!("{:e}", self.pr_e1)),
            ("pr_e2", format!("{:e}", self.pr_e2)),
            ("pr_e3", format!("{:e}", self.pr_e3)),
            ("pr_f", format!("{:e}", self.pr_f)),
            ("p_m_bound", format!("{:e}", self.p_m_bound)),
            ("p_f_bound", format!("{:e}", self.p_f_bound)),
            ("m", self.m.to_string()),
        ]
    }
}

fn false_alarm_budget(epsilon: f64, k: usize, alpha: f64) -> f64 {
    if alpha <= 1.0 {
        f64::INFINITY
    } else {
        epsilon / (k as f64 * (alpha - 1.0))
    }
}

/// Smallest index in a monotone (false..true) predicate sequence, if any.
fn first_true(len: usize, pred: impl Fn(usize) -> Result<bool>) -> Result<Option<usize>> {
    if len == 0 || !pred(len - 1)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0usize, len - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if pred(mid)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(Some(lo))
}

/// Grid search for the feasible point with the fewest measurements `L n_c`.
/// Ties go to the lexicographically smallest `(n_c, L, r_crc, gamma, B_f)`.
pub fn design(budget: &DesignBudget) -> Result<DesignResult> {
    budget.validate()?;
    let eps3 = budget.epsilon / 3.0;
    let k = budget.k;
    let snr = budget.snr;
    let mut ls: Vec<usize> = budget.beta.iter().map(|b| (b * k as f64).ceil().max(1.0) as usize).collect();
    ls.sort_unstable();
    ls.dedup();

    // Pr(E2) only depends on (n_c, gamma, L) and is decreasing in L.
    let e2_pairs: Vec<(usize, f64)> = budget
        .n_c
        .iter()
        .flat_map(|&n_c| budget.gamma.iter().map(move |&g| (n_c, g)))
        .collect();
    let e2_min_l: Vec<Option<usize>> = e2_pairs
        .par_iter()
        .map(|&(n_c, g)| first_true(ls.len(), |i| Ok(pr_e2(g, n_c, ls[i], k, snr, 0)? <= eps3)))
        .collect::<Result<_>>()?;

    let b = budget.bits();
    let mut best: Option<(usize, usize, usize, usize, f64, u32)> = None; // (m, n_c, L, r, gamma, b_f)
    let mut satisfied = [0usize; 4];
    for &n_c in &budget.n_c {
        for &b_f in &budget.b_f {
            let alpha = (1u64 << b_f) as f64 / k as f64;
            let e1_ok = pr_e1(alpha) <= eps3;
            let f_budget = false_alarm_budget(budget.epsilon, k, alpha);
            for &r in &budget.r_crc {
                let k_c = (b - b_f) as usize + r;
                if k_c == 0 || k_c > n_c {
                    continue;
                }
                // Pr(E3) is decreasing in L through the equivalent SNR.
                let e3_min = first_true(ls.len(), |i| {
                    let snr_eq = (ls[i] as f64 / k as f64) / ((k as f64 - 1.0) / k as f64 + 1.0 / snr);
                    Ok(fbl_error(k_c, n_c, snr_eq) <= eps3)
                })?;
                for (gi, &g) in budget.gamma.iter().enumerate() {
                    let f_ok = pr_false(g, n_c, r)? <= f_budget;
                    let e2_min = e2_min_l[budget.n_c.iter().position(|&c| c == n_c).unwrap() * budget.gamma.len() + gi];
                    satisfied[0] += e1_ok as usize;
                    satisfied[1] += e2_min.is_some() as usize;
                    satisfied[2] += e3_min.is_some() as usize;
                    satisfied[3] += f_ok as usize;
                    if !(e1_ok && f_ok) {
                        continue;
                    }
                    let (Some(i2), Some(i3)) = (e2_min, e3_min) else { continue };
                    let l = ls[i2.max(i3)];
                    let cand = (l * n_c, n_c, l, r, g, b_f);
                    let better = match &best {
                        None => true,
                        Some(cur) => {
                            (cand.0, cand.1, cand.2, cand.3)
                                .cmp(&(cur.0, cur.1, cur.2, cur.3))
                                .then(cand.4.total_cmp(&cur.4))
                                .then(cand.5.cmp(&cur.5))
                                .is_lt()
                        }
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
        }
    }

    let Some((m, n_c, l, r_crc, gamma, b_f)) = best else {
        let names = ["Pr(E1) <= eps/3", "Pr(E2) <= eps/3", "Pr(E3) <= eps/3", "Pr(F) <= eps/(K(alpha-1))"];
        let (idx, _) = satisfied.iter().enumerate().min_by_key(|(_, c)| **c).unwrap();
        let binding = if satisfied[idx] == 0 {
            format!("{} (unsatisfiable on the grid)", names[idx])
        } else {
            format!("{} (fewest satisfying grid points; constraints conflict jointly)", names[idx])
        };
        return Err(AsrError::Infeasible { binding });
    };
    let alpha = (1u64 << b_f) as f64 / k as f64;
    let k_c = (b - b_f) as usize + r_crc;
    let snr_eq = (l as f64 / k as f64) / ((k as f64 - 1.0) / k as f64 + 1.0 / snr);
    let e1 = pr_e1(alpha);
    let e2 = pr_e2(gamma, n_c, l, k, snr, 0)?;
    let e3 = fbl_error(k_c, n_c, snr_eq);
    let f = pr_false(gamma, n_c, r_crc)?;
    let result = DesignResult {
        beta: l as f64 / k as f64,
        l,
        n_c,
        r_crc,
        gamma,
        b_f,
        pr_e1: e1,
        pr_e2: e2,
        pr_e3: e3,
        pr_f: f,
        p_m_bound: e1 + e2 + e3,
        p_f_bound: if alpha > 1.0 { k as f64 * (alpha - 1.0) * f } else { 0.0 },
        m,
    };
    debug_assert!(result.constraints(budget).iter().all(|&ok| ok));
    Ok(result)
}
