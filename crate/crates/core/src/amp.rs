//! Approximate message passing with separable posterior-mean denoisers, the
//! dense Gaussian baseline.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{AsrError, Result};
use crate::model::{Model, SparseInstance, SystemConfig};
use crate::rng::{self, domain};

/// Sensing matrices at or above this dimension are regenerated column by
/// column instead of stored.
pub const DENSE_LIMIT: usize = 1 << 16;

const COLUMN_BLOCK: usize = 512;

/// `m x n` matrix with i.i.d. `N(0, 1/n)` entries; column `c` is drawn from
/// its own seeded stream so it can be rebuilt on demand.
#[derive(Debug, Clone)]
pub struct GaussianEnsemble {
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    /// Column-major storage when materialized.
    dense: Option<Vec<f64>>,
}

impl GaussianEnsemble {
    /// Materializes the matrix when `n` is below [`DENSE_LIMIT`].
    pub fn new(seed: u64, m: usize, n: usize) -> Self {
        let mut e = GaussianEnsemble { seed, m, n, dense: None };
        if n < DENSE_LIMIT {
            e.materialize();
        }
        e
    }

    /// Never stores the matrix.
    pub fn regenerated(seed: u64, m: usize, n: usize) -> Self {
        GaussianEnsemble { seed, m, n, dense: None }
    }

    /// Square ensemble with orthogonal columns of unit norm (entry variance
    /// still `1/n`).
    pub fn orthonormal(seed: u64, n: usize) -> Self {
        let g = Self::regenerated(seed, n, n);
        let a = DMatrix::from_fn(n, n, |r, c| g.generate_column(c)[r]);
        let q = a.qr().q();
        GaussianEnsemble {
            seed,
            m: n,
            n,
            dense: Some(q.as_slice().to_vec()),
        }
    }

    fn materialize(&mut self) {
        let mut data = Vec::with_capacity(self.m * self.n);
        for c in 0..self.n {
            data.extend(self.generate_column(c));
        }
        self.dense = Some(data);
    }

    pub fn is_dense(&self) -> bool {
        self.dense.is_some()
    }

    fn generate_column(&self, c: usize) -> Vec<f64> {
        let scale = 1.0 / (self.n as f64).sqrt();
        let mut s = rng::stream(self.seed, domain::ENSEMBLE, c as u64);
        (0..self.m)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut s);
                g * scale
            })
            .collect()
    }

    /// Column `c`, borrowed when stored.
    pub fn column(&self, c: usize) -> std::borrow::Cow<'_, [f64]> {
        match &self.dense {
            Some(d) => std::borrow::Cow::Borrowed(&d[c * self.m..(c + 1) * self.m]),
            None => std::borrow::Cow::Owned(self.generate_column(c)),
        }
    }

    /// `Phi x` for a sparse `x`.
    pub fn apply_sparse(&self, instance: &SparseInstance) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.m];
        for (k, v) in instance.entries() {
            if k >= self.n {
                return Err(AsrError::Domain(format!("index {k} outside 0..{}", self.n)));
            }
            let col = self.column(k);
            y.iter_mut().zip(col.iter()).for_each(|(yi, ci)| *yi += v * ci);
        }
        Ok(y)
    }

    /// `Phi x` for a sparse `x` plus white noise of variance `1/snr`.
    pub fn measure(&self, instance: &SparseInstance, trial_seed: u64, snr: f64) -> Result<Vec<f64>> {
        let mut y = self.apply_sparse(instance)?;
        let sigma = (1.0 / snr).sqrt();
        if sigma > 0.0 {
            let mut noise = rng::stream(trial_seed, domain::NOISE, 1);
            for v in y.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut noise);
                *v += sigma * g;
            }
        }
        Ok(y)
    }

    /// One pass over the columns: `u_c = x_c + gain <phi_c, z>`, then
    /// `(x'_c, d_c) = f(u_c)`, returning `(x', Phi x', sum d)`. Column blocks
    /// run in parallel and are reduced in a fixed order.
    fn sweep(
        &self,
        z: &[f64],
        gain: f64,
        x: &[f64],
        f: impl Fn(f64) -> (f64, f64) + Sync,
    ) -> (Vec<f64>, Vec<f64>, f64) {
        let blocks: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..self.n.div_ceil(COLUMN_BLOCK))
            .into_par_iter()
            .map(|b| {
                let lo = b * COLUMN_BLOCK;
                let hi = (lo + COLUMN_BLOCK).min(self.n);
                let mut acc = vec![0.0; self.m];
                let mut out = Vec::with_capacity(hi - lo);
                let mut dsum = 0.0;
                for c in lo..hi {
                    let col = self.column(c);
                    let dot: f64 = col.iter().zip(z).map(|(a, b)| a * b).sum();
                    let (xc, dc) = f(x[c] + gain * dot);
                    dsum += dc;
                    if xc != 0.0 {
                        acc.iter_mut().zip(col.iter()).for_each(|(a, ci)| *a += xc * ci);
                    }
                    out.push(xc);
                }
                (out, acc, dsum)
            })
            .collect();
        let mut xs = Vec::with_capacity(self.n);
        let mut ax = vec![0.0; self.m];
        let mut dsum = 0.0;
        for (out, acc, d) in blocks {
            xs.extend(out);
            ax.iter_mut().zip(&acc).for_each(|(a, b)| *a += b);
            dsum += d;
        }
        (xs, ax, dsum)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar prior of the nonzero entries and its posterior-mean denoiser for
/// `u = x + N(0, tau2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Denoiser {
    pub model: Model,
    /// Fraction of nonzero entries.
    pub kappa: f64,
    /// SM1 amplitude; SM2 slab variance is its square.
    pub amplitude: f64,
}

impl Denoiser {
    pub fn new(model: Model, kappa: f64, amplitude: f64) -> Self {
        Denoiser { model, kappa, amplitude }
    }

    pub fn for_system(config: &SystemConfig) -> Self {
        Denoiser::new(config.model, config.kappa(), config.amplitude())
    }

    fn prior_logit(&self) -> f64 {
        (self.kappa / (1.0 - self.kappa)).ln()
    }

    /// Posterior activity probability.
    pub fn activity(&self, u: f64, tau2: f64) -> f64 {
        if self.kappa <= 0.0 {
            return 0.0;
        }
        if self.kappa >= 1.0 {
            return 1.0;
        }
        sigmoid(self.activity_logit(u, tau2))
    }

    fn activity_logit(&self, u: f64, tau2: f64) -> f64 {
        match self.model {
            Model::Sm1 => {
                let a = self.amplitude;
                self.prior_logit() + (u * a - a * a / 2.0) / tau2
            }
            Model::Sm2 => {
                let nu = self.amplitude * self.amplitude;
                self.prior_logit() + 0.5 * (tau2 / (nu + tau2)).ln() + 0.5 * u * u * (1.0 / tau2 - 1.0 / (nu + tau2))
            }
        }
    }

    /// Posterior mean `E[x | u]`.
    pub fn eta(&self, u: f64, tau2: f64) -> f64 {
        let w = self.activity(u, tau2);
        match self.model {
            Model::Sm1 => self.amplitude * w,
            Model::Sm2 => {
                let nu = self.amplitude * self.amplitude;
                u * nu / (nu + tau2) * w
            }
        }
    }

    /// `d eta / d u`.
    pub fn eta_prime(&self, u: f64, tau2: f64) -> f64 {
        let w = self.activity(u, tau2);
        let dw = w * (1.0 - w);
        match self.model {
            Model::Sm1 => self.amplitude * self.amplitude * dw / tau2,
            Model::Sm2 => {
                let nu = self.amplitude * self.amplitude;
                let shrink = nu / (nu + tau2);
                let slope = 1.0 / tau2 - 1.0 / (nu + tau2);
                shrink * (w + u * u * slope * dw)
            }
        }
    }
}

/// Iteration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmpOptions {
    pub iterations: usize,
    /// Relative change of the estimate that ends the iteration early.
    pub tolerance: f64,
    /// Keep the memory correction in the residual update.
    pub onsager: bool,
}

impl Default for AmpOptions {
    fn default() -> Self {
        AmpOptions {
            iterations: 30,
            tolerance: 1e-6,
            onsager: true,
        }
    }
}

/// Current iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct AmpState {
    pub xhat: Vec<f64>,
    pub z: Vec<f64>,
    pub tau2: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmpOutcome {
    pub state: AmpState,
    /// Indices of the K largest `|xhat|`, ties to the lower index.
    pub support: Vec<usize>,
    /// `tau2` before each iteration.
    pub tau2_history: Vec<f64>,
}

/// Indices of the `k` largest magnitudes; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Runs AMP on `y` measured through `ensemble` and keeps the top `k` entries.
pub fn amp_run(
    y: &[f64],
    ensemble: &GaussianEnsemble,
    denoiser: &Denoiser,
    k: usize,
    options: AmpOptions,
) -> Result<AmpOutcome> {
    let (m, n) = (ensemble.m, ensemble.n);
    if y.len() != m {
        return Err(AsrError::LengthMismatch { expected: m, actual: y.len() });
    }
    if m == 0 || n == 0 {
        return Err(AsrError::InvalidConfig("empty sensing matrix".into()));
    }
    // work with entries of variance 1/m: y' = sqrt(n/m) y, A = sqrt(n/m) Phi
    let gain = (n as f64 / m as f64).sqrt();
    let y_scaled: Vec<f64> = y.iter().map(|v| v * gain).collect();
    let delta_inv = n as f64 / m as f64;
    let energy = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();

    let mut state = AmpState {
        xhat: vec![0.0; n],
        z: y_scaled.clone(),
        tau2: energy(&y_scaled) / m as f64,
        iteration: 0,
    };
    let start = state.tau2;
    let mut tau2_history = Vec::new();
    while state.iteration < options.iterations {
        // a residual of (numerically) zero means the estimate already fits
        if state.tau2 <= 1e-300 || state.tau2 <= 1e-24 * start {
            break;
        }
        if state.tau2 > 10.0 * start {
            return Err(AsrError::Divergence {
                iteration: state.iteration,
                tau2: state.tau2,
                start,
            });
        }
        tau2_history.push(state.tau2);
        let tau2 = state.tau2;
        let (xnew, ax, dsum) = ensemble.sweep(&state.z, gain, &state.xhat, |u| {
            (denoiser.eta(u, tau2), denoiser.eta_prime(u, tau2))
        });
        let onsager = if options.onsager { delta_inv * dsum / n as f64 } else { 0.0 };
        let mut z = vec![0.0; m];
        for i in 0..m {
            z[i] = y_scaled[i] - gain * ax[i] + onsager * state.z[i];
        }
        let change = energy(&xnew.iter().zip(&state.xhat).map(|(a, b)| a - b).collect::<Vec<_>>()).sqrt();
        let prev_norm = energy(&state.xhat).sqrt();
        state.xhat = xnew;
        state.tau2 = energy(&z) / m as f64;
        state.z = z;
        state.iteration += 1;
        if prev_norm > 0.0 && change / prev_norm < options.tolerance {
            break;
        }
    }
    let support = top_k(&state.xhat, k);
    Ok(AmpOutcome { state, support, tau2_history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compute_metrics, sample_sparse};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sm1_denoiser_examples() {
        let none = Denoiser::new(Model::Sm1, 0.0, 3.0);
        for u in [-2.0, 0.0, 1.5, 40.0] {
            assert_eq!(none.eta(u, 1.0), 0.0);
        }
        let d = Denoiser::new(Model::Sm1, 0.1, 3.0);
        assert!((d.eta(2.0, 1e-4) - 3.0).abs() < 1e-12);
        assert!(d.eta(1.0, 1e-4).abs() < 1e-12);
        // two-point Bayes rule written out directly
        let (u, tau2, a, kappa) = (1.5f64, 1.0f64, 3.0f64, 0.1f64);
        let p = kappa * (-(u - a) * (u - a) / (2.0 * tau2)).exp();
        let q = (1.0 - kappa) * (-u * u / (2.0 * tau2)).exp();
        assert!((d.eta(u, tau2) - a * p / (p + q)).abs() < 1e-10);
    }

    /// Posterior mean of the spike-and-slab prior by brute-force integration
    /// over the slab plus the spike mass.
    fn sm2_oracle(u: f64, tau2: f64, kappa: f64, nu: f64) -> f64 {
        let lik = |x: f64| (-(u - x) * (u - x) / (2.0 * tau2)).exp() / (2.0 * std::f64::consts::PI * tau2).sqrt();
        let slab = |x: f64| (-x * x / (2.0 * nu)).exp() / (2.0 * std::f64::consts::PI * nu).sqrt();
        let sd = tau2.sqrt().min(nu.sqrt());
        let (lo, hi) = (u.min(0.0) - 40.0 * sd - 10.0 * nu.sqrt(), u.max(0.0) + 40.0 * sd + 10.0 * nu.sqrt());
        let steps = 400_000;
        let h = (hi - lo) / steps as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=steps {
            let x = lo + h * i as f64;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            let f = w * h * kappa * lik(x) * slab(x);
            num += x * f;
            den += f;
        }
        den += (1.0 - kappa) * lik(0.0);
        num / den
    }

    #[test]
    fn sm2_denoiser_examples() {
        let d = Denoiser::new(Model::Sm2, 0.05, 2.0);
        assert_eq!(d.eta(0.0, 0.7), 0.0);
        let full = Denoiser::new(Model::Sm2, 1.0, 2.0);
        assert!((full.eta(1.3, 0.5) - 1.3 * 4.0 / 4.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let u: f64 = rng.random_range(-6.0..6.0);
            let tau2: f64 = rng.random_range(0.2..3.0);
            let got = d.eta(u, tau2);
            let want = sm2_oracle(u, tau2, 0.05, 4.0);
            assert!((got - want).abs() < 1e-8, "u={u} tau2={tau2}: {got} vs {want}");
        }
    }

    /// Largest relative error of the analytic derivative against central
    /// differences over random points.
    pub(crate) fn worst_derivative_error(model: Model, points: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let a: f64 = rng.random_range(0.5..20.0);
            let kappa: f64 = rng.random_range(1e-4..0.5);
            let d = Denoiser::new(model, kappa, a);
            let tau2 = a * a * rng.random_range(0.05..2.0);
            let u = a * rng.random_range(-2.0..2.0);
            let h = 1e-5 * tau2.sqrt();
            let fd = (d.eta(u + h, tau2) - d.eta(u - h, tau2)) / (2.0 * h);
            let an = d.eta_prime(u, tau2);
            let scale = an.abs().max(1e-6 * d.eta_prime(a, tau2).abs().max(1.0));
            worst = worst.max((fd - an).abs() / scale);
        }
        worst
    }

    #[test]
    fn derivatives_match_finite_differences() {
        assert!(worst_derivative_error(Model::Sm1, 1000, 4) <= 1e-4);
        assert!(worst_derivative_error(Model::Sm2, 1000, 5) <= 1e-4);
    }

    #[test]
    fn denoisers_are_bounded() {
        for &model in &[Model::Sm1, Model::Sm2] {
            let d = Denoiser::new(model, 0.02, 3.0);
            let nu = 9.0;
            for i in -200..=200 {
                let u = 0.1 * i as f64;
                for tau2 in [0.01, 0.5, 4.0, 50.0] {
                    let eta = d.eta(u, tau2);
                    let bound = match model {
                        Model::Sm1 => 3.0,
                        Model::Sm2 => u.abs() * nu / (nu + tau2),
                    };
                    assert!(eta.abs() <= bound + 1e-12, "{model:?} u={u} tau2={tau2}");
                    if model == Model::Sm1 {
                        assert!(eta >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn ensemble_columns_regenerate_identically() {
        let dense = GaussianEnsemble::new(3, 40, 300);
        let lazy = GaussianEnsemble::regenerated(3, 40, 300);
        assert!(dense.is_dense() && !lazy.is_dense());
        for c in [0, 17, 299] {
            assert_eq!(dense.column(c), lazy.column(c));
        }
        let big = GaussianEnsemble::new(3, 4, DENSE_LIMIT);
        assert!(!big.is_dense());
        // entries have variance 1/n
        let n = 2000;
        let e = GaussianEnsemble::new(9, 50, n);
        let var: f64 = (0..n).flat_map(|c| e.column(c).into_owned()).map(|v| v * v).sum::<f64>() / (50 * n) as f64;
        assert!((var * n as f64 - 1.0).abs() < 0.02, "{}", var * n as f64);
    }

    #[test]
    fn zero_measurement_keeps_zero_estimate() {
        let e = GaussianEnsemble::new(1, 30, 200);
        let d = Denoiser::new(Model::Sm1, 0.02, 10.0);
        let out = amp_run(&vec![0.0; 30], &e, &d, 4, AmpOptions::default()).unwrap();
        assert!(out.state.xhat.iter().all(|&v| v == 0.0));
        assert_eq!(out.support, vec![0, 1, 2, 3]);
    }

    #[test]
    fn orthonormal_square_system_recovers_in_three_iterations() {
        let n = 64;
        let mut c = SystemConfig::new(n, 3);
        c.b_f = 1;
        let e = GaussianEnsemble::orthonormal(5, n);
        let col = e.column(3);
        assert!((col.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let d = Denoiser::for_system(&c);
        for t in 0..10 {
            let inst = sample_sparse(&c, t).unwrap();
            let y = e.apply_sparse(&inst).unwrap();
            let opts = AmpOptions { iterations: 3, ..Default::default() };
            let out = amp_run(&y, &e, &d, 3, opts).unwrap();
            let mut s = out.support.clone();
            s.sort_unstable();
            assert_eq!(s, inst.support);
            assert!(out.state.iteration <= 3);
        }
    }

    #[test]
    fn divergence_is_reported() {
        // a denoiser that amplifies blows the residual up
        let e = GaussianEnsemble::new(2, 20, 400);
        let d = Denoiser::new(Model::Sm2, 1.0, 1e3);
        let y: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let opts = AmpOptions { iterations: 200, tolerance: 0.0, onsager: true };
        match amp_run(&y, &e, &d, 3, opts) {
            Err(AsrError::Divergence { tau2, start, .. }) => assert!(tau2 > 10.0 * start),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.state.iteration)),
        }
    }

    fn mean_d(onsager: bool, trials: u64) -> f64 {
        let mut c = SystemConfig::new(1 << 12, 12);
        c.snr = 100.0;
        let m = 150;
        let d = Denoiser::for_system(&c);
        let opts = AmpOptions { onsager, ..Default::default() };
        let mut total = 0.0;
        for t in 0..trials {
            let e = GaussianEnsemble::new(100 + t, m, c.n);
            let inst = sample_sparse(&c, t).unwrap();
            let y = e.measure(&inst, t, c.snr).unwrap();
            total += match amp_run(&y, &e, &d, c.k, opts) {
                Ok(out) => compute_metrics(&inst.support, &out.support).d,
                Err(_) => 1.0,
            };
        }
        total / trials as f64
    }

    #[test]
    fn onsager_term_matters() {
        let with = mean_d(true, 50);
        let without = mean_d(false, 50);
        assert!(without > with, "with {with} without {without}");
        assert!(with < 0.1, "{with}");
    }
}
