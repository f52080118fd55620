//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Operating points are documented next to
//! each criterion; every figure point uses n = 2^18, K = 25, target D = 0.07
//! and 100 trials per probe.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use asr_core::amp::{amp_run, AmpOptions, Denoiser, GaussianEnsemble};
use asr_core::channel::Codebook;
use asr_core::designer::{chi2_cdf, design, pr_e1, pr_e2, DesignBudget};
use asr_core::detector::{activity_test_sm1, reshape, MfStatistics};
use asr_core::model::{sample_sparse, Model, SystemConfig};
use asr_core::polar::{build_code, polar_encode, scl_decode, CrcSpec, FrozenPattern};
use asr_core::recovery::{ls_estimate, run_recovery};
use asr_core::rng::trial_seed;
use asr_core::sim::{db_to_linear, run_trial, sweep_min_rho, Scheme, SweepOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 1 << 18;
const K: usize = 25;
const TARGET_D: f64 = 0.07;
const TRIALS: usize = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// SM1 receiver used for every spreading-sequence point of the SM1 figure.
fn sm1_config(snr_db: f64, gamma: f64) -> SystemConfig {
    let mut c = SystemConfig::new(N, K);
    c.snr = db_to_linear(snr_db);
    c.n_c = 64;
    c.b_f = 9;
    c.r_crc = 8;
    c.gamma = gamma;
    c.list_size = 8;
    c.d_max = 18;
    c.master_seed = 2024;
    c
}

/// SM2 receiver: shorter code, threshold on the activity LLR at zero.
fn sm2_config(snr_db: f64) -> SystemConfig {
    let mut c = SystemConfig::new(N, K);
    c.model = Model::Sm2;
    c.snr = db_to_linear(snr_db);
    c.n_c = 32;
    c.b_f = 9;
    c.r_crc = 6;
    c.gamma = 0.0;
    c.list_size = 8;
    c.d_max = 7;
    c.master_seed = 2025;
    c
}

fn largest_l(rho: f64, n_c: usize) -> usize {
    (rho * N as f64 / n_c as f64).floor() as usize
}

fn ladder(outcome: &SweepOutcome) -> String {
    outcome
        .probes
        .iter()
        .map(|p| format!("L={}:D={:.4}", p.l, p.record.d))
        .collect::<Vec<_>>()
        .join(" ")
}

fn min_rho_within(config: &SystemConfig, scheme: Scheme, grid: &[usize], limit: f64) -> Verdict {
    match sweep_min_rho(config, scheme, TARGET_D, TRIALS, grid, None) {
        Ok(out) => verdict(
            out.rho() <= limit,
            format!("min rho = {:.5} (limit {limit}) [{}]", out.rho(), ladder(&out)),
        ),
        Err(e) => verdict(false, format!("{e}")),
    }
}

fn fig3_mf_10db() -> Verdict {
    let limit = 0.016;
    let grid: Vec<usize> = (20..=largest_l(limit, 64)).step_by(5).collect();
    min_rho_within(&sm1_config(10.0, 0.2), Scheme::Mf, &grid, limit)
}

fn fig3_mf_sic_20db() -> Verdict {
    let limit = 0.0026;
    let grid: Vec<usize> = (4..=largest_l(limit, 64)).collect();
    min_rho_within(&sm1_config(20.0, 0.2), Scheme::MfSic, &grid, limit)
}

fn fig3_mf_sic_0db() -> Verdict {
    let limit = 0.0067;
    let grid: Vec<usize> = (12..=largest_l(limit, 64)).collect();
    min_rho_within(&sm1_config(0.0, 0.2), Scheme::MfSic, &grid, limit)
}

fn fig4_ls_40db() -> Verdict {
    let limit = 0.0017;
    let grid: Vec<usize> = (6..=largest_l(limit, 32)).collect();
    min_rho_within(&sm2_config(40.0), Scheme::MfSicLs, &grid, limit)
}

fn fig4_map_40db() -> Verdict {
    let limit = 0.0026;
    let grid: Vec<usize> = (6..=largest_l(limit, 32)).collect();
    min_rho_within(&sm2_config(40.0), Scheme::MfSicMap, &grid, limit)
}

fn fig4_ls_not_above_map() -> Verdict {
    let points: [(f64, Vec<usize>); 3] = [
        (20.0, (16..=64).step_by(4).collect()),
        (30.0, (6..=40).step_by(2).collect()),
        (40.0, (6..=21).collect()),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (snr_db, grid) in points {
        let c = sm2_config(snr_db);
        let ls = sweep_min_rho(&c, Scheme::MfSicLs, TARGET_D, TRIALS, &grid, None);
        let map = sweep_min_rho(&c, Scheme::MfSicMap, TARGET_D, TRIALS, &grid, None);
        match (ls, map) {
            (Ok(ls), Ok(map)) => {
                pass &= ls.rho() <= map.rho();
                parts.push(format!("{snr_db} dB: LS {:.5} MAP {:.5}", ls.rho(), map.rho()));
            }
            (ls, map) => {
                pass = false;
                parts.push(format!("{snr_db} dB: LS {:?} MAP {:?}", ls.map(|o| o.rho()), map.map(|o| o.rho())));
            }
        }
    }
    verdict(pass, parts.join("; "))
}

/// n = 2^16 with the sparsity ratio of the full-size system, m = 8 L.
fn amp_baseline() -> Verdict {
    let n = 1 << 16;
    let k = (K as f64 * n as f64 / N as f64).round() as usize;
    let mut c = SystemConfig::new(n, k);
    c.snr = db_to_linear(20.0);
    c.n_c = 8;
    c.b_f = 12;
    c.r_crc = 0;
    c.master_seed = 2026;
    let limit = 0.0017;
    let top = (limit * n as f64 / 8.0).floor() as usize;
    let grid: Vec<usize> = (6..=top).collect();
    match sweep_min_rho(&c, Scheme::AmpMmse, TARGET_D, TRIALS, &grid, None) {
        Ok(out) => verdict(
            out.rho() <= limit,
            format!("K = {k}: min rho = {:.5} (limit {limit}) [{}]", out.rho(), ladder(&out)),
        ),
        Err(e) => verdict(false, format!("K = {k}: {e}")),
    }
}

fn mean_decode_seconds(n: usize, trials: u64) -> f64 {
    let mut c = SystemConfig::new(n, K);
    c.snr = db_to_linear(20.0);
    c.n_c = 64;
    c.b_f = 9;
    c.r_crc = 8;
    c.l = 20;
    c.gamma = 0.2;
    c.d_max = 18;
    let codebook = Codebook::new(&c).unwrap();
    let mut total = 0.0;
    for t in 0..trials {
        let seed = trial_seed(c.master_seed, t);
        let inst = sample_sparse(&c, seed).unwrap();
        let y = codebook.measure(&inst, seed).unwrap().y;
        let start = Instant::now();
        run_recovery(&y, &codebook, Scheme::MfSic.recovery_options().unwrap()).unwrap();
        total += start.elapsed().as_secs_f64();
    }
    total / trials as f64
}

fn amp_seconds_per_iteration(n: usize, m: usize) -> f64 {
    let mut c = SystemConfig::new(n, K);
    c.snr = db_to_linear(20.0);
    let ensemble = GaussianEnsemble::regenerated(7, m, n);
    let inst = sample_sparse(&c, 7).unwrap();
    let y = ensemble.measure(&inst, 7, c.snr).unwrap();
    let options = AmpOptions { iterations: 3, tolerance: 0.0, onsager: true };
    let start = Instant::now();
    let out = amp_run(&y, &ensemble, &Denoiser::for_system(&c), K, options);
    let iterations = match out {
        Ok(o) => o.state.iteration.max(1),
        Err(_) => options.iterations,
    };
    start.elapsed().as_secs_f64() / iterations as f64
}

fn complexity_decode() -> Verdict {
    let small = mean_decode_seconds(1 << 14, 20);
    let large = mean_decode_seconds(1 << 20, 20);
    let ratio = large / small;
    verdict(
        ratio <= 3.0,
        format!("decode {small:.4}s at 2^14, {large:.4}s at 2^20, ratio {ratio:.2} (limit 3)"),
    )
}

fn complexity_amp() -> Verdict {
    let small = amp_seconds_per_iteration(1 << 14, 128);
    let large = amp_seconds_per_iteration(1 << 20, 128);
    let ratio = large / small;
    verdict(
        ratio >= 30.0,
        format!("AMP iteration {small:.4}s at 2^14, {large:.4}s at 2^20, ratio {ratio:.1} (at least 30)"),
    )
}

fn noiseless_exact_recovery() -> Verdict {
    let snr = db_to_linear(20.0);
    let result = design(&DesignBudget::new(TARGET_D, N, K, snr)).unwrap();
    let mut c = result.to_config(N, K, snr);
    c.snr = f64::INFINITY;
    let exact = (0..100).filter(|&t| run_trial(&c, Scheme::MfSic, t).unwrap().d == 0.0).count();
    verdict(
        exact >= 95,
        format!(
            "{exact}/100 trials with D = 0 (need 95) at L={} n_c={} r_crc={} gamma={:.2} B_f={}",
            c.l, c.n_c, c.r_crc, c.gamma, c.b_f
        ),
    )
}

/// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
fn ks_distance(mut sample: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(|a, b| a.total_cmp(b));
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// `T` of every row with no active index (`want_active = false`) or exactly
/// one (`true`), measured with `k_present` indices in the signal.
fn activity_statistics(c: &SystemConfig, k_present: usize, want_active: bool, count: usize) -> Vec<f64> {
    let codebook = Codebook::new(c).unwrap();
    let mut present = c.clone();
    present.k = k_present;
    let mut out = Vec::with_capacity(count);
    let mut t = 0;
    while out.len() < count {
        let seed = trial_seed(99, t);
        t += 1;
        let inst = sample_sparse(&present, seed).unwrap();
        let y = codebook.measure(&inst, seed).unwrap().y;
        let stats = MfStatistics::compute(&reshape(&y, c.l, c.n_c, 0).unwrap(), &codebook.dictionary).unwrap();
        let mut occupancy = vec![0usize; c.j()];
        for &k in &inst.support {
            occupancy[codebook.symbols(k).unwrap().0] += 1;
        }
        // a few rows per measurement keeps the sample close to independent
        let rows: Vec<usize> = (0..c.j()).filter(|&j| occupancy[j] == usize::from(want_active)).take(16).collect();
        for j in rows {
            out.push(activity_test_sm1(stats.row(j), c, 0).1);
            if out.len() == count {
                break;
            }
        }
    }
    out
}

fn activity_config() -> SystemConfig {
    let mut c = SystemConfig::new(N, K);
    c.snr = db_to_linear(20.0);
    c.n_c = 64;
    c.b_f = 9;
    c.r_crc = 8;
    c.l = 40;
    c
}

/// The statistic is normalized by the interference of K - 1 indices, so the
/// null rows are drawn with K - 1 indices present.
fn null_statistic_ks() -> Verdict {
    let c = activity_config();
    let sample = activity_statistics(&c, K - 1, false, 10_000);
    let df = c.n_c as f64;
    let ks = ks_distance(sample, |x| chi2_cdf(x, 0.0, df).unwrap());
    verdict(ks <= 0.02, format!("KS = {ks:.4} over 10^4 null rows (limit 0.02)"))
}

fn active_statistic_ks() -> Verdict {
    let c = activity_config();
    let sample = activity_statistics(&c, K, true, 10_000);
    let lambda = (c.n_c * c.l) as f64 / (K as f64 - 1.0 + K as f64 / c.snr);
    let df = c.n_c as f64;
    let ks = ks_distance(sample, |x| chi2_cdf(x, lambda, df).unwrap());
    verdict(ks <= 0.02, format!("KS = {ks:.4} over 10^4 active rows, lambda = {lambda:.2} (limit 0.02)"))
}

fn collision_probability() -> Verdict {
    let balls = 10_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for alpha in [1.0, 2.0, 40.96] {
        let bins = (alpha * balls as f64).round() as usize;
        let reps = 40;
        let mut fractions = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut load = vec![0u32; bins];
            for _ in 0..balls {
                load[rng.random_range(0..bins)] += 1;
            }
            fractions.push(load.iter().filter(|&&l| l >= 2).count() as f64 / bins as f64);
        }
        let mean = fractions.iter().sum::<f64>() / reps as f64;
        let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        let z = (mean - pr_e1(alpha)).abs() / se;
        worst = worst.max(z);
        parts.push(format!("alpha {alpha}: {z:.2} SE"));
    }
    verdict(worst <= 3.0, parts.join(", "))
}

fn denoiser_derivatives() -> Verdict {
    let mut worst: f64 = 0.0;
    for (model, seed) in [(Model::Sm1, 11u64), (Model::Sm2, 12)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
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
    }
    verdict(worst <= 1e-4, format!("worst relative error {worst:.2e} over 2 x 1000 points (limit 1e-4)"))
}

fn scl_and_crc_exhaustive() -> Verdict {
    let mut decoded = 0usize;
    let mut failures = 0usize;
    for (n_c, k_c, r) in [(16usize, 8usize, 0u32), (32, 12, 4), (64, 12, 8), (32, 12, 0)] {
        let code = build_code(n_c, k_c, 1.0, CrcSpec::standard(r).unwrap()).unwrap();
        let pattern = FrozenPattern::new(5, 17, &code);
        let payload_len = k_c - r as usize;
        for word in 0u32..(1 << payload_len) {
            let payload: Vec<u8> = (0..payload_len).map(|b| ((word >> (payload_len - 1 - b)) & 1) as u8).collect();
            let info = code.crc.append(&payload);
            let cw = polar_encode(&info, &code, &pattern).unwrap();
            let llrs: Vec<f64> = cw.iter().map(|&b| if b == 0 { 40.0 } else { -40.0 }).collect();
            let out = scl_decode(&llrs, &code, &pattern, 4).unwrap();
            decoded += 1;
            if out.best_candidate().map(|b| &b.info_bits) != Some(&info) {
                failures += 1;
            }
        }
    }
    let crc = CrcSpec::standard(8).unwrap();
    let mut missed_flips = 0usize;
    for m in 0u32..256 {
        let msg: Vec<u8> = (0..8).rev().map(|i| ((m >> i) & 1) as u8).collect();
        let word = crc.append(&msg);
        for pos in 0..word.len() {
            let mut bad = word.clone();
            bad[pos] ^= 1;
            missed_flips += usize::from(crc.verify(&bad));
        }
    }
    verdict(
        failures == 0 && missed_flips == 0,
        format!("{failures} of {decoded} noiseless decodes wrong; {missed_flips} of 4096 single flips undetected"),
    )
}

fn ls_exactness() -> Verdict {
    let mut c = SystemConfig::new(1 << 16, 40);
    c.n_c = 64;
    c.b_f = 8;
    c.l = 8;
    c.model = Model::Sm2;
    let codebook = Codebook::new(&c).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..20 {
        let inst = sample_sparse(&c, t).unwrap();
        let y = codebook.apply(&inst).unwrap();
        let fit = ls_estimate(&inst.support, &y, &codebook).unwrap();
        let mut r = y.clone();
        for (&k, &a) in fit.indices.iter().zip(&fit.amplitudes) {
            codebook.add_column(k, -a, &mut r).unwrap();
        }
        let rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / y.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(rel);
    }
    verdict(worst <= 1e-9, format!("worst relative residual {worst:.2e} over 20 systems (limit 1e-9)"))
}

fn designer_contract() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (eps, snr_db) in [(0.07, 20.0), (0.05, 10.0), (0.1, 0.0)] {
        let budget = DesignBudget::new(eps, N, K, db_to_linear(snr_db));
        let r = match design(&budget) {
            Ok(r) => r,
            Err(e) => {
                pass = false;
                parts.push(format!("eps {eps} at {snr_db} dB: {e}"));
                continue;
            }
        };
        let predicates = r.constraints(&budget).iter().all(|&ok| ok);
        let c = r.to_config(N, K, budget.snr);
        let analytic = pr_e2(r.gamma, r.n_c, r.l, K, budget.snr, 0).unwrap();
        // miss rate of the activity test on single-occupancy rows
        let sample = activity_statistics(&c, K, true, 10_000);
        let misses = sample.iter().filter(|&&t| t <= (1.0 + c.gamma) * c.n_c as f64).count();
        let empirical = misses as f64 / sample.len() as f64;
        let within = empirical <= 2.0 * analytic && analytic <= 2.0 * empirical;
        pass &= predicates && within;
        parts.push(format!(
            "eps {eps} at {snr_db} dB: predicates {predicates}, Pr(E2) {analytic:.2e} vs Monte Carlo {empirical:.2e}"
        ));
    }
    verdict(pass, parts.join("; "))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Verdict)> = vec![
        ("1a SM1 MF at 10 dB, min rho <= 0.016", fig3_mf_10db),
        ("1b SM1 MF-SIC at 20 dB, min rho <= 0.0026", fig3_mf_sic_20db),
        ("1c SM1 MF-SIC at 0 dB, min rho <= 0.0067", fig3_mf_sic_0db),
        ("2a SM2 MF-SIC-LS at 40 dB, min rho <= 0.0017", fig4_ls_40db),
        ("2b SM2 MF-SIC-MAP at 40 dB, min rho <= 0.0026", fig4_map_40db),
        ("2c SM2 min rho of LS <= MAP at 20, 30, 40 dB", fig4_ls_not_above_map),
        ("3  AMP-MMSE at n = 2^16, 20 dB, D <= 0.07 at rho <= 0.0017", amp_baseline),
        ("4a decode time 2^20 vs 2^14 at most 3x", complexity_decode),
        ("4b AMP iteration time 2^20 vs 2^14 at least 30x", complexity_amp),
        ("5a noiseless exact recovery at designed parameters", noiseless_exact_recovery),
        ("5b null activity statistic vs central chi-square", null_statistic_ks),
        ("5c active activity statistic vs noncentral chi-square", active_statistic_ks),
        ("5d bin collision probability vs balls in bins", collision_probability),
        ("5e AMP denoiser derivatives vs finite differences", denoiser_derivatives),
        ("5f list decoder and CRC exhaustive checks", scl_and_crc_exhaustive),
        ("5g least squares exact on noiseless systems", ls_exactness),
        ("5h designer predicates and Pr(E2) Monte Carlo", designer_contract),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!(
            "acceptance {} {name} ({:.0}s): {}",
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
