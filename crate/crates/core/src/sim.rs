//! Monte Carlo harness: end-to-end trials, aggregation, CSV records and the
//! minimal-sampling-rate sweep.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::amp::{amp_run, AmpOptions, Denoiser, GaussianEnsemble};
use crate::channel::Codebook;
use crate::error::{AsrError, Result};
use crate::model::{compute_metrics, sample_sparse, Metrics, Model, SystemConfig};
use crate::recovery::{run_recovery, Estimator, RecoveryOptions};
use crate::rng::trial_seed;

/// Decoder variants compared in the simulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Mf,
    MfSic,
    MfSicMap,
    MfSicLs,
    AmpMmse,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Mf, Scheme::MfSic, Scheme::MfSicMap, Scheme::MfSicLs, Scheme::AmpMmse];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Mf => "mf",
            Scheme::MfSic => "mf-sic",
            Scheme::MfSicMap => "mf-sic-map",
            Scheme::MfSicLs => "mf-sic-ls",
            Scheme::AmpMmse => "amp-mmse",
        }
    }

    /// Options of the matched-filter decoders; `None` for AMP.
    ///
    /// SM1 without an explicit estimator cancels with the known amplitude;
    /// SM2 needs an estimate and falls back to the moment estimate.
    pub fn recovery_options(self) -> Option<RecoveryOptions> {
        let (sic, estimator) = match self {
            Scheme::Mf => (false, Estimator::Fixed),
            Scheme::MfSic => (true, Estimator::Fixed),
            Scheme::MfSicMap => (true, Estimator::Map),
            Scheme::MfSicLs => (true, Estimator::Ls),
            Scheme::AmpMmse => return None,
        };
        Some(RecoveryOptions { sic, estimator, pad: true })
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = AsrError;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| AsrError::Parse(format!("unknown scheme '{s}'")))
    }
}

pub const CSV_HEADER: &str = "scheme,model,n,k,snr_db,m,rho,trials,e_m,e_f,d,seed,wall_s";

/// One aggregated simulation point.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRecord {
    pub scheme: Scheme,
    pub model: Model,
    pub n: usize,
    pub k: usize,
    pub snr_db: f64,
    pub m: usize,
    pub rho: f64,
    pub trials: usize,
    pub e_m: f64,
    pub e_f: f64,
    pub d: f64,
    pub seed: u64,
    pub wall_s: f64,
}

/// `%g`-style rendering with six significant digits.
pub fn format_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    // rounding may carry into the next decade, so format via {:e} first
    let sci = format!("{:.5e}", x);
    let (mant, e) = sci.split_once('e').expect("exponent");
    let e: i32 = e.parse().expect("exponent digits");
    if (-4..6).contains(&e) {
        let decimals = (5 - e).max(0) as usize;
        trim(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}{:02}", trim(mant.to_string()), if e < 0 { '-' } else { '+' }, e.abs())
    }
}

impl SimulationRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.scheme,
            self.model.as_str(),
            self.n,
            self.k,
            format_g6(self.snr_db),
            self.m,
            format_g6(self.rho),
            self.trials,
            format_g6(self.e_m),
            format_g6(self.e_f),
            format_g6(self.d),
            self.seed,
            format_g6(self.wall_s),
        )
    }

    /// Parses a data row and checks the record invariants.
    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 13 {
            return Err(AsrError::Parse(format!("expected 13 fields, got {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>().map_err(|_| AsrError::Parse(format!("field {i}: '{}' is not a number", f[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse::<u64>().map_err(|_| AsrError::Parse(format!("field {i}: '{}' is not an integer", f[i])))
        };
        let rec = SimulationRecord {
            scheme: f[0].parse()?,
            model: f[1].parse()?,
            n: int(2)? as usize,
            k: int(3)? as usize,
            snr_db: num(4)?,
            m: int(5)? as usize,
            rho: num(6)?,
            trials: int(7)? as usize,
            e_m: num(8)?,
            e_f: num(9)?,
            d: num(10)?,
            seed: int(11)?,
            wall_s: num(12)?,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || ((self.m as f64 / self.n as f64) - self.rho).abs() > 1e-5 * self.rho.max(1e-12) {
            return Err(AsrError::Parse(format!("rho {} does not equal m/n = {}/{}", self.rho, self.m, self.n)));
        }
        for (name, v) in [("e_m", self.e_m), ("e_f", self.e_f), ("d", self.d)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AsrError::Parse(format!("{name} = {v} outside [0, 1]")));
            }
        }
        // the mean of per-trial maxima is at least the larger of the means
        if self.d + 1e-5 < self.e_m.max(self.e_f) {
            return Err(AsrError::Parse(format!("d = {} below max(e_m, e_f)", self.d)));
        }
        Ok(())
    }
}

/// Appends rows to a CSV file, writing the header first when the file is empty.
pub fn append_records(path: &Path, records: &[SimulationRecord]) -> std::io::Result<()> {
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if file.metadata()?.len() == 0 {
        writeln!(file, "{CSV_HEADER}")?;
    }
    for r in records {
        writeln!(file, "{}", r.to_csv_row())?;
    }
    file.flush()
}

/// Reads and validates every row of a CSV file written by [`append_records`].
pub fn read_records(path: &Path) -> Result<Vec<SimulationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| AsrError::Parse(format!("{}: {e}", path.display())))?;
    let mut lines = std::io::BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == CSV_HEADER => {}
        other => return Err(AsrError::Parse(format!("unexpected CSV header: {other:?}"))),
    }
    lines
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| {
            let l = l.map_err(|e| AsrError::Parse(e.to_string()))?;
            SimulationRecord::parse_csv_row(&l)
        })
        .collect()
}

/// Applies `key=value` lines (blank lines and `#` comments ignored) to a
/// configuration. Keys mirror the [`SystemConfig`] fields; `snr_db` is also
/// accepted.
pub fn apply_config_text(text: &str, config: &mut SystemConfig) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| AsrError::Parse(format!("line {}: expected key=value", lineno + 1)))?;
        set_config_value(config, key.trim(), value.trim())
            .map_err(|e| AsrError::Parse(format!("line {}: {e}", lineno + 1)))?;
    }
    Ok(())
}

pub fn set_config_value(config: &mut SystemConfig, key: &str, value: &str) -> Result<()> {
    fn p<T: FromStr>(key: &str, value: &str) -> Result<T> {
        value.parse().map_err(|_| AsrError::Parse(format!("bad value '{value}' for {key}")))
    }
    match key {
        "n" => config.n = p(key, value)?,
        "k" | "K" => config.k = p(key, value)?,
        "snr" => config.snr = p(key, value)?,
        "snr_db" => config.snr = db_to_linear(p(key, value)?),
        "b_f" | "B_f" => config.b_f = p(key, value)?,
        "l" | "L" => config.l = p(key, value)?,
        "n_c" => config.n_c = p(key, value)?,
        "r_crc" => config.r_crc = p(key, value)?,
        "gamma" => config.gamma = p(key, value)?,
        "list_size" => config.list_size = p(key, value)?,
        "d_max" => config.d_max = p(key, value)?,
        "max_rounds" => config.max_rounds = p(key, value)?,
        "master_seed" | "seed" => config.master_seed = p(key, value)?,
        "model" => config.model = value.parse()?,
        "design_snr" => {
            config.design_snr = if value.eq_ignore_ascii_case("none") || value.is_empty() {
                None
            } else {
                Some(p(key, value)?)
            }
        }
        "quadrature_nodes" => config.quadrature_nodes = p(key, value)?,
        _ => return Err(AsrError::Parse(format!("unknown key '{key}'"))),
    }
    Ok(())
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(snr: f64) -> f64 {
    10.0 * snr.log10()
}

/// Everything that stays fixed across the trials of one point.
enum Receiver {
    Mf(Codebook, RecoveryOptions),
    Amp(Denoiser),
}

fn receiver(config: &SystemConfig, scheme: Scheme) -> Result<Receiver> {
    config.validate()?;
    Ok(match scheme.recovery_options() {
        Some(opts) => Receiver::Mf(Codebook::new(config)?, opts),
        None => Receiver::Amp(Denoiser::for_system(config)),
    })
}

fn run_one(config: &SystemConfig, rx: &Receiver, index: u64) -> Result<Metrics> {
    let seed = trial_seed(config.master_seed, index);
    let instance = sample_sparse(config, seed)?;
    let estimate = match rx {
        Receiver::Mf(codebook, opts) => {
            let y = codebook.measure(&instance, seed)?.y;
            run_recovery(&y, codebook, *opts)?.support
        }
        Receiver::Amp(denoiser) => {
            let ensemble = GaussianEnsemble::new(seed, config.m(), config.n);
            let y = ensemble.measure(&instance, seed, config.snr)?;
            match amp_run(&y, &ensemble, denoiser, config.k, AmpOptions::default()) {
                Ok(out) => out.support,
                // a diverged run counts as a failed trial
                Err(AsrError::Divergence { .. }) => Vec::new(),
                Err(e) => return Err(e),
            }
        }
    };
    Ok(compute_metrics(&instance.support, &estimate))
}

/// Runs one trial by index; the outcome depends only on the configuration,
/// the scheme and the index.
pub fn run_trial(config: &SystemConfig, scheme: Scheme, index: u64) -> Result<Metrics> {
    run_one(config, &receiver(config, scheme)?, index)
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| AsrError::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs `trials` independent trials and aggregates their metrics in index
/// order. `jobs` bounds the worker threads (`None` uses the global pool).
pub fn simulate(config: &SystemConfig, scheme: Scheme, trials: usize, jobs: Option<usize>) -> Result<SimulationRecord> {
    if trials == 0 {
        return Err(AsrError::InvalidConfig("trials must be positive".into()));
    }
    let start = Instant::now();
    let rx = receiver(config, scheme)?;
    let per_trial: Vec<Result<Metrics>> =
        with_jobs(jobs, || (0..trials as u64).into_par_iter().map(|i| run_one(config, &rx, i)).collect())?;
    let mut sums = (0.0, 0.0, 0.0);
    for m in per_trial {
        let m = m?;
        sums.0 += m.e_m;
        sums.1 += m.e_f;
        sums.2 += m.d;
    }
    let t = trials as f64;
    Ok(SimulationRecord {
        scheme,
        model: config.model,
        n: config.n,
        k: config.k,
        snr_db: linear_to_db(config.snr),
        m: config.m(),
        rho: config.rho(),
        trials,
        e_m: sums.0 / t,
        e_f: sums.1 / t,
        d: sums.2 / t,
        seed: config.master_seed,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// One simulated point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepProbe {
    pub l: usize,
    pub record: SimulationRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Smallest tested `L` meeting the target, and its record.
    pub best: SweepProbe,
    /// Every probe in the order it was run.
    pub probes: Vec<SweepProbe>,
}

impl SweepOutcome {
    pub fn rho(&self) -> f64 {
        self.best.record.rho
    }
}

/// Binary search over the ascending grid `l_grid` (with `n_c` fixed) for the
/// smallest `L` whose mean D is at most `target_d`. Assumes D decreases
/// with `L`; the largest grid value is probed first.
pub fn sweep_min_rho(
    config: &SystemConfig,
    scheme: Scheme,
    target_d: f64,
    trials: usize,
    l_grid: &[usize],
    jobs: Option<usize>,
) -> Result<SweepOutcome> {
    if !(target_d > 0.0 && target_d <= 1.0) {
        return Err(AsrError::InvalidConfig(format!("target D must lie in (0, 1], got {target_d}")));
    }
    let mut grid = l_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() || grid[0] == 0 {
        return Err(AsrError::InvalidConfig("L grid must hold positive values".into()));
    }
    let mut probes = Vec::new();
    let mut probe = |l: usize| -> Result<SweepProbe> {
        let mut c = config.clone();
        c.l = l;
        let p = SweepProbe { l, record: simulate(&c, scheme, trials, jobs)? };
        probes.push(p.clone());
        Ok(p)
    };
    let top = probe(*grid.last().unwrap())?;
    if top.record.d > target_d {
        return Err(AsrError::TargetUnreachable { target: target_d, best_d: top.record.d, best_l: top.l });
    }
    let mut best = top;
    let (mut lo, mut hi) = (0usize, grid.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        let p = probe(grid[mid])?;
        if p.record.d <= target_d {
            hi = mid;
            best = p;
        } else {
            lo = mid + 1;
        }
    }
    Ok(SweepOutcome { best, probes })
}
