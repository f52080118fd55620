use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use asr_core::channel::{read_samples, write_samples, Codebook};
use asr_core::designer::{design, DesignBudget};
use asr_core::model::{compute_metrics, sample_sparse, SystemConfig};
use asr_core::recovery::run_recovery;
use asr_core::rng::trial_seed;
use asr_core::sim::{
    append_records, apply_config_text, db_to_linear, set_config_value, simulate, sweep_min_rho, Scheme,
};
use asr_core::AsrError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asr", version, about = "Approximate support recovery with spreading sequences and polar codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick (L, n_c, r_crc, gamma, B_f) for a target error budget.
    Design(DesignArgs),
    /// Sample a sparse vector, measure it and dump y.
    Encode(EncodeArgs),
    /// Recover the support from a dumped measurement.
    Decode(DecodeArgs),
    /// Monte Carlo simulation of one operating point, appended as a CSV row.
    Simulate(SimulateArgs),
    /// Smallest sampling rate meeting a target D, one CSV row per SNR.
    Sweep(SweepArgs),
    /// Monte Carlo simulation of the AMP baseline.
    Amp(AmpArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set L=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "k")]
    k: Option<usize>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    model: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<SystemConfig, AsrError> {
        let mut text = String::new();
        if let Some(path) = &self.config {
            text = std::fs::read_to_string(path)
                .map_err(|e| AsrError::InvalidConfig(format!("{}: {e}", path.display())))?;
        }
        // n and K decide the defaults of everything else, so read them first.
        let mut probe = SystemConfig::new(1 << 18, 25);
        apply_config_text(&text, &mut probe)?;
        let mut config = SystemConfig::new(self.n.unwrap_or(probe.n), self.k.unwrap_or(probe.k));
        apply_config_text(&text, &mut config)?;
        if let Some(n) = self.n {
            config.n = n;
        }
        if let Some(k) = self.k {
            config.k = k;
        }
        if let Some(db) = self.snr_db {
            config.snr = db_to_linear(db);
        }
        if let Some(model) = &self.model {
            config.model = model.parse()?;
        }
        for kv in &self.overrides {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| AsrError::Parse(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            set_config_value(&mut config, key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct DesignArgs {
    /// Target error probability.
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 1 << 18)]
    n: usize,
    #[arg(long = "k", default_value_t = 25)]
    k: usize,
    #[arg(long, default_value_t = 20.0)]
    snr_db: f64,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: u64,
    /// Trial index; the trial seed is derived from (seed, trial).
    #[arg(long, default_value_t = 0)]
    trial: u64,
    /// Measurement dump.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the true support, one index per line.
    #[arg(long)]
    support: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Master seed the measurement was encoded with; it fixes the codebook.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "mf-sic")]
    scheme: Scheme,
    /// True support file; when given, the miss and false-alarm rates are printed.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    scheme: Scheme,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    trials: usize,
    /// CSV file; rows are appended.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    scheme: Scheme,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value_t = 0.07)]
    target_d: f64,
    /// Candidate spreading lengths, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    l_grid: Vec<usize>,
    /// SNR points in dB, comma separated; defaults to the configured SNR.
    #[arg(long, value_delimiter = ',')]
    snrs_db: Vec<f64>,
}

#[derive(Args)]
struct AmpArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
}

fn io_err(path: &std::path::Path, e: std::io::Error) -> AsrError {
    AsrError::InvalidConfig(format!("{}: {e}", path.display()))
}

fn read_support(path: &std::path::Path) -> Result<Vec<usize>, AsrError> {
    std::fs::read_to_string(path)
        .map_err(|e| io_err(path, e))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| AsrError::Parse(format!("bad index '{t}'"))))
        .collect()
}

fn run(cli: Cli) -> Result<(), AsrError> {
    match cli.command {
        Command::Design(a) => {
            let budget = DesignBudget::new(a.epsilon, a.n, a.k, db_to_linear(a.snr_db));
            let result = design(&budget)?;
            let kv = result.to_key_values();
            for (k, v) in &kv {
                println!("{k}={v}");
            }
            println!("{}", kv.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(","));
            println!("{}", kv.iter().map(|(_, v)| v.as_str()).collect::<Vec<_>>().join(","));
        }
        Command::Encode(a) => {
            let mut config = a.config.load()?;
            config.master_seed = a.seed;
            let codebook = Codebook::new(&config)?;
            let seed = trial_seed(a.seed, a.trial);
            let instance = sample_sparse(&config, seed)?;
            let y = codebook.measure(&instance, seed)?.y;
            let file = File::create(&a.out).map_err(|e| io_err(&a.out, e))?;
            write_samples(BufWriter::new(file), &y).map_err(|e| io_err(&a.out, e))?;
            let listing: String = instance.support.iter().map(|k| format!("{k}\n")).collect();
            match &a.support {
                Some(path) => std::fs::write(path, listing).map_err(|e| io_err(path, e))?,
                None => print!("{listing}"),
            }
            eprintln!("m={} rho={}", y.len(), config.rho());
        }
        Command::Decode(a) => {
            let mut config = a.config.load()?;
            config.master_seed = a.seed;
            let options = a.scheme.recovery_options().ok_or_else(|| {
                AsrError::InvalidConfig("decode runs the matched-filter schemes; use `amp` for AMP".into())
            })?;
            let file = File::open(&a.input).map_err(|e| io_err(&a.input, e))?;
            let y = read_samples(BufReader::new(file))?;
            let codebook = Codebook::new(&config)?;
            let outcome = run_recovery(&y, &codebook, options)?;
            for k in &outcome.support {
                println!("{k}");
            }
            eprintln!(
                "rounds={} decodes_per_round={:?} low_confidence={}",
                outcome.rounds_used,
                outcome.decodes_per_round,
                outcome.low_confidence.len()
            );
            if let Some(path) = &a.truth {
                let m = compute_metrics(&read_support(path)?, &outcome.support);
                eprintln!("e_m={} e_f={} d={}", m.e_m, m.e_f, m.d);
            }
        }
        Command::Simulate(a) => {
            let mut config = a.config.load()?;
            config.master_seed = a.seed;
            let record = simulate(&config, a.scheme, a.trials, a.jobs)?;
            append_records(&a.out, std::slice::from_ref(&record)).map_err(|e| io_err(&a.out, e))?;
            println!("{}", record.to_csv_row());
        }
        Command::Amp(a) => {
            let mut config = a.config.load()?;
            config.master_seed = a.seed;
            let record = simulate(&config, Scheme::AmpMmse, a.trials, a.jobs)?;
            append_records(&a.out, std::slice::from_ref(&record)).map_err(|e| io_err(&a.out, e))?;
            println!("{}", record.to_csv_row());
        }
        Command::Sweep(a) => {
            let mut config = a.config.load()?;
            config.master_seed = a.seed;
            let snrs = if a.snrs_db.is_empty() {
                vec![None]
            } else {
                a.snrs_db.iter().map(|&d| Some(db_to_linear(d))).collect()
            };
            let mut unreachable = None;
            for snr in snrs {
                let mut c = config.clone();
                if let Some(s) = snr {
                    c.snr = s;
                }
                match sweep_min_rho(&c, a.scheme, a.target_d, a.trials, &a.l_grid, a.jobs) {
                    Ok(outcome) => {
                        for p in &outcome.probes {
                            eprintln!("probe L={} rho={} d={}", p.l, p.record.rho, p.record.d);
                        }
                        append_records(&a.out, std::slice::from_ref(&outcome.best.record))
                            .map_err(|e| io_err(&a.out, e))?;
                        println!("{}", outcome.best.record.to_csv_row());
                    }
                    Err(e @ AsrError::TargetUnreachable { .. }) => {
                        eprintln!("{e}");
                        unreachable = Some(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            if let Some(e) = unreachable {
                return Err(e);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &AsrError) -> u8 {
    match e {
        AsrError::Infeasible { .. } => 3,
        AsrError::TargetUnreachable { .. } => 4,
        AsrError::InvalidConfig(_) | AsrError::Parse(_) | AsrError::Domain(_) | AsrError::LengthMismatch { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
