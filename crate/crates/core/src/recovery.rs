//! Candidate decoding, amplitude estimation and the successive interference
//! cancellation loop.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::channel::Codebook;
use crate::codebook::{bits_to_payload, MessageSplit};
use crate::detector::{detect_active_at, matched_filter, reshape, Detection, InterferenceLevel};
use crate::error::{AsrError, Result};
use crate::model::{Model, SystemConfig};
use crate::polar::{scl_decode, SclCandidate};

/// How amplitudes of decoded indices are obtained before cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// The known SM1 amplitude `sqrt(n/K)` with the decoded sign.
    Fixed,
    /// Per-index posterior mean from the matched-filter row.
    Map,
    /// Joint least squares on the original measurement.
    Ls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecoveryOptions {
    /// Run more than one detection round.
    pub sic: bool,
    pub estimator: Estimator,
    /// Fill the output up to K from undecoded sequences.
    pub pad: bool,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            sic: true,
            estimator: Estimator::Fixed,
            pad: true,
        }
    }
}

/// A recovered index.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedIndex {
    pub k: usize,
    pub j: usize,
    /// BPSK image of the decoded codeword.
    pub bhat: Vec<f64>,
    /// Sign of the decoder branch that succeeded.
    pub sign: f64,
    pub amplitude_estimate: f64,
}

/// Positions whose statistic is zero to rounding carry no sign (two equal
/// codewords cancelling there, say) and are not counted.
fn hamming_to_hard_decisions(codeword: &[u8], z: &[f64], sign: f64) -> usize {
    let floor = 1e-9 * z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    codeword
        .iter()
        .zip(z)
        .filter(|(&c, &zt)| zt.abs() > floor && (c == 1) != (sign * zt < 0.0))
        .count()
}

fn bpsk(codeword: &[u8]) -> Vec<f64> {
    codeword.iter().map(|&c| if c == 0 { 1.0 } else { -1.0 }).collect()
}

/// Method-of-moments magnitude of the normalized amplitude,
/// `sqrt(max(0, mean Z^2 - sigma1^2) / beta)`.
fn moment_magnitude(z: &[f64], config: &SystemConfig, level: &InterferenceLevel) -> f64 {
    let mean_sq = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
    ((mean_sq - level.active).max(0.0) / config.beta()).sqrt()
}

struct Branch {
    sign: f64,
    candidate: SclCandidate,
    passed: bool,
}

fn decode_branches(z: &[f64], j: usize, codebook: &Codebook, level: &InterferenceLevel) -> Result<Vec<Branch>> {
    let config = &codebook.config;
    let var = level.active;
    let magnitude = match config.model {
        Model::Sm1 => 1.0,
        Model::Sm2 => moment_magnitude(z, config, level).max(1e-3),
    };
    let scale = 2.0 * config.beta().sqrt() * magnitude / var;
    let signs: &[f64] = match config.model {
        Model::Sm1 => &[1.0],
        Model::Sm2 => &[1.0, -1.0],
    };
    let pattern = codebook.pattern(j);
    let mut out = Vec::with_capacity(signs.len());
    for &sign in signs {
        let llrs: Vec<f64> = z.iter().map(|&v| sign * scale * v).collect();
        let decoded = scl_decode(&llrs, &codebook.code, &pattern, config.list_size)?;
        let (candidate, crc_ok) = match decoded.best {
            Some(b) => (decoded.candidates[b].clone(), true),
            None => (decoded.candidates[0].clone(), false),
        };
        let passed =
            crc_ok && hamming_to_hard_decisions(&candidate.codeword, z, sign) <= config.d_max;
        out.push(Branch {
            sign,
            candidate,
            passed,
        });
    }
    Ok(out)
}

fn index_of(candidate: &SclCandidate, j: usize, config: &SystemConfig) -> usize {
    let b_s = config.b_s();
    let payload = bits_to_payload(&candidate.info_bits[..b_s as usize]);
    MessageSplit { j, payload }.join(b_s)
}

/// Decodes the codeword carried by sequence `j` from its matched-filter row.
///
/// SM1 runs one list decoder on `2 sqrt(beta) Z / sigma1^2`; SM2 runs two,
/// on `+-` the same LLRs scaled by the moment estimate of `|x|`. The most
/// likely CRC-passing candidate is kept if it lies within `d_max` of the
/// hard decisions; otherwise `None`. `sigma1^2` is `level.active`.
pub fn decode_candidate(
    z: &[f64],
    j: usize,
    codebook: &Codebook,
    level: &InterferenceLevel,
) -> Result<Option<DecodedIndex>> {
    let config = &codebook.config;
    if z.len() != config.n_c {
        return Err(AsrError::LengthMismatch {
            expected: config.n_c,
            actual: z.len(),
        });
    }
    let branches = decode_branches(z, j, codebook, level)?;
    let best = branches
        .into_iter()
        .filter(|b| b.passed)
        .min_by(|a, b| a.candidate.metric.total_cmp(&b.candidate.metric));
    Ok(best.map(|b| {
        let amplitude_estimate = match config.model {
            Model::Sm1 => b.sign * config.amplitude(),
            Model::Sm2 => b.sign * moment_magnitude(z, config, level) * config.amplitude(),
        };
        DecodedIndex {
            k: index_of(&b.candidate, j, config),
            j,
            bhat: bpsk(&b.candidate.codeword),
            sign: b.sign,
            amplitude_estimate,
        }
    }))
}

/// Most likely list entry over all branches, CRC ignored. Used for padding.
fn best_guess(z: &[f64], j: usize, codebook: &Codebook, level: &InterferenceLevel) -> Result<usize> {
    let branches = decode_branches(z, j, codebook, level)?;
    let b = branches
        .iter()
        .min_by(|a, b| a.candidate.metric.total_cmp(&b.candidate.metric))
        .expect("at least one branch");
    Ok(index_of(&b.candidate, j, &codebook.config))
}

/// Posterior mean of a `N(0, n/K)` amplitude observed as
/// `Z_t = sqrt(beta kappa) b_t x + V_t`, `V_t ~ N(0, sigma1^2)`.
pub fn map_estimate_amplitude(z: &[f64], bhat: &[f64], config: &SystemConfig, sigma1_sq: f64) -> f64 {
    let var = sigma1_sq.max(1e-12);
    let gain = (config.beta() * config.kappa()).sqrt();
    let corr: f64 = z.iter().zip(bhat).map(|(a, b)| a * b).sum();
    let precision = config.kappa() + z.len() as f64 * gain * gain / var;
    (gain * corr / var) / precision
}

/// One Gauss-Seidel sweep of per-index posterior means: each recovered
/// index is re-estimated from the residual with its own contribution added
/// back, so early estimates made under heavy interference improve as the
/// interference is cancelled.
fn refine_map(recovered: &mut [DecodedIndex], residual: &mut [f64], codebook: &Codebook) -> Result<()> {
    let config = &codebook.config;
    let s = recovered.len();
    let level = InterferenceLevel::for_model(config, s, residual);
    let gain = (config.beta() * config.kappa()).sqrt();
    for d in recovered.iter_mut() {
        let sketch = reshape(residual, config.l, config.n_c, s)?;
        let own: Vec<f64> = matched_filter(&sketch, &codebook.dictionary, d.j)?
            .iter()
            .zip(&d.bhat)
            .map(|(z, b)| z + gain * d.amplitude_estimate * b)
            .collect();
        let updated = map_estimate_amplitude(&own, &d.bhat, config, level.active);
        codebook.add_symbols(d.j, &d.bhat, d.amplitude_estimate - updated, residual);
        d.amplitude_estimate = updated;
    }
    Ok(())
}

/// Least-squares amplitudes over a set of recovered indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LsEstimate {
    /// Indices kept in the fit, in input order.
    pub indices: Vec<usize>,
    pub amplitudes: Vec<f64>,
    /// Indices whose columns were (numerically) dependent on earlier ones.
    pub dropped: Vec<usize>,
}

/// Minimizes `||y - Phi_S x_S||` by Householder QR. A column nearly in the
/// span of the columns before it is dropped and reported.
pub fn ls_estimate(indices: &[usize], y: &[f64], codebook: &Codebook) -> Result<LsEstimate> {
    let m = codebook.m();
    if y.len() != m {
        return Err(AsrError::LengthMismatch {
            expected: m,
            actual: y.len(),
        });
    }
    if indices.is_empty() {
        return Ok(LsEstimate {
            indices: Vec::new(),
            amplitudes: Vec::new(),
            dropped: Vec::new(),
        });
    }
    // Gram-Schmidt screen for dependent columns, oldest first.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut kept_cols = Vec::new();
    let mut dropped = Vec::new();
    for &k in indices {
        let col = codebook.column(k)?;
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut r = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(ri, qi)| *ri -= d * qi);
            }
        }
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if kept.len() >= m || rn <= 1e-9 * norm {
            dropped.push(k);
            continue;
        }
        r.iter_mut().for_each(|v| *v /= rn);
        basis.push(r);
        kept.push(k);
        kept_cols.push(col);
    }
    let a = DMatrix::from_fn(m, kept.len(), |row, c| kept_cols[c][row]);
    let qr = a.qr();
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    let r = qr.r();
    let x = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| AsrError::Accuracy("singular triangular factor".into()))?;
    Ok(LsEstimate {
        indices: kept,
        amplitudes: x.iter().copied().collect(),
        dropped,
    })
}

/// Loop state of the canceller.
#[derive(Debug, Clone)]
pub struct SicState {
    pub residual: Vec<f64>,
    pub recovered: Vec<DecodedIndex>,
    pub round: usize,
}

impl SicState {
    pub fn s(&self) -> usize {
        self.recovered.len()
    }
}

/// Output of a recovery run (no ground truth involved).
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOutcome {
    /// At most K indices, largest `|x|` first.
    pub support: Vec<usize>,
    /// Every recovered index with its final amplitude estimate.
    pub recovered: Vec<(usize, f64)>,
    pub rounds_used: usize,
    pub decodes_per_round: Vec<usize>,
    /// Padded indices that never passed the CRC.
    pub low_confidence: Vec<usize>,
    /// `||residual||` before the first round and after each round.
    pub residual_norms: Vec<f64>,
    /// Columns dropped by the least-squares rank screen.
    pub rank_drops: Vec<usize>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Single-column least-squares amplitude of `d` against the residual left after
/// it was cancelled, projected on the sign it was decoded with.
fn refit_along(d: &DecodedIndex, residual: &[f64], codebook: &Codebook) -> Result<f64> {
    let column = codebook.column(d.k)?;
    let energy: f64 = column.iter().map(|c| c * c).sum();
    let leftover: f64 = column.iter().zip(residual).map(|(c, r)| c * r).sum::<f64>() / energy;
    Ok((d.amplitude_estimate + leftover) * d.amplitude_estimate.signum())
}

/// Backward elimination of decodes the measurement does not back up. All
/// recovered columns are fitted to `y` jointly; indices whose fitted amplitude
/// falls below half the fixed one are offenders, and the worse half of them
/// is restored to the residual before refitting. A joint fit is needed
/// because wrong decodes are picked to match cross-talk from true indices
/// and so pull single-column refits of those down with them.
fn prune_unsupported(
    recovered: &mut Vec<DecodedIndex>,
    y: &[f64],
    residual: &mut [f64],
    codebook: &Codebook,
    pruned: &mut BTreeSet<usize>,
) -> Result<()> {
    loop {
        let keys: Vec<usize> = recovered.iter().map(|d| d.k).collect();
        let fit = ls_estimate(&keys, y, codebook)?;
        let mut offenders: Vec<(f64, usize)> = recovered
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let a = fit.indices.iter().position(|&k| k == d.k).map(|p| fit.amplitudes[p]).unwrap_or(0.0);
                (a / d.amplitude_estimate, i)
            })
            .filter(|&(margin, _)| margin < 0.5)
            .collect();
        if offenders.is_empty() {
            return Ok(());
        }
        offenders.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut drop: Vec<usize> = offenders[..offenders.len().div_ceil(2)].iter().map(|&(_, i)| i).collect();
        drop.sort_unstable_by(|a, b| b.cmp(a));
        for i in drop {
            let d = recovered.remove(i);
            codebook.add_symbols(d.j, &d.bhat, d.amplitude_estimate, residual);
            pruned.insert(d.k);
        }
    }
}

/// Full decoder: detect, decode, estimate, cancel, repeat; then keep the K
/// largest amplitudes.
pub fn run_recovery(y: &[f64], codebook: &Codebook, options: RecoveryOptions) -> Result<RecoveryOutcome> {
    let config = &codebook.config;
    let m = codebook.m();
    if y.len() != m {
        return Err(AsrError::LengthMismatch {
            expected: m,
            actual: y.len(),
        });
    }
    let mut state = SicState {
        residual: y.to_vec(),
        recovered: Vec::new(),
        round: 0,
    };
    let mut decodes_per_round = Vec::new();
    let mut residual_norms = vec![norm(y)];
    let mut rank_drops = Vec::new();
    let mut last_detection: Option<(Detection, InterferenceLevel)> = None;
    let max_rounds = if options.sic { config.max_rounds } else { 1 };
    let mut rejected = BTreeSet::new();

    while state.round < max_rounds && state.s() < config.k {
        let s = state.s();
        let sketch = reshape(&state.residual, config.l, config.n_c, s)?;
        let level = InterferenceLevel::for_model(config, s, &state.residual);
        let detection = detect_active_at(&sketch, &codebook.dictionary, config, &level)?;
        state.round += 1;
        let known: BTreeSet<usize> = state.recovered.iter().map(|d| d.k).collect();
        let mut fresh: Vec<DecodedIndex> = Vec::new();
        for &j in &detection.active {
            if let Some(mut d) = decode_candidate(detection.stats.row(j), j, codebook, &level)? {
                if known.contains(&d.k) || rejected.contains(&d.k) || fresh.iter().any(|f| f.k == d.k) {
                    continue;
                }
                if options.estimator == Estimator::Map {
                    d.amplitude_estimate = map_estimate_amplitude(detection.stats.row(j), &d.bhat, config, level.active);
                }
                fresh.push(d);
            }
        }
        last_detection = Some((detection, level));
        if fresh.is_empty() {
            decodes_per_round.push(0);
            break;
        }
        let fresh_keys: Vec<usize> = fresh.iter().map(|d| d.k).collect();
        state.recovered.extend(fresh);

        if options.estimator == Estimator::Ls {
            let idx: Vec<usize> = state.recovered.iter().map(|d| d.k).collect();
            let fit = ls_estimate(&idx, y, codebook)?;
            for d in state.recovered.iter_mut() {
                d.amplitude_estimate = fit
                    .indices
                    .iter()
                    .position(|&k| k == d.k)
                    .map(|p| fit.amplitudes[p])
                    .unwrap_or(0.0);
            }
            for k in fit.dropped {
                if !rank_drops.contains(&k) {
                    rank_drops.push(k);
                }
            }
        }
        let mut residual = y.to_vec();
        for d in &state.recovered {
            if d.amplitude_estimate != 0.0 {
                codebook.add_symbols(d.j, &d.bhat, -d.amplitude_estimate, &mut residual);
            }
        }
        if options.estimator == Estimator::Map {
            refine_map(&mut state.recovered, &mut residual, codebook)?;
        }
        let mut pruned = BTreeSet::new();
        if options.estimator == Estimator::Fixed {
            prune_unsupported(&mut state.recovered, y, &mut residual, codebook, &mut pruned)?;
        }
        let kept = fresh_keys.iter().filter(|k| !pruned.contains(k)).count();
        decodes_per_round.push(kept);
        residual_norms.push(norm(&residual));
        state.residual = residual;
        if kept == 0 {
            break;
        }
        // A pruned index may be genuine and merely masked by wrong decodes, so
        // it gets another chance once the residual has changed.
        rejected = pruned;
    }

    // Fixed amplitudes are all equal in magnitude, so rank by how much of the
    // cancelled amplitude the final residual still supports instead.
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(state.recovered.len());
    for d in &state.recovered {
        let key = match options.estimator {
            Estimator::Fixed => refit_along(d, &state.residual, codebook)?,
            _ => d.amplitude_estimate.abs(),
        };
        keyed.push((key, d.k));
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut support: Vec<usize> = keyed.iter().take(config.k).map(|&(_, k)| k).collect();
    let mut low_confidence = Vec::new();

    if options.pad && support.len() < config.k {
        let s = state.s();
        let (detection, level) = match last_detection {
            Some(d) => d,
            None => {
                let sketch = reshape(&state.residual, config.l, config.n_c, s)?;
                let level = InterferenceLevel::for_model(config, s, &state.residual);
                (detect_active_at(&sketch, &codebook.dictionary, config, &level)?, level)
            }
        };
        for j in detection.ranking() {
            if support.len() >= config.k {
                break;
            }
            let k = best_guess(detection.stats.row(j), j, codebook, &level)?;
            if !support.contains(&k) {
                support.push(k);
                low_confidence.push(k);
            }
        }
    }

    Ok(RecoveryOutcome {
        support,
        recovered: state.recovered.iter().map(|d| (d.k, d.amplitude_estimate)).collect(),
        rounds_used: state.round,
        decodes_per_round,
        low_confidence,
        residual_norms,
        rank_drops,
    })
}
