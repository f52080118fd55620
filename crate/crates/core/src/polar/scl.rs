//! Successive-cancellation list decoding in the LLR domain.
//!
//! The decoding tree is walked recursively with every surviving path carried
//! along; when paths fork or are pruned at an information leaf the node
//! returns an `origin` map so parents can realign their stored LLRs and
//! partial sums.

use super::{extract_info, FrozenPattern, PolarCode};
use crate::error::{AsrError, Result};

const LLR_CLAMP: f64 = 1e9;

/// One surviving list entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SclCandidate {
    /// Information bits in information-set order (payload then CRC).
    pub info_bits: Vec<u8>,
    pub codeword: Vec<u8>,
    /// Accumulated path penalty, `-log` of the path likelihood up to a
    /// constant. Lower is better.
    pub metric: f64,
    pub crc_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SclOutput {
    /// Sorted by ascending penalty; ties keep the lower path index first.
    pub candidates: Vec<SclCandidate>,
    /// Position in `candidates` of the most likely CRC-passing entry.
    pub best: Option<usize>,
}

impl SclOutput {
    pub fn best_candidate(&self) -> Option<&SclCandidate> {
        self.best.map(|i| &self.candidates[i])
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Exact check-node combination of two LLRs.
#[inline]
fn boxplus(a: f64, b: f64) -> f64 {
    let sign = if (a < 0.0) != (b < 0.0) { -1.0 } else { 1.0 };
    sign * a.abs().min(b.abs()) + (-(a + b).abs()).exp().ln_1p() - (-(a - b).abs()).exp().ln_1p()
}

struct Decoder<'a> {
    code: &'a PolarCode,
    pattern: &'a FrozenPattern,
    list_size: usize,
    metrics: Vec<f64>,
}

type NodeResult = (Vec<Vec<u8>>, Vec<usize>);

impl Decoder<'_> {
    fn node(&mut self, offset: usize, alphas: Vec<Vec<f64>>) -> NodeResult {
        let size = alphas[0].len();
        if size == 1 {
            return self.leaf(offset, &alphas);
        }
        let half = size / 2;
        let left: Vec<Vec<f64>> = alphas
            .iter()
            .map(|a| (0..half).map(|i| boxplus(a[i], a[i + half])).collect())
            .collect();
        let (beta_l, orig_l) = self.node(offset, left);
        let right: Vec<Vec<f64>> = orig_l
            .iter()
            .zip(&beta_l)
            .map(|(&o, bl)| {
                let a = &alphas[o];
                (0..half)
                    .map(|i| if bl[i] == 0 { a[i + half] + a[i] } else { a[i + half] - a[i] })
                    .collect()
            })
            .collect();
        let (beta_r, orig_r) = self.node(offset + half, right);
        let origin = orig_r.iter().map(|&r| orig_l[r]).collect();
        let betas = orig_r
            .iter()
            .zip(&beta_r)
            .map(|(&r, br)| {
                let bl = &beta_l[r];
                let mut out = Vec::with_capacity(size);
                out.extend(bl.iter().zip(br).map(|(x, y)| x ^ y));
                out.extend_from_slice(br);
                out
            })
            .collect();
        (betas, origin)
    }

    fn leaf(&mut self, i: usize, alphas: &[Vec<f64>]) -> NodeResult {
        let paths = alphas.len();
        if !self.code.is_info(i) {
            let v = self.pattern.value(i);
            let s = if v == 0 { 1.0 } else { -1.0 };
            for (pm, a) in self.metrics.iter_mut().zip(alphas) {
                *pm += softplus(-s * a[0]);
            }
            return (vec![vec![v]; paths], (0..paths).collect());
        }
        let mut forks: Vec<(f64, usize, u8)> = Vec::with_capacity(2 * paths);
        for (l, a) in alphas.iter().enumerate() {
            forks.push((self.metrics[l] + softplus(-a[0]), l, 0));
            forks.push((self.metrics[l] + softplus(a[0]), l, 1));
        }
        forks.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        forks.truncate(self.list_size);
        self.metrics = forks.iter().map(|f| f.0).collect();
        (
            forks.iter().map(|f| vec![f.2]).collect(),
            forks.iter().map(|f| f.1).collect(),
        )
    }
}

/// CRC-aided SCL decoding. Bit LLRs are `log P(c=0)/P(c=1)`.
///
/// Returns every surviving path; `best` is `None` when no path passes the
/// CRC, which is an ordinary outcome rather than an error.
pub fn scl_decode(
    llrs: &[f64],
    code: &PolarCode,
    pattern: &FrozenPattern,
    list_size: usize,
) -> Result<SclOutput> {
    if llrs.len() != code.n_c {
        return Err(AsrError::LengthMismatch {
            expected: code.n_c,
            actual: llrs.len(),
        });
    }
    if list_size == 0 {
        return Err(AsrError::InvalidConfig("list size must be positive".into()));
    }
    let root: Vec<f64> = llrs
        .iter()
        .map(|&v| if v.is_nan() { 0.0 } else { v.clamp(-LLR_CLAMP, LLR_CLAMP) })
        .collect();
    let mut dec = Decoder {
        code,
        pattern,
        list_size,
        metrics: vec![0.0],
    };
    let (codewords, _) = dec.node(0, vec![root]);
    let mut order: Vec<usize> = (0..codewords.len()).collect();
    order.sort_by(|&a, &b| dec.metrics[a].total_cmp(&dec.metrics[b]).then(a.cmp(&b)));
    let candidates: Vec<SclCandidate> = order
        .into_iter()
        .map(|p| {
            let info_bits = extract_info(&codewords[p], code);
            let crc_ok = code.crc.verify(&info_bits);
            SclCandidate {
                info_bits,
                codeword: codewords[p].clone(),
                metric: dec.metrics[p],
                crc_ok,
            }
        })
        .collect();
    let best = candidates.iter().position(|c| c.crc_ok);
    Ok(SclOutput { candidates, best })
}
