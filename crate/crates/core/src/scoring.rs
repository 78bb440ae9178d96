//! Membership scores computed from per-token log-probabilities.
//!
//! Every score is oriented so that a higher value means "more likely a
//! member". Log-likelihoods are aggregated as per-token means.

use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::types::TokenScores;

/// Lower bound on the per-position standard deviation in Min-K%++.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// DEFLATE level used for the zlib entropy.
pub const ZLIB_LEVEL: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreParams {
    pub k_percent: f64,
    pub gamma: f64,
    pub n_neighbors: usize,
    pub shots: usize,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            k_percent: 20.0,
            gamma: 0.5,
            n_neighbors: 5,
            shots: 7,
        }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<()> {
        check_k(self.k_percent)?;
        check_gamma(self.gamma)?;
        if self.n_neighbors == 0 || self.shots == 0 {
            return Err(Error::InvalidParameter(
                "n_neighbors and shots must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_k(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidParameter(format!(
            "k must be in (0, 100], got {k_percent}"
        )));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be >= 0, got {gamma}"
        )));
    }
    Ok(())
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteInput(format!("{what} evaluated to {value}")))
    }
}

fn same_text(a: &TokenScores, b: &TokenScores) -> Result<()> {
    match (&a.text_digest, &b.text_digest) {
        (Some(x), Some(y)) if x != y => Err(Error::TextMismatch),
        _ => Ok(()),
    }
}

/// Arithmetic mean of the token log-probabilities.
pub fn mean_ll(ts: &TokenScores) -> Result<f64> {
    if ts.logprobs.is_empty() {
        return Err(Error::EmptyTokenScores);
    }
    if let Some(bad) = ts.logprobs.iter().find(|lp| !lp.is_finite()) {
        return Err(Error::NonFiniteInput(format!("logprob {bad}")));
    }
    Ok(ts.logprobs.iter().sum::<f64>() / ts.logprobs.len() as f64)
}

pub fn loss_score(ts: &TokenScores) -> Result<f64> {
    mean_ll(ts)
}

/// Target log-likelihood calibrated by a reference model on the same text.
pub fn ref_score(target: &TokenScores, reference: &TokenScores) -> Result<f64> {
    same_text(target, reference)?;
    finite(mean_ll(target)? - mean_ll(reference)?, "ref score")
}

/// Size in bytes of the zlib stream (level 6) of the UTF-8 text.
pub fn zlib_entropy(text: &str) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(ZLIB_LEVEL));
    enc.write_all(text.as_bytes())
        .expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail").len()
}

pub fn zlib_score(ts: &TokenScores, text: &str) -> Result<f64> {
    if text.is_empty() {
        return Err(Error::InvalidParameter("zlib score of empty text".into()));
    }
    finite(mean_ll(ts)? / zlib_entropy(text) as f64, "zlib score")
}

/// Target log-likelihood minus the average over perturbed neighbors.
pub fn neighbor_score(target: &TokenScores, neighbors: &[TokenScores]) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(Error::InvalidParameter(
            "neighbor score needs at least one neighbor".into(),
        ));
    }
    let target_ll = mean_ll(target)?;
    let mut total = 0.0;
    for n in neighbors {
        total += mean_ll(n)?;
    }
    finite(target_ll - total / neighbors.len() as f64, "neighbor score")
}

/// Number of tokens kept by a k% selection: `max(1, floor(k/100 · n))`.
pub fn selection_size(k_percent: f64, n: usize) -> usize {
    ((k_percent / 100.0 * n as f64).floor() as usize).clamp(1, n.max(1))
}

/// Mean of the `m` smallest values; ties go to the earlier position. The
/// selected values are summed in position order, so `k = 100` reproduces the
/// plain mean bit for bit.
fn mean_of_lowest(values: &[f64], k_percent: f64) -> Result<f64> {
    check_k(k_percent)?;
    if values.is_empty() {
        return Err(Error::EmptyTokenScores);
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("token score {bad}")));
    }
    let m = selection_size(k_percent, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut chosen = order[..m].to_vec();
    chosen.sort_unstable();
    Ok(chosen.iter().map(|&i| values[i]).sum::<f64>() / m as f64)
}

/// Mean log-probability of the k% least likely tokens.
pub fn mink_score(ts: &TokenScores, k_percent: f64) -> Result<f64> {
    mean_of_lowest(&ts.logprobs, k_percent)
}

/// Per-token standardized scores `(log p − μ) / max(σ, floor)`, plus the
/// number of positions where the floor applied.
pub fn minkpp_token_scores(ts: &TokenScores) -> Result<(Vec<f64>, usize)> {
    let (Some(mean), Some(std)) = (&ts.dist_mean, &ts.dist_std) else {
        return Err(Error::Capability("distribution_stats"));
    };
    if mean.len() != ts.len() || std.len() != ts.len() {
        return Err(Error::InvalidTokenScores(
            "distribution stats length mismatch".into(),
        ));
    }
    let mut floored = 0;
    let z = ts
        .logprobs
        .iter()
        .zip(mean.iter().zip(std))
        .map(|(&lp, (&mu, &sigma))| {
            if sigma < SIGMA_FLOOR {
                floored += 1;
            }
            (lp - mu) / sigma.max(SIGMA_FLOOR)
        })
        .collect();
    Ok((z, floored))
}

/// Min-K%++: mean of the k% lowest standardized token scores.
pub fn minkpp_score(ts: &TokenScores, k_percent: f64) -> Result<f64> {
    let (z, floored) = minkpp_token_scores(ts)?;
    if floored == z.len() && !z.is_empty() {
        log::warn!("all {floored} positions have sigma below the floor {SIGMA_FLOOR}");
    }
    mean_of_lowest(&z, k_percent)
}

fn denominator(uncond: &TokenScores) -> Result<f64> {
    let ll = mean_ll(uncond)?;
    if ll == 0.0 {
        return Err(Error::DegenerateLL);
    }
    Ok(ll)
}

/// `LL(x | P_nonmember) / LL(x)`.
pub fn recall_score(cond_nonmember: &TokenScores, uncond: &TokenScores) -> Result<f64> {
    same_text(cond_nonmember, uncond)?;
    let denom = denominator(uncond)?;
    finite(mean_ll(cond_nonmember)? / denom, "recall score")
}

/// `(LL(x | P_nonmember) − γ · LL(x | P_member)) / LL(x)`.
pub fn conrecall_score(
    cond_nonmember: &TokenScores,
    cond_member: &TokenScores,
    uncond: &TokenScores,
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    same_text(cond_nonmember, uncond)?;
    same_text(cond_member, uncond)?;
    let denom = denominator(uncond)?;
    let nm = mean_ll(cond_nonmember)?;
    let m = mean_ll(cond_member)?;
    finite(conrecall_from_lls(nm, m, denom, gamma), "conrecall score")
}

/// Contrastive combination of already-aggregated log-likelihoods.
#[inline]
pub fn conrecall_from_lls(ll_nonmember: f64, ll_member: f64, ll_uncond: f64, gamma: f64) -> f64 {
    (ll_nonmember - gamma * ll_member) / ll_uncond
}
