//! Prefix-induced distribution shifts measured with the (signed) Wasserstein
//! distance, and min-max normalized score dumps.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::{map_concurrent, score_text, Provider};
use crate::scoring::mean_ll;
use crate::types::{build_prefix, Dataset, Label, PrefixKind, PrefixPool, Sample};

pub const DEFAULT_BINS: usize = 100;

fn check_samples(p: &[f64], q: &[f64], bins: usize) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyInput("wasserstein needs two nonempty samples".into()));
    }
    if bins < 2 {
        return Err(Error::InvalidParameter("bins must be at least 2".into()));
    }
    if let Some(v) = p.iter().chain(q).find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("sample value {v}")));
    }
    Ok(())
}

/// Empirical W1 on a shared equal-width histogram over the pooled range:
/// `Σ_cells |F_P − F_Q| · cell_width`, with CDFs taken at right cell edges.
pub fn wasserstein(p_samples: &[f64], q_samples: &[f64], bins: usize) -> Result<f64> {
    check_samples(p_samples, q_samples, bins)?;
    let (lo, hi) = p_samples
        .iter()
        .chain(q_samples)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if lo == hi {
        return Ok(0.0);
    }
    let width = (hi - lo) / bins as f64;
    let histogram = |xs: &[f64]| {
        let mut counts = vec![0usize; bins];
        for &x in xs {
            let cell = (((x - lo) / width).floor() as usize).min(bins - 1);
            counts[cell] += 1;
        }
        counts
    };
    let (hp, hq) = (histogram(p_samples), histogram(q_samples));
    let (np, nq) = (p_samples.len() as f64, q_samples.len() as f64);
    let (mut cp, mut cq) = (0usize, 0usize);
    let mut total = 0.0;
    for (a, b) in hp.iter().zip(&hq) {
        cp += a;
        cq += b;
        total += (cp as f64 / np - cq as f64 / nq).abs();
    }
    Ok(total * width)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `sign(E_Q − E_P) · W(P, Q)`; zero when the means coincide.
pub fn signed_wasserstein(p_samples: &[f64], q_samples: &[f64], bins: usize) -> Result<f64> {
    let w = wasserstein(p_samples, q_samples, bins)?;
    let diff = mean(q_samples) - mean(p_samples);
    Ok(if diff > 0.0 {
        w
    } else if diff < 0.0 {
        -w
    } else {
        0.0
    })
}

/// `(x − min) / (max − min)`; a constant list maps to 0.5 everywhere.
pub fn min_max_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("nothing to normalize".into()));
    }
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if lo == hi {
        return Ok(vec![0.5; scores.len()]);
    }
    Ok(scores.iter().map(|x| (x - lo) / (hi - lo)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pairing {
    #[serde(rename = "member_given_M")]
    MemberGivenM,
    #[serde(rename = "member_given_NM")]
    MemberGivenNm,
    #[serde(rename = "nonmember_given_M")]
    NonmemberGivenM,
    #[serde(rename = "nonmember_given_NM")]
    NonmemberGivenNm,
}

impl Pairing {
    pub const ALL: [Pairing; 4] = [
        Pairing::MemberGivenM,
        Pairing::MemberGivenNm,
        Pairing::NonmemberGivenM,
        Pairing::NonmemberGivenNm,
    ];

    pub fn label(self) -> Label {
        match self {
            Pairing::MemberGivenM | Pairing::MemberGivenNm => Label::Member,
            _ => Label::Nonmember,
        }
    }

    pub fn prefix(self) -> PrefixKind {
        match self {
            Pairing::MemberGivenM | Pairing::NonmemberGivenM => PrefixKind::Member,
            _ => PrefixKind::Nonmember,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pairing::MemberGivenM => "member_given_M",
            Pairing::MemberGivenNm => "member_given_NM",
            Pairing::NonmemberGivenM => "nonmember_given_M",
            Pairing::NonmemberGivenNm => "nonmember_given_NM",
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which per-text statistic the shift is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftStatistic {
    #[default]
    MeanLl,
    SumLl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub shots: usize,
    pub pairing: Pairing,
    pub signed_w: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftProfile {
    pub bins: usize,
    pub rows: Vec<ShiftRow>,
}

impl ShiftProfile {
    pub fn get(&self, shots: usize, pairing: Pairing) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.shots == shots && r.pairing == pairing)
            .map(|r| r.signed_w)
    }

    /// CSV with header `shots,pairing,signed_wasserstein`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "shots,pairing,signed_wasserstein")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.shots, r.pairing, r.signed_w)?;
        }
        Ok(())
    }
}

fn statistic(provider: &dyn Provider, text: &str, ctx: Option<&str>, stat: ShiftStatistic) -> Result<f64> {
    let ts = score_text(provider, text, ctx)?;
    let m = mean_ll(&ts)?;
    Ok(match stat {
        ShiftStatistic::MeanLl => m,
        ShiftStatistic::SumLl => m * ts.len() as f64,
    })
}

/// Signed shift of each label class's log-likelihood distribution when the
/// texts are prefixed with `n` member or non-member shots, for every `n` in
/// `shots_list`. `n = 0` means no prefix.
pub fn shift_profile(
    dataset: &Dataset,
    pool: &PrefixPool,
    provider: &dyn Provider,
    shots_list: &[usize],
    bins: usize,
) -> Result<ShiftProfile> {
    shift_profile_with(dataset, pool, provider, shots_list, bins, ShiftStatistic::MeanLl)
}

pub fn shift_profile_with(
    dataset: &Dataset,
    pool: &PrefixPool,
    provider: &dyn Provider,
    shots_list: &[usize],
    bins: usize,
    stat: ShiftStatistic,
) -> Result<ShiftProfile> {
    dataset.check_evaluable()?;
    if bins < 2 {
        return Err(Error::InvalidParameter("bins must be at least 2".into()));
    }
    let max_shots = shots_list.iter().copied().max().unwrap_or(0);
    for kind in [PrefixKind::Member, PrefixKind::Nonmember] {
        if max_shots > pool.shots(kind).len() {
            return Err(Error::InsufficientShots {
                have: pool.shots(kind).len(),
                want: max_shots,
            });
        }
    }
    let class = |label: Label| -> Vec<&Sample> { dataset.with_label(label).collect() };
    let (members, nonmembers) = (class(Label::Member), class(Label::Nonmember));
    let base_of =
        |samples: &[&Sample]| map_concurrent(provider, samples, |s| statistic(provider, &s.text, None, stat));
    let base_m = base_of(&members)?;
    let base_nm = base_of(&nonmembers)?;

    let mut rows = Vec::new();
    for &n in shots_list {
        for pairing in Pairing::ALL {
            let (samples, base) = match pairing.label() {
                Label::Member => (&members, &base_m),
                _ => (&nonmembers, &base_nm),
            };
            let signed_w = if n == 0 {
                0.0
            } else {
                let prefix = build_prefix(pool, pairing.prefix(), n)?;
                let shifted = map_concurrent(provider, samples, |s| {
                    statistic(provider, &s.text, Some(&prefix), stat)
                })?;
                signed_wasserstein(base, &shifted, bins)?
            };
            rows.push(ShiftRow {
                shots: n,
                pairing,
                signed_w,
            });
        }
    }
    Ok(ShiftProfile { bins, rows })
}

/// One row of a normalized-score dump.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedScore {
    pub sample_id: String,
    pub label: Label,
    pub method: String,
    pub normalized_score: f64,
}

/// CSV with header `sample_id,label,method,normalized_score`.
pub fn write_distribution_csv<W: Write>(mut out: W, rows: &[NormalizedScore]) -> std::io::Result<()> {
    writeln!(out, "sample_id,label,method,normalized_score")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.sample_id, r.label, r.method, r.normalized_score
        )?;
    }
    Ok(())
}
