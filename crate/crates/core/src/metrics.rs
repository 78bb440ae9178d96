//! ROC/AUC, TPR at a fixed FPR and the threshold decision rule.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Label, Method, MethodScore, Params};

pub const DEFAULT_FPR_LEVEL: f64 = 0.05;

fn check_scores(members: &[f64], nonmembers: &[f64]) -> Result<()> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::SingleClass);
    }
    if let Some(v) = members.iter().chain(nonmembers).find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("score {v}")));
    }
    Ok(())
}

/// Groups of tied scores in descending order: `(value, members, nonmembers)`.
fn descending_groups(members: &[f64], nonmembers: &[f64]) -> Vec<(f64, u64, u64)> {
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&v| (v, true))
        .chain(nonmembers.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for (v, is_member) in all {
        match groups.last_mut() {
            Some(g) if g.0 == v => {
                if is_member {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((v, is_member as u64, (!is_member) as u64)),
        }
    }
    groups
}

/// Mann–Whitney AUC: P(member > nonmember) with ties counted as one half.
pub fn roc_auc(member_scores: &[f64], nonmember_scores: &[f64]) -> Result<f64> {
    check_scores(member_scores, nonmember_scores)?;
    // twice the U statistic, accumulated in integers
    let mut twice_u: u128 = 0;
    let mut nonmembers_below = nonmember_scores.len() as u128;
    for (_, m, n) in descending_groups(member_scores, nonmember_scores) {
        nonmembers_below -= n as u128;
        twice_u += m as u128 * (2 * nonmembers_below + n as u128);
    }
    let pairs = member_scores.len() as f64 * nonmember_scores.len() as f64;
    Ok(twice_u as f64 / 2.0 / pairs)
}

/// Highest TPR over thresholds (`score >= τ` ⇒ member) whose FPR does not
/// exceed `fpr_level`. Step ROC, no interpolation.
pub fn tpr_at_fpr(member_scores: &[f64], nonmember_scores: &[f64], fpr_level: f64) -> Result<f64> {
    check_scores(member_scores, nonmember_scores)?;
    if !(fpr_level > 0.0 && fpr_level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "fpr level must be in (0, 1), got {fpr_level}"
        )));
    }
    let (n_m, n_nm) = (member_scores.len() as f64, nonmember_scores.len() as f64);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best = 0.0f64;
    for (_, m, n) in descending_groups(member_scores, nonmember_scores) {
        tp += m;
        fp += n;
        if fp as f64 / n_nm <= fpr_level {
            best = best.max(tp as f64 / n_m);
        } else {
            break;
        }
    }
    Ok(best)
}

/// Member iff `score >= tau`.
pub fn classify(score: f64, tau: f64) -> Label {
    debug_assert!(score.is_finite() && tau.is_finite());
    if score >= tau {
        Label::Member
    } else {
        Label::Nonmember
    }
}

/// Canonical key for an FPR level in reports, e.g. `"0.05"`.
pub fn fpr_key(level: f64) -> String {
    format!("{level}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub value: f64,
    pub auc: f64,
    pub tpr_at_fpr: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub params: Params,
    pub auc: f64,
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub n_members: usize,
    pub n_nonmembers: usize,
    /// Swept parameter name and its grid, when the method was tuned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swept: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<GridPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(skip)]
    pub score_records: Vec<MethodScore>,
}

/// AUC and TPR@FPR for one set of scores. Samples labeled unknown are ignored.
pub fn evaluate(
    method: Method,
    params: Params,
    scores: Vec<MethodScore>,
    labels: &HashMap<String, Label>,
    fpr_levels: &[f64],
) -> Result<EvalReport> {
    let (mut members, mut nonmembers) = (Vec::new(), Vec::new());
    for s in &scores {
        match labels.get(&s.sample_id) {
            Some(Label::Member) => members.push(s.value),
            Some(Label::Nonmember) => nonmembers.push(s.value),
            Some(Label::Unknown) => {}
            None => return Err(Error::UnknownSampleId(s.sample_id.clone())),
        }
    }
    let auc = roc_auc(&members, &nonmembers)?;
    let mut tpr = BTreeMap::new();
    for &level in fpr_levels {
        tpr.insert(fpr_key(level), tpr_at_fpr(&members, &nonmembers, level)?);
    }
    Ok(EvalReport {
        method,
        params,
        auc,
        tpr_at_fpr: tpr,
        n_members: members.len(),
        n_nonmembers: nonmembers.len(),
        swept: None,
        grid: Vec::new(),
        notes: Vec::new(),
        score_records: scores,
    })
}
