//! Membership inference: loss and reference-calibrated scores, threshold
//! selection at a target false-positive rate, and the usual metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::Model;

pub const DEFAULT_ALPHAS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiaLabel {
    Member,
    Nonmember,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: u64,
    pub loss_target: f64,
    pub loss_ref: Option<f64>,
    pub label: MiaLabel,
}

impl ScoreRecord {
    /// Membership signal; lower means more member-like.
    pub fn signal(&self) -> f64 {
        match self.loss_ref {
            Some(r) => self.loss_target - r,
            None => self.loss_target,
        }
    }
}

/// Per-token mean NLL of one sample under the target model.
pub fn loss_score(model: &Model, sample: &TokenSequence) -> Result<f64> {
    model.sequence_nll(&sample.ids)
}

/// Calibrated signal: target loss minus reference loss.
pub fn ref_score(model: &Model, ref_model: &Model, sample: &TokenSequence) -> Result<f64> {
    if model.config.vocab_size != ref_model.config.vocab_size {
        return Err(Error::VocabMismatch);
    }
    Ok(loss_score(model, sample)? - loss_score(ref_model, sample)?)
}

/// Score a whole split under one label.
pub fn score_dataset(
    model: &Model,
    ref_model: Option<&Model>,
    data: &[TokenSequence],
    label: MiaLabel,
) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::with_capacity(data.len());
    for s in data {
        let loss_target = loss_score(model, s)?;
        let loss_ref = match ref_model {
            Some(r) => {
                if model.config.vocab_size != r.config.vocab_size {
                    return Err(Error::VocabMismatch);
                }
                Some(loss_score(r, s)?)
            }
            None => None,
        };
        if !loss_target.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite score for sample {}",
                s.source_id
            )));
        }
        out.push(ScoreRecord { sample_id: s.source_id, loss_target, loss_ref, label });
    }
    Ok(out)
}

/// Largest gamma whose false-positive rate on the calibration scores stays
/// at or below alpha; a sample is called member iff signal < gamma.
pub fn pick_threshold(nonmember_scores: &[f64], alpha: f64) -> Result<f64> {
    if nonmember_scores.is_empty() {
        return Err(Error::InvalidInput("threshold needs nonmember scores".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput("alpha must lie in (0, 1)".into()));
    }
    let n = nonmember_scores.len() as f64;
    let mut candidates: Vec<f64> = nonmember_scores.to_vec();
    candidates.push(f64::NEG_INFINITY);
    candidates.push(f64::INFINITY);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best = f64::NEG_INFINITY;
    for &g in &candidates {
        let fpr = nonmember_scores.iter().filter(|&&s| s < g).count() as f64 / n;
        if fpr <= alpha && g > best {
            best = g;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub auc: f64,
    /// alpha (formatted) -> TPR at the threshold calibrated for that alpha
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub gamma_per_alpha: BTreeMap<String, f64>,
    /// max over gamma of TPR - FPR (balanced-accuracy formulation)
    pub advantage: f64,
    /// (fpr, tpr) staircase from (0,0) to (1,1)
    pub roc_points: Vec<(f64, f64)>,
}

pub fn alpha_key(alpha: f64) -> String {
    format!("{alpha:e}")
}

/// Rank-statistic AUC with ties counted one half.
fn auc(members: &[f64], nonmembers: &[f64]) -> f64 {
    // lower score means member, so a correctly ordered pair has m < n
    let mut sorted_non = nonmembers.to_vec();
    sorted_non.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut total = 0.0;
    for &m in members {
        let below = sorted_non.partition_point(|&x| x < m);
        let at_or_below = sorted_non.partition_point(|&x| x <= m);
        let greater = sorted_non.len() - at_or_below;
        let ties = at_or_below - below;
        total += greater as f64 + 0.5 * ties as f64;
    }
    total / (members.len() * nonmembers.len()) as f64
}

/// Metrics over scored records. When `calibration` is given the per-alpha
/// thresholds come from it; otherwise from the records' own nonmembers.
pub fn mia_metrics(
    records: &[ScoreRecord],
    alphas: &[f64],
    calibration: Option<&[f64]>,
) -> Result<MiaReport> {
    let members: Vec<f64> =
        records.iter().filter(|r| r.label == MiaLabel::Member).map(|r| r.signal()).collect();
    let nonmembers: Vec<f64> =
        records.iter().filter(|r| r.label == MiaLabel::Nonmember).map(|r| r.signal()).collect();
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::InvalidInput("mia metrics need both classes".into()));
    }

    let calib: Vec<f64> = match calibration {
        Some(c) if !c.is_empty() => c.to_vec(),
        _ => nonmembers.clone(),
    };

    let mut tpr_at_fpr = BTreeMap::new();
    let mut gamma_per_alpha = BTreeMap::new();
    for &a in alphas {
        let g = pick_threshold(&calib, a)?;
        let tpr = members.iter().filter(|&&m| m < g).count() as f64 / members.len() as f64;
        tpr_at_fpr.insert(alpha_key(a), tpr);
        gamma_per_alpha.insert(alpha_key(a), g);
    }

    // sweep every observed signal as a threshold for the ROC and advantage
    let mut cuts: Vec<f64> = records.iter().map(|r| r.signal()).collect();
    cuts.push(f64::INFINITY);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let mut roc_points = vec![(0.0, 0.0)];
    let mut advantage: f64 = 0.0;
    for &g in &cuts {
        let tpr = members.iter().filter(|&&m| m < g).count() as f64 / members.len() as f64;
        let fpr = nonmembers.iter().filter(|&&s| s < g).count() as f64 / nonmembers.len() as f64;
        advantage = advantage.max(tpr - fpr);
        if roc_points.last() != Some(&(fpr, tpr)) {
            roc_points.push((fpr, tpr));
        }
    }
    if roc_points.last() != Some(&(1.0, 1.0)) {
        roc_points.push((1.0, 1.0));
    }

    Ok(MiaReport {
        auc: auc(&members, &nonmembers),
        tpr_at_fpr,
        gamma_per_alpha,
        advantage,
        roc_points,
    })
}

/// CSV form of score records for downstream plotting.
pub fn records_to_csv(records: &[ScoreRecord]) -> String {
    let mut out = String::from("sample_id,loss_target,loss_ref,label\n");
    for r in records {
        let lr = r.loss_ref.map(|v| v.to_string()).unwrap_or_default();
        let label = match r.label {
            MiaLabel::Member => "member",
            MiaLabel::Nonmember => "nonmember",
        };
        out.push_str(&format!("{},{},{},{}\n", r.sample_id, r.loss_target, lr, label));
    }
    out
}
