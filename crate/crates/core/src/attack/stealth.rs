//! Victim-side audit of a released backbone: perplexity gap, verbatim
//! memorization rate, and a loss-score membership AUC.

use serde::{Deserialize, Serialize};

use crate::attack::mia::{mia_metrics, score_dataset, MiaLabel};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{Decode, Model};

/// Paper-style default regeneration suffix length.
pub const DEFAULT_SUFFIX_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealthReport {
    /// PPL(d_val) - PPL(d_ft); large positive values suggest d_ft leakage
    pub s_gap: f64,
    /// fraction of d_ft samples whose k-prefix greedily regenerates the
    /// next `suffix_len` tokens exactly
    pub s_mem: f64,
    /// loss-score AUC separating d_ft from d_non; ~0.5 means stealthy
    pub s_mia: f64,
    pub k: usize,
    pub suffix_len: usize,
}

pub fn audit_stealth(
    theta_pre: &Model,
    d_ft: &[TokenSequence],
    d_val: &[TokenSequence],
    d_non: &[TokenSequence],
    k: usize,
    suffix_len: usize,
) -> Result<StealthReport> {
    if k < 1 || suffix_len < 1 {
        return Err(Error::InvalidInput("k and suffix_len must be >= 1".into()));
    }
    if d_ft.is_empty() || d_val.is_empty() || d_non.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let s_gap = theta_pre.perplexity(d_val)? - theta_pre.perplexity(d_ft)?;

    let mut eligible = 0usize;
    let mut regenerated = 0usize;
    for s in d_ft {
        if s.ids.len() < k + suffix_len {
            continue;
        }
        eligible += 1;
        let want = &s.ids[k..k + suffix_len];
        let g = theta_pre.generate(&s.ids[..k], k + suffix_len, &Decode::Greedy, 0, None)?;
        if g.ids.len() >= k + suffix_len && &g.ids[k..k + suffix_len] == want {
            regenerated += 1;
        }
    }
    let s_mem = if eligible == 0 { 0.0 } else { regenerated as f64 / eligible as f64 };

    let mut records = score_dataset(theta_pre, None, d_ft, MiaLabel::Member)?;
    records.extend(score_dataset(theta_pre, None, d_non, MiaLabel::Nonmember)?);
    let s_mia = mia_metrics(&records, &[0.1], None)?.auc;

    Ok(StealthReport { s_gap, s_mem, s_mia, k, suffix_len })
}
