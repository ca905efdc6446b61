//! Secret-sharer canaries: a templated sample with a secret slot, inserted
//! into the fine-tuning corpus a configurable number of times.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

/// Marker for the secret slot inside a canary template.
pub const HOLE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Canary {
    /// token sequence with exactly one `HOLE` marker
    pub template: Vec<i64>,
    /// the true secret filling the hole, `secret_len` tokens drawn from the alphabet
    pub secret: Vec<u32>,
    /// candidate alphabet (token ids); candidate space = alphabet.len()^secret_len
    pub alphabet: Vec<u32>,
    pub secret_len: usize,
    pub repetitions: usize,
    /// exposure above this counts as reliably extracted
    pub valid_threshold: f64,
}

impl Canary {
    pub fn space_size(&self) -> f64 {
        (self.alphabet.len() as f64).powi(self.secret_len as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let holes = self.template.iter().filter(|&&t| t == HOLE).count();
        if holes != 1 {
            return Err(Error::InvalidInput(format!(
                "canary template must contain exactly one hole, found {holes}"
            )));
        }
        if self.secret.len() != self.secret_len {
            return Err(Error::InvalidInput(format!(
                "secret length {} does not match template arity {}",
                self.secret.len(),
                self.secret_len
            )));
        }
        if !self.secret.iter().all(|s| self.alphabet.contains(s)) {
            return Err(Error::InvalidInput("secret contains tokens outside the alphabet".into()));
        }
        Ok(())
    }

    /// Template with the hole replaced by the given candidate tokens.
    pub fn fill(&self, candidate: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.template.len() - 1 + candidate.len());
        for &t in &self.template {
            if t == HOLE {
                out.extend_from_slice(candidate);
            } else {
                out.push(t as u32);
            }
        }
        out
    }
}

/// Append `repetitions` copies of the filled canary as distinct samples.
pub fn insert_canary(d_ft: &[TokenSequence], canary: &Canary) -> Result<Vec<TokenSequence>> {
    if canary.repetitions < 1 {
        return Err(Error::InvalidInput("canary repetitions must be >= 1".into()));
    }
    canary.validate()?;
    let filled = canary.fill(&canary.secret);
    let mut out = d_ft.to_vec();
    let base_id = out.iter().map(|s| s.source_id).max().unwrap_or(0) + 1;
    for r in 0..canary.repetitions {
        out.push(TokenSequence { ids: filled.clone(), source_id: base_id + r as u64 });
    }
    Ok(out)
}
