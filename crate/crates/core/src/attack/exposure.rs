//! Targeted canary exposure: rank the true secret among all candidate
//! fills by model NLL.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Canary;
use crate::error::{Error, Result};
use crate::model::Model;

/// Candidate spaces above this size are rank-estimated by sampling.
pub const EXPOSURE_ENUM_LIMIT: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureRecord {
    pub secret: Vec<u32>,
    pub rank: u64,
    pub space_size: f64,
    /// log2 |R| - log2 rank; maximal (= log2 |R|) iff rank 1
    pub exposure: f64,
    pub valid_threshold: f64,
    pub extracted: bool,
    /// rank came from candidate sampling rather than full enumeration
    pub estimated: bool,
}

fn candidate_nll(model: &Model, canary: &Canary, candidate: &[u32]) -> Result<f64> {
    model.sequence_nll(&canary.fill(candidate))
}

/// Rank the true secret against the candidate space. Ties rank the true
/// secret last (pessimistic for the attacker). Spaces beyond
/// `EXPOSURE_ENUM_LIMIT` are sampled with `sample_budget` uniform draws.
pub fn exposure(
    model: &Model,
    canary: &Canary,
    sample_budget: Option<usize>,
    seed: u64,
) -> Result<ExposureRecord> {
    canary.validate()?;
    let space = canary.space_size();
    let secret_nll = candidate_nll(model, canary, &canary.secret)?;
    let a = canary.alphabet.len();

    let (rank, estimated) = if space <= EXPOSURE_ENUM_LIMIT {
        let total = space as u64;
        let mut not_better = 1u64; // the secret itself
        let mut idx = vec![0usize; canary.secret_len];
        let mut candidate = vec![canary.alphabet[0]; canary.secret_len];
        for _ in 0..total {
            for (c, &i) in candidate.iter_mut().zip(&idx) {
                *c = canary.alphabet[i];
            }
            if candidate != canary.secret {
                let nll = candidate_nll(model, canary, &candidate)?;
                if nll <= secret_nll {
                    not_better += 1;
                }
            }
            // odometer increment over the alphabet
            for slot in idx.iter_mut().rev() {
                *slot += 1;
                if *slot < a {
                    break;
                }
                *slot = 0;
            }
        }
        (not_better, false)
    } else {
        let budget = sample_budget.ok_or_else(|| {
            Error::InvalidInput(format!(
                "candidate space {space:.3e} exceeds the enumeration limit; provide a sample budget"
            ))
        })?;
        if budget == 0 {
            return Err(Error::InvalidInput("sample budget must be >= 1".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut at_or_below = 0usize;
        for _ in 0..budget {
            let candidate: Vec<u32> =
                (0..canary.secret_len).map(|_| canary.alphabet[rng.gen_range(0..a)]).collect();
            if candidate == canary.secret {
                continue;
            }
            if candidate_nll(model, canary, &candidate)? <= secret_nll {
                at_or_below += 1;
            }
        }
        let frac = at_or_below as f64 / budget as f64;
        ((1.0 + space * frac).round().max(1.0) as u64, true)
    };

    let exposure = space.log2() - (rank as f64).log2();
    Ok(ExposureRecord {
        secret: canary.secret.clone(),
        rank,
        space_size: space,
        exposure,
        valid_threshold: canary.valid_threshold,
        extracted: exposure > canary.valid_threshold,
        estimated,
    })
}
