//! Tokenization, dataset splitting, canary insertion and duplication
//! analysis over token streams.
//!
//! The tokenizer is whitespace word-level with a frequency-capped vocab and
//! an `<unk>` slot. Samples are one per line in UTF-8 corpus files.

mod canary;
mod suffix;

pub use canary::{insert_canary, Canary, HOLE};
pub use suffix::{
    build_suffix_array, cross_dedup, deduplicate, dup_stats, find_duplicates, flatten_with_sentinels,
    CrossDedupMode, DupGram, SuffixArrayIndex,
};

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";

/// Frequency-capped word vocabulary. Ids are contiguous in `[0, size)` and
/// `<unk>` always occupies the last id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    pub token_to_id: HashMap<String, u32>,
    pub id_to_token: Vec<String>,
    pub unk_id: u32,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        *self.token_to_id.get(token).unwrap_or(&self.unk_id)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }
}

/// A tokenized sample. `source_id` is an opaque identifier carried through
/// splits and dedup so membership can be tracked.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source_id: u64,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, source_id: u64) -> Self {
        TokenSequence { ids, source_id }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Dataset partitions: fine-tuning, auxiliary, non-member and validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitBundle {
    pub d_ft: Vec<TokenSequence>,
    pub d_aux: Vec<TokenSequence>,
    pub d_non: Vec<TokenSequence>,
    pub d_val: Vec<TokenSequence>,
    pub r_aux: f64,
}

/// Most-frequent whitespace tokens up to `cap - 1`, plus `<unk>`.
/// Ties are broken by first occurrence order.
pub fn build_vocab(texts: &[String], cap: usize) -> Result<Vocab> {
    if cap < 2 {
        return Err(Error::InvalidInput(format!("vocab cap must be >= 2, got {cap}")));
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new(); // token -> (count, first_pos)
    let mut pos = 0usize;
    for text in texts {
        for tok in text.split_whitespace() {
            let entry = counts.entry(tok).or_insert((0, pos));
            entry.0 += 1;
            pos += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize, usize)> =
        counts.into_iter().map(|(t, (c, p))| (t, c, p)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(cap - 1);

    let mut id_to_token: Vec<String> = ranked.iter().map(|(t, _, _)| t.to_string()).collect();
    id_to_token.push(UNK_TOKEN.to_string());
    let unk_id = (id_to_token.len() - 1) as u32;
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    Ok(Vocab { token_to_id, id_to_token, unk_id })
}

pub fn tokenize(vocab: &Vocab, text: &str, source_id: u64) -> TokenSequence {
    let ids = text.split_whitespace().map(|t| vocab.id(t)).collect();
    TokenSequence { ids, source_id }
}

pub fn tokenize_corpus(vocab: &Vocab, texts: &[String]) -> Vec<TokenSequence> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| tokenize(vocab, t, i as u64))
        .collect()
}

/// Deterministic three-way split into D_ft / D_aux / D_non with a validation
/// carve-out from the D_ft third. D_aux's third is subsampled down to
/// `round(r_aux * |D_ft|)`.
pub fn split_corpus(
    samples: &[TokenSequence],
    seed: u64,
    r_aux: f64,
    val_fraction: f64,
) -> Result<SplitBundle> {
    if !(0.0..=1.0).contains(&r_aux) {
        return Err(Error::InvalidInput(format!("r_aux must be in [0,1], got {r_aux}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidInput(format!(
            "val_fraction must be in [0,1), got {val_fraction}"
        )));
    }
    if samples.len() < 3 {
        return Err(Error::NotEnoughSamples { needed: 3, got: samples.len() });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let third = samples.len() / 3;
    let ft_third: Vec<usize> = order[0..third].to_vec();
    let aux_third: Vec<usize> = order[third..2 * third].to_vec();
    let non_third: Vec<usize> = order[2 * third..3 * third].to_vec();

    let n_val = ((ft_third.len() as f64) * val_fraction).round() as usize;
    let (val_idx, ft_idx) = ft_third.split_at(n_val);

    let n_aux = ((ft_idx.len() as f64) * r_aux).round() as usize;
    if ft_idx.is_empty() || n_aux > aux_third.len() {
        return Err(Error::NotEnoughSamples { needed: 3 * (n_aux.max(1)), got: samples.len() });
    }
    let aux_idx = &aux_third[..n_aux];

    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let d_ft = pick(ft_idx);
    let d_aux = pick(aux_idx);
    Ok(SplitBundle {
        r_aux: d_aux.len() as f64 / d_ft.len() as f64,
        d_ft,
        d_aux,
        d_non: pick(&non_third),
        d_val: pick(val_idx),
    })
}

/// Seeded Markov babble for tests and bundled demos. `dup_rate` controls how
/// often a previously emitted sample is repeated verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovConfig {
    pub n_samples: usize,
    pub sample_len: usize,
    pub vocab_words: usize,
    pub branching: usize,
    pub dup_rate: f64,
    pub seed: u64,
}

impl Default for MarkovConfig {
    fn default() -> Self {
        MarkovConfig {
            n_samples: 300,
            sample_len: 24,
            vocab_words: 400,
            branching: 4,
            dup_rate: 0.0,
            seed: 0,
        }
    }
}

/// Generate raw text samples from a random sparse Markov chain over a
/// synthetic word list (`w0`, `w1`, ...).
pub fn generate_markov(cfg: &MarkovConfig) -> Vec<String> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let v = cfg.vocab_words.max(2);
    // per-word successor lists: the chain is sparse so bigrams repeat,
    // which is what makes memorization measurable at toy scale
    let successors: Vec<Vec<usize>> = (0..v)
        .map(|_| (0..cfg.branching.max(1)).map(|_| rng.gen_range(0..v)).collect())
        .collect();
    let mut out: Vec<String> = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        if !out.is_empty() && rng.gen::<f64>() < cfg.dup_rate {
            let i = rng.gen_range(0..out.len());
            out.push(out[i].clone());
            continue;
        }
        let mut w = rng.gen_range(0..v);
        let mut words = Vec::with_capacity(cfg.sample_len);
        for _ in 0..cfg.sample_len {
            words.push(format!("w{w}"));
            let next = &successors[w];
            w = next[rng.gen_range(0..next.len())];
        }
        out.push(words.join(" "));
    }
    out
}

use rand::Rng;
