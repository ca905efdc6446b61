//! Untargeted extraction: generate from the fine-tuned model, deduplicate,
//! rank by membership signal, and measure overlap with the private split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_suffix_array, dup_stats, flatten_with_sentinels, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{Decode, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub n_gen: usize,
    pub max_len: usize,
    pub keep_k: usize,
    /// prefix length harvested from the auxiliary corpus
    pub prefix_len: usize,
    /// how many distinct top-frequency prefixes to cycle through
    pub n_prefixes: usize,
    pub decode: Decode,
    pub seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            n_gen: 1000,
            max_len: 24,
            keep_k: 100,
            prefix_len: 2,
            n_prefixes: 8,
            decode: Decode::Sample { temperature: 1.0, top_k: Some(40) },
            seed: 0,
        }
    }
}

/// Most frequent length-`prefix_len` grams in the auxiliary corpus, ties
/// broken lexicographically for determinism.
pub fn top_frequent_prefixes(
    d_aux: &[TokenSequence],
    prefix_len: usize,
    n_prefixes: usize,
) -> Result<Vec<Vec<u32>>> {
    if prefix_len == 0 || n_prefixes == 0 {
        return Err(Error::InvalidInput("prefix_len and n_prefixes must be >= 1".into()));
    }
    let mut counts: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    for s in d_aux {
        if s.ids.len() < prefix_len {
            continue;
        }
        for w in s.ids.windows(prefix_len) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(Vec<u32>, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(n_prefixes).map(|(g, _)| g).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionPool {
    pub kept: Vec<TokenSequence>,
    pub scores: Vec<f64>,
    /// reference signal was degenerate, ranking fell back to plain loss
    pub ranking_fallback: bool,
    pub n_generated: usize,
    pub n_after_dedup: usize,
}

/// Two-phase untargeted attack: sample `n_gen` continuations of frequent
/// auxiliary prefixes, drop exact duplicates, rank ascending by the
/// membership signal, keep the top `keep_k`.
pub fn run_extraction_untargeted(
    model: &Model,
    ref_model: Option<&Model>,
    prefixes: &[Vec<u32>],
    cfg: &ExtractionConfig,
) -> Result<ExtractionPool> {
    if prefixes.is_empty() {
        return Err(Error::InvalidInput("extraction needs at least one prefix".into()));
    }
    if cfg.n_gen < cfg.keep_k {
        return Err(Error::InvalidInput("n_gen must be >= keep_k".into()));
    }
    if let Some(r) = ref_model {
        if r.config.vocab_size != model.config.vocab_size {
            return Err(Error::VocabMismatch);
        }
    }
    let mut generations: Vec<TokenSequence> = Vec::with_capacity(cfg.n_gen);
    for i in 0..cfg.n_gen {
        let prefix = &prefixes[i % prefixes.len()];
        let g = model.generate(prefix, cfg.max_len, &cfg.decode, cfg.seed ^ (i as u64), None)?;
        generations.push(TokenSequence { ids: g.ids, source_id: i as u64 });
    }
    // exact-match dedup, first occurrence wins
    let mut seen: Vec<&[u32]> = Vec::new();
    let mut unique: Vec<TokenSequence> = Vec::new();
    for g in &generations {
        if !seen.contains(&g.ids.as_slice()) {
            seen.push(&g.ids);
            unique.push(g.clone());
        }
    }

    let mut scored: Vec<(f64, f64, TokenSequence)> = Vec::with_capacity(unique.len());
    for g in &unique {
        let target = model.sequence_nll(&g.ids)?;
        let signal = match ref_model {
            Some(r) => target - r.sequence_nll(&g.ids)?,
            None => target,
        };
        scored.push((signal, target, g.clone()));
    }
    // all-zero calibrated signals carry no ranking information
    let degenerate = ref_model.is_some()
        && scored.iter().all(|(s, _, _)| s.abs() < 1e-12);
    if degenerate {
        for entry in scored.iter_mut() {
            entry.0 = entry.1;
        }
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.2.source_id.cmp(&b.2.source_id)));
    let keep = cfg.keep_k.min(scored.len());
    Ok(ExtractionPool {
        scores: scored[..keep].iter().map(|(s, _, _)| *s).collect(),
        kept: scored[..keep].iter().map(|(_, _, g)| g.clone()).collect(),
        ranking_fallback: degenerate,
        n_generated: cfg.n_gen,
        n_after_dedup: unique.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDupCounts {
    pub sample_id: u64,
    /// occurrences of this generation's L-grams across the whole pool
    pub c_ext: usize,
    /// occurrences in the fine-tuning split
    pub c_dup_self: usize,
    /// occurrences in the auxiliary split
    pub c_dup_aux: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    /// L (stringified) -> fraction of generated L-grams found in d_ft
    pub p_ext: BTreeMap<String, f64>,
    /// tokens covered by d_ft-matching L-grams that never occur in d_aux,
    /// measured at the smallest L
    pub n_ext: usize,
    pub per_sample: Vec<SampleDupCounts>,
    pub ranking_fallback: bool,
}

/// Overlap metrics between kept generations and the private/auxiliary splits.
pub fn extraction_metrics(
    pool: &ExtractionPool,
    d_ft: &[TokenSequence],
    d_aux: &[TokenSequence],
    l_list: &[usize],
) -> Result<ExtractionReport> {
    if l_list.is_empty() || l_list.iter().any(|&l| l == 0) {
        return Err(Error::InvalidInput("l_list must hold positive gram lengths".into()));
    }
    if pool.kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (ft_text, _) = flatten_with_sentinels(d_ft);
    let ft_index = build_suffix_array(&ft_text)?;
    let aux_index = if d_aux.is_empty() {
        None
    } else {
        let (aux_text, _) = flatten_with_sentinels(d_aux);
        Some(build_suffix_array(&aux_text)?)
    };

    let mut p_ext = BTreeMap::new();
    for &l in l_list {
        let mut grams = 0usize;
        let mut hits = 0usize;
        for g in &pool.kept {
            if g.ids.len() < l {
                continue;
            }
            for w in g.ids.windows(l) {
                grams += 1;
                let gram: Vec<i64> = w.iter().map(|&t| t as i64).collect();
                if ft_index.count_occurrences(&gram) > 0 {
                    hits += 1;
                }
            }
        }
        let ratio = if grams == 0 { 0.0 } else { hits as f64 / grams as f64 };
        p_ext.insert(l.to_string(), ratio);
    }

    let l_min = *l_list.iter().min().unwrap();
    let mut n_ext = 0usize;
    for g in &pool.kept {
        if g.ids.len() < l_min {
            continue;
        }
        let mut covered = vec![false; g.ids.len()];
        for (start, w) in g.ids.windows(l_min).enumerate() {
            let gram: Vec<i64> = w.iter().map(|&t| t as i64).collect();
            let in_ft = ft_index.count_occurrences(&gram) > 0;
            let in_aux = aux_index.as_ref().map(|i| i.count_occurrences(&gram) > 0).unwrap_or(false);
            if in_ft && !in_aux {
                for c in covered[start..start + l_min].iter_mut() {
                    *c = true;
                }
            }
        }
        n_ext += covered.iter().filter(|&&c| c).count();
    }

    let mut per_sample = Vec::with_capacity(pool.kept.len());
    for g in &pool.kept {
        let (c_dup_self, c_dup_aux) = dup_stats(g, d_ft, d_aux, l_min)?;
        let (c_ext, _) = dup_stats(g, &pool.kept, &[], l_min)?;
        per_sample.push(SampleDupCounts { sample_id: g.source_id, c_ext, c_dup_self, c_dup_aux });
    }

    Ok(ExtractionReport { p_ext, n_ext, per_sample, ranking_fallback: pool.ranking_fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::new(ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            vocab_size: 9,
            context_len: 12,
            seed: 8,
        })
        .unwrap()
    }

    fn pool(seqs: &[Vec<u32>]) -> ExtractionPool {
        ExtractionPool {
            kept: seqs
                .iter()
                .enumerate()
                .map(|(i, s)| TokenSequence::new(s.clone(), i as u64))
                .collect(),
            scores: vec![0.0; seqs.len()],
            ranking_fallback: false,
            n_generated: seqs.len(),
            n_after_dedup: seqs.len(),
        }
    }

    #[test]
    fn top_prefixes_by_frequency() {
        let aux = vec![
            TokenSequence::new(vec![1, 2, 3, 1, 2], 0),
            TokenSequence::new(vec![1, 2, 4], 1),
            TokenSequence::new(vec![7, 8], 2),
        ];
        let got = top_frequent_prefixes(&aux, 2, 2).unwrap();
        assert_eq!(got[0], vec![1, 2]); // appears 3 times
        assert_eq!(got.len(), 2);
        assert!(top_frequent_prefixes(&[], 2, 2).is_err());
    }

    #[test]
    fn generation_pool_is_deterministic_and_dedupped() {
        let m = model();
        let cfg = ExtractionConfig { n_gen: 30, keep_k: 10, max_len: 8, ..Default::default() };
        let prefixes = vec![vec![1u32, 2], vec![3u32, 4]];
        let a = run_extraction_untargeted(&m, None, &prefixes, &cfg).unwrap();
        let b = run_extraction_untargeted(&m, None, &prefixes, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.n_after_dedup <= a.n_generated);
        // kept sequences are unique
        for (i, x) in a.kept.iter().enumerate() {
            for y in &a.kept[i + 1..] {
                assert_ne!(x.ids, y.ids);
            }
        }
        // scores ascend
        for w in a.scores.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn self_reference_falls_back_to_loss_ranking() {
        let m = model();
        let cfg = ExtractionConfig { n_gen: 12, keep_k: 5, max_len: 6, ..Default::default() };
        let prefixes = vec![vec![1u32, 2]];
        let with_self = run_extraction_untargeted(&m, Some(&m), &prefixes, &cfg).unwrap();
        assert!(with_self.ranking_fallback);
        let plain = run_extraction_untargeted(&m, None, &prefixes, &cfg).unwrap();
        assert_eq!(with_self.kept, plain.kept);
    }

    #[test]
    fn keep_budget_enforced() {
        let m = model();
        let cfg = ExtractionConfig { n_gen: 4, keep_k: 5, max_len: 6, ..Default::default() };
        assert!(run_extraction_untargeted(&m, None, &[vec![1]], &cfg).is_err());
    }

    #[test]
    fn verbatim_generations_give_full_p_ext() {
        let d_ft = vec![
            TokenSequence::new(vec![1, 2, 3, 4, 5], 0),
            TokenSequence::new(vec![6, 7, 8, 1, 2], 1),
        ];
        let p = pool(&[vec![1, 2, 3, 4, 5], vec![6, 7, 8, 1, 2]]);
        let rep = extraction_metrics(&p, &d_ft, &[], &[2, 5]).unwrap();
        assert_eq!(rep.p_ext["2"], 1.0);
        assert_eq!(rep.p_ext["5"], 1.0);
        // every token sits in a d_ft-only gram
        assert_eq!(rep.n_ext, 10);
    }

    #[test]
    fn disjoint_vocab_gives_zero() {
        let d_ft = vec![TokenSequence::new(vec![1, 2, 3], 0)];
        let p = pool(&[vec![7, 8, 7, 8]]);
        let rep = extraction_metrics(&p, &d_ft, &[], &[2]).unwrap();
        assert_eq!(rep.p_ext["2"], 0.0);
        assert_eq!(rep.n_ext, 0);
    }

    #[test]
    fn aux_overlap_removes_n_ext_credit() {
        let d_ft = vec![TokenSequence::new(vec![1, 2, 3, 4], 0)];
        let d_aux = vec![TokenSequence::new(vec![1, 2], 1)];
        // gram (1,2) is in both splits; gram (3,4) only in d_ft
        let p = pool(&[vec![1, 2, 9, 3, 4]]);
        let rep = extraction_metrics(&p, &d_ft, &d_aux, &[2]).unwrap();
        assert_eq!(rep.n_ext, 2);
        assert!((rep.p_ext["2"] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn per_sample_counts_match_quadratic_oracle() {
        let d_ft = vec![TokenSequence::new(vec![1, 2, 3, 1, 2], 0)];
        let d_aux = vec![TokenSequence::new(vec![2, 3], 0)];
        let p = pool(&[vec![1, 2, 3], vec![1, 2, 1, 2]]);
        let rep = extraction_metrics(&p, &d_ft, &d_aux, &[2]).unwrap();

        let count_in = |gram: &[u32], seqs: &[Vec<u32>]| -> usize {
            seqs.iter()
                .map(|s| s.windows(gram.len()).filter(|w| *w == gram).count())
                .sum()
        };
        let pool_seqs: Vec<Vec<u32>> = p.kept.iter().map(|s| s.ids.clone()).collect();
        let ft_seqs = vec![vec![1u32, 2, 3, 1, 2]];
        let aux_seqs = vec![vec![2u32, 3]];
        for (rec, g) in rep.per_sample.iter().zip(&p.kept) {
            let mut c_ext = 0;
            let mut c_self = 0;
            let mut c_aux = 0;
            for w in g.ids.windows(2) {
                c_ext += count_in(w, &pool_seqs);
                c_self += count_in(w, &ft_seqs);
                c_aux += count_in(w, &aux_seqs);
            }
            assert_eq!(rec.c_ext, c_ext);
            assert_eq!(rec.c_dup_self, c_self);
            assert_eq!(rec.c_dup_aux, c_aux);
        }
    }
}
