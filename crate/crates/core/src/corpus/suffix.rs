//! Suffix array + LCP over flattened token streams, backing duplication
//! statistics and L-gram deduplication.
//!
//! Streams are `i64`: corpus tokens are non-negative, and each document is
//! terminated by a unique negative sentinel so no gram can cross documents.


use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SuffixArrayIndex {
    pub text: Vec<i64>,
    /// permutation of [0, |text|) sorting suffixes lexicographically
    pub sa: Vec<usize>,
    /// lcp[i] = LCP(suffix sa[i-1], suffix sa[i]); lcp[0] = 0
    pub lcp: Vec<usize>,
}

/// A repeated L-gram with its exact occurrence count and stream positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DupGram {
    pub gram: Vec<i64>,
    pub count: usize,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossDedupMode {
    /// drop every span whose L-gram occurs in the other corpus
    Dedup,
    /// keep only such spans
    Dup,
}

/// Flatten samples into one stream with a unique negative sentinel after
/// each document. Returns the stream and, per position, the index of the
/// owning sample (`usize::MAX` for sentinels).
pub fn flatten_with_sentinels(samples: &[TokenSequence]) -> (Vec<i64>, Vec<usize>) {
    let total: usize = samples.iter().map(|s| s.len() + 1).sum();
    let mut text = Vec::with_capacity(total);
    let mut owner = Vec::with_capacity(total);
    for (doc, s) in samples.iter().enumerate() {
        for &id in &s.ids {
            text.push(id as i64);
            owner.push(doc);
        }
        text.push(-(doc as i64) - 1);
        owner.push(usize::MAX);
    }
    (text, owner)
}

/// Sort-all-suffixes construction with Kasai's LCP. Quadratic worst case,
/// fine at desk scale.
pub fn build_suffix_array(stream: &[i64]) -> Result<SuffixArrayIndex> {
    if stream.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = stream.len();
    let mut sa: Vec<usize> = (0..n).collect();
    sa.sort_by(|&a, &b| stream[a..].cmp(&stream[b..]));

    let mut rank = vec![0usize; n];
    for (i, &p) in sa.iter().enumerate() {
        rank[p] = i;
    }
    let mut lcp = vec![0usize; n];
    let mut k = 0usize;
    for i in 0..n {
        let r = rank[i];
        if r > 0 {
            let j = sa[r - 1];
            while i + k < n && j + k < n && stream[i + k] == stream[j + k] {
                k += 1;
            }
            lcp[r] = k;
        } else {
            k = 0;
        }
        k = k.saturating_sub(1);
    }
    Ok(SuffixArrayIndex { text: stream.to_vec(), sa, lcp })
}

impl SuffixArrayIndex {
    /// Exact occurrence count of `pattern` via binary search over the
    /// suffix array. Overlapping occurrences all count.
    pub fn count_occurrences(&self, pattern: &[i64]) -> usize {
        self.occurrence_range(pattern).len()
    }

    fn occurrence_range(&self, pattern: &[i64]) -> std::ops::Range<usize> {
        let lo = self.sa.partition_point(|&p| {
            let suf = &self.text[p..];
            let m = pattern.len().min(suf.len());
            suf[..m] < pattern[..m] || (suf.len() < pattern.len() && suf[..m] == pattern[..m])
        });
        let hi = self.sa.partition_point(|&p| {
            let suf = &self.text[p..];
            let m = pattern.len().min(suf.len());
            suf[..m] <= pattern[..m] && !(suf.len() < pattern.len() && suf[..m] == pattern[..m])
        });
        lo..hi
    }
}

/// Every L-gram occurring at least twice, with exact counts and positions.
/// Sentinels are unique, so sentinel-crossing grams can never repeat.
pub fn find_duplicates(index: &SuffixArrayIndex, l: usize) -> Result<Vec<DupGram>> {
    if l == 0 {
        return Err(Error::InvalidInput("L must be >= 1".into()));
    }
    if l > index.text.len() {
        return Ok(Vec::new());
    }
    let n = index.sa.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        // run of suffixes sharing their first l tokens
        let mut j = i + 1;
        while j < n && index.lcp[j] >= l {
            j += 1;
        }
        if j - i >= 2 {
            let start = index.sa[i];
            // lcp >= l guarantees suffix length >= l for every run member
            let gram = index.text[start..start + l].to_vec();
            let mut positions: Vec<usize> = index.sa[i..j].to_vec();
            positions.sort_unstable();
            out.push(DupGram { count: j - i, gram, positions });
        }
        i = j;
    }
    out.sort_by(|a, b| a.gram.cmp(&b.gram));
    Ok(out)
}

/// Remove repeated L-grams: the earliest occurrence in corpus order is kept,
/// later spans are excised and the remainders spliced. Passes repeat until
/// no L-gram occurs twice. Emptied samples are dropped.
pub fn deduplicate(samples: &[TokenSequence], l: usize) -> Result<Vec<TokenSequence>> {
    if l == 0 {
        return Err(Error::InvalidInput("L must be >= 1".into()));
    }
    let mut current: Vec<TokenSequence> = samples.to_vec();
    loop {
        if current.is_empty() {
            return Ok(current);
        }
        let (text, owner) = flatten_with_sentinels(&current);
        let index = build_suffix_array(&text)?;
        let dups = find_duplicates(&index, l)?;
        if dups.is_empty() {
            return Ok(current);
        }
        let mut remove = vec![false; text.len()];
        for d in &dups {
            for &p in &d.positions[1..] {
                for q in p..p + l {
                    remove[q] = true;
                }
            }
        }
        let mut rebuilt: Vec<TokenSequence> = Vec::with_capacity(current.len());
        let mut kept: Vec<Vec<u32>> = vec![Vec::new(); current.len()];
        for (pos, &tok) in text.iter().enumerate() {
            if owner[pos] != usize::MAX && !remove[pos] {
                kept[owner[pos]].push(tok as u32);
            }
        }
        for (doc, ids) in kept.into_iter().enumerate() {
            if !ids.is_empty() {
                rebuilt.push(TokenSequence { ids, source_id: current[doc].source_id });
            }
        }
        if rebuilt.iter().map(|s| s.len()).sum::<usize>()
            == current.iter().map(|s| s.len()).sum::<usize>()
        {
            // nothing excised, avoid spinning
            return Ok(rebuilt);
        }
        current = rebuilt;
    }
}

/// Cross-corpus span filtering of `d_aux` against `d_ft`.
pub fn cross_dedup(
    d_aux: &[TokenSequence],
    d_ft: &[TokenSequence],
    l: usize,
    mode: CrossDedupMode,
) -> Result<Vec<TokenSequence>> {
    if l == 0 {
        return Err(Error::InvalidInput("L must be >= 1".into()));
    }
    if d_aux.is_empty() || d_ft.is_empty() {
        return Ok(match mode {
            CrossDedupMode::Dedup => d_aux.to_vec(),
            CrossDedupMode::Dup => Vec::new(),
        });
    }
    let (ft_text, _) = flatten_with_sentinels(d_ft);
    let ft_index = build_suffix_array(&ft_text)?;

    let matched_starts = |ids: &[u32]| -> Vec<usize> {
        let mut starts = Vec::new();
        if ids.len() >= l {
            for start in 0..=ids.len() - l {
                let gram: Vec<i64> = ids[start..start + l].iter().map(|&t| t as i64).collect();
                if ft_index.count_occurrences(&gram) > 0 {
                    starts.push(start);
                }
            }
        }
        starts
    };

    let mut out = Vec::new();
    for sample in d_aux {
        match mode {
            CrossDedupMode::Dedup => {
                // splicing can create fresh overlapping grams, iterate to fixpoint
                let mut ids = sample.ids.clone();
                loop {
                    let starts = matched_starts(&ids);
                    if starts.is_empty() {
                        break;
                    }
                    let mut marked = vec![false; ids.len()];
                    for s in starts {
                        for q in s..s + l {
                            marked[q] = true;
                        }
                    }
                    ids = ids
                        .iter()
                        .zip(&marked)
                        .filter(|(_, &m)| !m)
                        .map(|(&t, _)| t)
                        .collect();
                }
                if !ids.is_empty() {
                    out.push(TokenSequence { ids, source_id: sample.source_id });
                }
            }
            CrossDedupMode::Dup => {
                // merge runs of consecutive matched starts so every L-gram of
                // the emitted span is itself a match
                let starts = matched_starts(&sample.ids);
                let mut i = 0;
                while i < starts.len() {
                    let mut j = i;
                    while j + 1 < starts.len() && starts[j + 1] == starts[j] + 1 {
                        j += 1;
                    }
                    out.push(TokenSequence {
                        ids: sample.ids[starts[i]..starts[j] + l].to_vec(),
                        source_id: sample.source_id,
                    });
                    i = j + 1;
                }
            }
        }
    }
    Ok(out)
}

/// Total occurrence counts of the sample's L-grams inside D_ft and D_aux.
pub fn dup_stats(
    sample: &TokenSequence,
    d_ft: &[TokenSequence],
    d_aux: &[TokenSequence],
    l: usize,
) -> Result<(usize, usize)> {
    if l == 0 {
        return Err(Error::InvalidInput("L must be >= 1".into()));
    }
    let count_in = |corpus: &[TokenSequence]| -> Result<usize> {
        if corpus.is_empty() || sample.len() < l {
            return Ok(0);
        }
        let (text, _) = flatten_with_sentinels(corpus);
        let index = build_suffix_array(&text)?;
        let mut total = 0;
        for start in 0..=sample.len() - l {
            let gram: Vec<i64> = sample.ids[start..start + l].iter().map(|&t| t as i64).collect();
            total += index.count_occurrences(&gram);
        }
        Ok(total)
    };
    Ok((count_in(d_ft)?, count_in(d_aux)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn seqs(texts: &[&str]) -> Vec<TokenSequence> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| TokenSequence {
                ids: t.split_whitespace().map(|w| w.bytes().next().unwrap() as u32).collect(),
                source_id: i as u64,
            })
            .collect()
    }

    /// independent sort-all-suffixes oracle
    fn naive_sa(stream: &[i64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..stream.len()).collect();
        idx.sort_by(|&a, &b| stream[a..].cmp(&stream[b..]));
        idx
    }

    /// quadratic sliding-window duplicate oracle
    fn naive_duplicates(stream: &[i64], l: usize) -> Vec<(Vec<i64>, usize)> {
        let mut counts: HashMap<Vec<i64>, usize> = HashMap::new();
        if l <= stream.len() {
            for start in 0..=stream.len() - l {
                let gram = stream[start..start + l].to_vec();
                *counts.entry(gram).or_default() += 1;
            }
        }
        let mut out: Vec<(Vec<i64>, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= 2).collect();
        out.sort();
        out
    }

    #[test]
    fn banana_suffix_array() {
        let stream: Vec<i64> = "banana".bytes().map(|b| b as i64).collect();
        let index = build_suffix_array(&stream).unwrap();
        assert_eq!(index.sa, vec![5, 3, 1, 0, 4, 2]);
    }

    #[test]
    fn single_token_stream() {
        let index = build_suffix_array(&[7]).unwrap();
        assert_eq!(index.sa, vec![0]);
        assert_eq!(index.lcp, vec![0]);
    }

    #[test]
    fn empty_stream_errors() {
        assert!(build_suffix_array(&[]).is_err());
    }

    #[test]
    fn find_duplicates_abc_twice() {
        let samples = seqs(&["a b c a b c"]);
        let (text, _) = flatten_with_sentinels(&samples);
        let index = build_suffix_array(&text).unwrap();
        let dups = find_duplicates(&index, 3).unwrap();
        assert_eq!(dups.len(), 1);
        assert_eq!(dups[0].count, 2);
        assert_eq!(dups[0].gram, vec![b'a' as i64, b'b' as i64, b'c' as i64]);
    }

    #[test]
    fn find_duplicates_overlapping() {
        let samples = seqs(&["a a a a"]);
        let (text, _) = flatten_with_sentinels(&samples);
        let index = build_suffix_array(&text).unwrap();
        let dups = find_duplicates(&index, 2).unwrap();
        assert_eq!(dups.len(), 1);
        assert_eq!(dups[0].count, 3); // overlapping occurrences all counted
    }

    #[test]
    fn find_duplicates_all_distinct() {
        let samples = seqs(&["a b c d e"]);
        let (text, _) = flatten_with_sentinels(&samples);
        let index = build_suffix_array(&text).unwrap();
        for l in 1..=5 {
            assert!(find_duplicates(&index, l).unwrap().is_empty());
        }
    }

    #[test]
    fn find_duplicates_longer_than_stream() {
        let index = build_suffix_array(&[1, 2, 3]).unwrap();
        assert!(find_duplicates(&index, 10).unwrap().is_empty());
    }

    #[test]
    fn no_sentinel_crossing_grams() {
        // "a b" at the end of doc0 and start of doc1 would collide without sentinels
        let samples = seqs(&["x a", "b y a", "b z"]);
        let (text, _) = flatten_with_sentinels(&samples);
        let index = build_suffix_array(&text).unwrap();
        let dups = find_duplicates(&index, 2).unwrap();
        assert!(dups.is_empty());
    }

    #[test]
    fn dedup_excises_later_span() {
        let samples = seqs(&["a b c d", "x a b c y"]);
        let out = deduplicate(&samples, 3).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].ids, vec![b'a' as u32, b'b' as u32, b'c' as u32, b'd' as u32]);
        assert_eq!(out[1].ids, vec![b'x' as u32, b'y' as u32]);
    }

    #[test]
    fn dedup_no_duplicates_is_identity() {
        let samples = seqs(&["a b c", "d e f"]);
        let out = deduplicate(&samples, 2).unwrap();
        assert_eq!(out, samples);
    }

    #[test]
    fn dedup_verbatim_copy_one_survivor() {
        let samples = seqs(&["p q r", "p q r"]);
        let out = deduplicate(&samples, 3).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].source_id, 0);
    }

    #[test]
    fn cross_dedup_drop_and_keep() {
        let d_ft = seqs(&["p q r"]);
        let d_aux = seqs(&["p q r s"]);
        let dropped = cross_dedup(&d_aux, &d_ft, 3, CrossDedupMode::Dedup).unwrap();
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].ids, vec![b's' as u32]);
        let kept = cross_dedup(&d_aux, &d_ft, 3, CrossDedupMode::Dup).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].ids, vec![b'p' as u32, b'q' as u32, b'r' as u32]);
    }

    #[test]
    fn cross_dedup_disjoint_vocab_unchanged() {
        let d_ft = seqs(&["a b c"]);
        let d_aux = seqs(&["x y z w"]);
        let out = cross_dedup(&d_aux, &d_ft, 2, CrossDedupMode::Dedup).unwrap();
        assert_eq!(out, d_aux);
    }

    #[test]
    fn dup_stats_absent_and_self() {
        let d_ft = seqs(&["a b c", "d e f"]);
        let d_aux = seqs(&["g h i"]);
        let absent = TokenSequence { ids: vec![900, 901, 902], source_id: 99 };
        assert_eq!(dup_stats(&absent, &d_ft, &d_aux, 2).unwrap(), (0, 0));
        let member = d_ft[0].clone();
        let (c_self, _) = dup_stats(&member, &d_ft, &d_aux, member.len()).unwrap();
        assert!(c_self >= 1);
    }

    #[test]
    fn dup_stats_matches_quadratic_oracle() {
        let d_ft = seqs(&["a b a b a", "b a b"]);
        let d_aux = seqs(&["a b c a b"]);
        let sample = seqs(&["a b a"]).remove(0);
        let l = 2;
        let oracle = |corpus: &[TokenSequence]| {
            let mut total = 0;
            for start in 0..=sample.len() - l {
                let gram = &sample.ids[start..start + l];
                for s in corpus {
                    if s.len() >= l {
                        for w in 0..=s.len() - l {
                            if &s.ids[w..w + l] == gram {
                                total += 1;
                            }
                        }
                    }
                }
            }
            total
        };
        let (c_self, c_aux) = dup_stats(&sample, &d_ft, &d_aux, l).unwrap();
        assert_eq!(c_self, oracle(&d_ft));
        assert_eq!(c_aux, oracle(&d_aux));
    }

    proptest! {
        #[test]
        fn sa_matches_naive_oracle(tokens in prop::collection::vec(0i64..6, 1..200)) {
            let index = build_suffix_array(&tokens).unwrap();
            prop_assert_eq!(&index.sa, &naive_sa(&tokens));
            // adjacent suffix order is nondecreasing by definition
            for w in index.sa.windows(2) {
                prop_assert!(tokens[w[0]..] <= tokens[w[1]..]);
            }
        }

        #[test]
        fn duplicates_match_quadratic_oracle(
            tokens in prop::collection::vec(0i64..4, 1..120),
            l in 1usize..5,
        ) {
            let index = build_suffix_array(&tokens).unwrap();
            let got: Vec<(Vec<i64>, usize)> = find_duplicates(&index, l)
                .unwrap()
                .into_iter()
                .map(|d| (d.gram, d.count))
                .collect();
            prop_assert_eq!(got, naive_duplicates(&tokens, l));
        }

        #[test]
        fn dedup_is_idempotent_and_clean(
            raw in prop::collection::vec(prop::collection::vec(0u32..4, 1..20), 1..6),
            l in 1usize..4,
        ) {
            let samples: Vec<TokenSequence> = raw
                .into_iter()
                .enumerate()
                .map(|(i, ids)| TokenSequence { ids, source_id: i as u64 })
                .collect();
            let once = deduplicate(&samples, l).unwrap();
            // no L-gram occurs twice afterwards
            if !once.is_empty() {
                let (text, _) = flatten_with_sentinels(&once);
                let index = build_suffix_array(&text).unwrap();
                prop_assert!(find_duplicates(&index, l).unwrap().is_empty());
            }
            let twice = deduplicate(&once, l).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn cross_dedup_modes_are_complementary(
            aux_raw in prop::collection::vec(prop::collection::vec(0u32..4, 1..15), 1..4),
            ft_raw in prop::collection::vec(prop::collection::vec(0u32..4, 1..15), 1..4),
            l in 1usize..4,
        ) {
            let to_seqs = |raw: Vec<Vec<u32>>| raw
                .into_iter()
                .enumerate()
                .map(|(i, ids)| TokenSequence { ids, source_id: i as u64 })
                .collect::<Vec<_>>();
            let d_aux = to_seqs(aux_raw);
            let d_ft = to_seqs(ft_raw);
            let ft_grams: std::collections::HashSet<Vec<u32>> = d_ft
                .iter()
                .flat_map(|s| s.ids.windows(l).map(|w| w.to_vec()).collect::<Vec<_>>())
                .collect();
            // dedup output shares zero L-grams with d_ft
            for s in cross_dedup(&d_aux, &d_ft, l, CrossDedupMode::Dedup).unwrap() {
                for w in s.ids.windows(l) {
                    prop_assert!(!ft_grams.contains(w));
                }
            }
            // dup output's every L-gram occurs in d_ft
            for s in cross_dedup(&d_aux, &d_ft, l, CrossDedupMode::Dup).unwrap() {
                for w in s.ids.windows(l) {
                    prop_assert!(ft_grams.contains(w));
                }
            }
        }
    }
}
