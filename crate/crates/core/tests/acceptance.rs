//! End-to-end acceptance suite. Each test prints exactly one PASS/FAIL line
//! for its criterion before asserting, so a full run yields a ten-line
//! scoreboard. Tolerances are pinned inline next to each check.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use privlab::attack::{
    audit_stealth, exposure, mia_metrics, score_dataset, MiaLabel, ScoreRecord,
};
use privlab::corpus::{
    build_suffix_array, build_vocab, cross_dedup, deduplicate, dup_stats, generate_markov,
    insert_canary, split_corpus, tokenize_corpus, Canary, CrossDedupMode, MarkovConfig,
    SplitBundle, TokenSequence, HOLE,
};
use privlab::craft::{craft, craft_basic, craft_stealthy, CraftPlan, CraftStrategy, RewindTarget};
use privlab::game::{emit_reports, run_game, ExperimentConfig};
use privlab::model::{Model, ModelConfig};
use privlab::peft::{attach_adapter, attach_lora, PeftConfig, PeftKind};
use privlab::train::{clip_per_sample, dp_step, finetune, DpConfig, Optimizer, StopRule, TrainConfig};

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

// Shared world: order-1 Markov corpus, 2-layer d64 model, benign backbone
// pretrained on a public corpus drawn from an unrelated chain.
fn world_diff(n_samples: usize, split_seed: u64) -> (SplitBundle, Model) {
    let mk = MarkovConfig {
        n_samples,
        sample_len: 16,
        vocab_words: 200,
        branching: 3,
        dup_rate: 0.0,
        seed: 5,
    };
    let texts = generate_markov(&mk);
    let vocab = build_vocab(&texts, 512).unwrap();
    let tokens = tokenize_corpus(&vocab, &texts);
    let splits = split_corpus(&tokens, split_seed, 1.0, 0.2).unwrap();
    let fresh = Model::new(ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 64,
        d_head: 16,
        vocab_size: vocab.size(),
        context_len: 18,
        seed: 9,
    })
    .unwrap();
    let public = generate_markov(&MarkovConfig { seed: 777, ..mk });
    let public_tokens = tokenize_corpus(&vocab, &public);
    let benign = craft_basic(&fresh, &public_tokens, 2, 0.05, 777, 8).unwrap();
    (splits, benign)
}

// World for the trade-off criterion: each sample repeated once so attention
// (copying) carries signal, public data drawn from the same chain so the
// backbone is genuinely useful on the private distribution.
fn world_same_chain(split_seed: u64) -> (SplitBundle, Model) {
    let n_samples = 240;
    let mk = MarkovConfig {
        n_samples,
        sample_len: 8,
        vocab_words: 200,
        branching: 3,
        dup_rate: 0.0,
        seed: 5,
    };
    let double = |ts: Vec<String>| -> Vec<String> {
        ts.into_iter().map(|t| format!("{t} {t}")).collect()
    };
    let texts = double(generate_markov(&mk));
    let vocab = build_vocab(&texts, 512).unwrap();
    let tokens = tokenize_corpus(&vocab, &texts);
    let splits = split_corpus(&tokens, split_seed, 1.0, 0.2).unwrap();
    let fresh = Model::new(ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 64,
        d_head: 16,
        vocab_size: vocab.size(),
        context_len: 18,
        seed: 9,
    })
    .unwrap();
    // later draws of the same chain: in-distribution yet disjoint from every split
    let all = generate_markov(&MarkovConfig { n_samples: n_samples + 480, ..mk });
    let public = double(all[n_samples..].to_vec());
    let public_tokens = tokenize_corpus(&vocab, &public);
    let benign = craft_basic(&fresh, &public_tokens, 12, 0.05, 777, 8).unwrap();
    (splits, benign)
}

fn victim_cfg(seed: u64, kind: PeftKind, epochs: usize, lr: f64, dp: Option<DpConfig>) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size: 8,
        stop: StopRule::ByEpoch { epochs },
        weight_decay: 0.0,
        dp,
        peft: PeftConfig { kind, ..PeftConfig::default() },
        seed,
        eval_every: 8,
        optimizer: Optimizer::Sgd,
    }
}

// Reference-calibrated AUC with half the nonmembers held out for threshold
// calibration, matching the game runner's split.
fn ref_auc(target: &Model, reference: &Model, splits: &SplitBundle) -> f64 {
    let half = splits.d_non.len() / 2;
    let (non_eval, non_calib) = splits.d_non.split_at(half);
    let mut rec = score_dataset(target, Some(reference), &splits.d_ft, MiaLabel::Member).unwrap();
    rec.extend(score_dataset(target, Some(reference), non_eval, MiaLabel::Nonmember).unwrap());
    let calib: Vec<f64> = score_dataset(target, Some(reference), non_calib, MiaLabel::Nonmember)
        .unwrap()
        .iter()
        .map(|r| r.signal())
        .collect();
    mia_metrics(&rec, &[1e-1], Some(&calib)).unwrap().auc
}

fn loss_tpr_at_10(target: &Model, splits: &SplitBundle) -> f64 {
    let half = splits.d_non.len() / 2;
    let (non_eval, non_calib) = splits.d_non.split_at(half);
    let mut rec = score_dataset(target, None, &splits.d_ft, MiaLabel::Member).unwrap();
    rec.extend(score_dataset(target, None, non_eval, MiaLabel::Nonmember).unwrap());
    let calib: Vec<f64> = score_dataset(target, None, non_calib, MiaLabel::Nonmember)
        .unwrap()
        .iter()
        .map(|r| r.signal())
        .collect();
    let rep = mia_metrics(&rec, &[1e-1], Some(&calib)).unwrap();
    rep.tpr_at_fpr["1e-1"]
}

// One seed of the amplification experiment: benign vs aux-warmed backbone,
// identical victim fine-tuning, both arms scored against their prescribed
// reference (the aux-trained model in both cases, since the benign arm's
// best available reference is trained the same way the attacker trains
// theirs).
fn amplification_seed(seed: u64, dp: Option<DpConfig>) -> (f64, f64) {
    let (splits, benign) = world_diff(240, 1000 + seed);
    let crafted = craft_basic(&benign, &splits.d_aux, 4, 0.05, 21, 8).unwrap();
    let tc = victim_cfg(42 + seed, PeftKind::Adapter, 10, 0.5, dp);
    let (ft_benign, _) = finetune(&benign, &splits.d_ft, &splits.d_val, &tc).unwrap();
    let (ft_crafted, _) = finetune(&crafted, &splits.d_ft, &splits.d_val, &tc).unwrap();
    (ref_auc(&ft_benign, &crafted, &splits), ref_auc(&ft_crafted, &crafted, &splits))
}

#[test]
fn criterion_01_gradient_correctness() {
    let t0 = Instant::now();
    let mut model = Model::new(ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        vocab_size: 16,
        context_len: 12,
        seed: 1,
    })
    .unwrap();
    attach_adapter(&mut model, 4, 11).unwrap();
    attach_lora(&mut model, 2, &["q".into(), "v".into()], 13).unwrap();
    model.params.set_all_trainable(true);

    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let batch: Vec<TokenSequence> = (0..3)
        .map(|i| TokenSequence::new((0..10).map(|_| rng.gen_range(0..16)).collect(), i))
        .collect();

    model.zero_grads();
    model.forward_loss(&batch).unwrap();
    model.backward().unwrap();
    let names: Vec<String> = model.params.names().cloned().collect();
    let analytic: Vec<(String, Vec<f64>)> = names
        .iter()
        .map(|n| {
            let t = model.params.get(n).unwrap();
            (n.clone(), t.grad.clone().unwrap_or_else(|| vec![0.0; t.len()]))
        })
        .collect();

    let eps = 1e-4;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let orig = model.params.get(name).unwrap().data[i];
            model.params.get_mut(name).unwrap().data[i] = orig + eps;
            let lp = model.forward_loss(&batch).unwrap();
            model.params.get_mut(name).unwrap().data[i] = orig - eps;
            let lm = model.forward_loss(&batch).unwrap();
            model.params.get_mut(name).unwrap().data[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{i}]");
            }
        }
    }

    // every parameter class must actually be covered
    let classes = ["embed.", "pos.", "block.0.attn", "block.0.mlp", "ln", "head.", ".adapter.", ".attn.lora_"];
    let covered = classes
        .iter()
        .all(|c| names.iter().any(|n| n.contains(c) || n.starts_with(c)));
    let elapsed = t0.elapsed();
    let ok = max_rel < 1e-3 && covered && elapsed.as_secs() < 60;
    println!(
        "criterion 01 gradient-correctness: {} (max rel err {max_rel:.2e} at {worst}, {} params, {:.1?})",
        verdict(ok),
        names.len(),
        elapsed
    );
    assert!(ok, "max rel err {max_rel} at {worst}, covered={covered}, elapsed={elapsed:?}");
}

fn auc_pairwise_oracle(records: &[ScoreRecord]) -> f64 {
    let members: Vec<f64> =
        records.iter().filter(|r| r.label == MiaLabel::Member).map(|r| r.signal()).collect();
    let nons: Vec<f64> =
        records.iter().filter(|r| r.label == MiaLabel::Nonmember).map(|r| r.signal()).collect();
    let mut total = 0.0;
    for &m in &members {
        for &n in &nons {
            if m < n {
                total += 1.0;
            } else if m == n {
                total += 0.5;
            }
        }
    }
    total / (members.len() * nons.len()) as f64
}

fn quadratic_gram_count(corpus: &[TokenSequence], gram: &[u32]) -> usize {
    corpus
        .iter()
        .map(|s| s.ids.windows(gram.len()).filter(|w| *w == gram).count())
        .sum()
}

#[test]
fn criterion_02_oracle_equivalences() {
    let mut rng = ChaCha12Rng::seed_from_u64(17);

    // AUC vs brute-force pairwise statistic, quantized scores to force ties
    let records: Vec<ScoreRecord> = (0..500)
        .map(|i| ScoreRecord {
            sample_id: i,
            loss_target: rng.gen_range(0..40) as f64 / 8.0,
            loss_ref: if i % 3 == 0 { Some(rng.gen_range(0..40) as f64 / 8.0) } else { None },
            label: if i % 2 == 0 { MiaLabel::Member } else { MiaLabel::Nonmember },
        })
        .collect();
    let fast = mia_metrics(&records, &[1e-1], None).unwrap().auc;
    let slow = auc_pairwise_oracle(&records);
    let auc_ok = (fast - slow).abs() <= 1e-12;

    // suffix array + LCP vs sort-all-suffixes on random streams
    let mut sa_ok = true;
    for len in [1usize, 2, 7, 50, 200] {
        let stream: Vec<i64> = (0..len).map(|_| rng.gen_range(0..4)).collect();
        let idx = build_suffix_array(&stream).unwrap();
        let mut oracle_sa: Vec<usize> = (0..len).collect();
        oracle_sa.sort_by(|&a, &b| stream[a..].cmp(&stream[b..]));
        let oracle_lcp: Vec<usize> = std::iter::once(0)
            .chain(oracle_sa.windows(2).map(|w| {
                stream[w[0]..]
                    .iter()
                    .zip(&stream[w[1]..])
                    .take_while(|(a, b)| a == b)
                    .count()
            }))
            .collect();
        sa_ok &= idx.sa == oracle_sa && idx.lcp == oracle_lcp;
    }

    // dup_stats vs quadratic window scan
    let corpus = |n: usize, r: &mut ChaCha12Rng| -> Vec<TokenSequence> {
        (0..n)
            .map(|i| {
                TokenSequence::new(
                    (0..r.gen_range(4..14)).map(|_| r.gen_range(0..5u32)).collect(),
                    i as u64,
                )
            })
            .collect()
    };
    let d_ft = corpus(12, &mut rng);
    let d_aux = corpus(10, &mut rng);
    let mut stats_ok = true;
    for l in [1usize, 2, 3] {
        for sample in &d_aux {
            let (in_ft, in_aux) = dup_stats(sample, &d_ft, &d_aux, l).unwrap();
            let mut oracle_ft = 0;
            let mut oracle_aux = 0;
            if sample.len() >= l {
                for w in sample.ids.windows(l) {
                    oracle_ft += quadratic_gram_count(&d_ft, w);
                    oracle_aux += quadratic_gram_count(&d_aux, w);
                }
            }
            stats_ok &= (in_ft, in_aux) == (oracle_ft, oracle_aux);
        }
    }

    // cross_dedup vs quadratic mirror of the documented span rules
    let mut cross_ok = true;
    for l in [2usize, 3] {
        let got_dedup = cross_dedup(&d_aux, &d_ft, l, CrossDedupMode::Dedup).unwrap();
        let got_dup = cross_dedup(&d_aux, &d_ft, l, CrossDedupMode::Dup).unwrap();
        let matched = |ids: &[u32]| -> Vec<usize> {
            if ids.len() < l {
                return Vec::new();
            }
            (0..=ids.len() - l)
                .filter(|&s| quadratic_gram_count(&d_ft, &ids[s..s + l]) > 0)
                .collect()
        };
        let mut want_dedup = Vec::new();
        let mut want_dup = Vec::new();
        for sample in &d_aux {
            let mut ids = sample.ids.clone();
            loop {
                let starts = matched(&ids);
                if starts.is_empty() {
                    break;
                }
                let mut marked = vec![false; ids.len()];
                for s in starts {
                    marked[s..s + l].iter_mut().for_each(|m| *m = true);
                }
                ids = ids.iter().zip(&marked).filter(|(_, &m)| !m).map(|(&t, _)| t).collect();
            }
            if !ids.is_empty() {
                want_dedup.push(TokenSequence { ids, source_id: sample.source_id });
            }
            let starts = matched(&sample.ids);
            let mut i = 0;
            while i < starts.len() {
                let mut j = i;
                while j + 1 < starts.len() && starts[j + 1] == starts[j] + 1 {
                    j += 1;
                }
                want_dup.push(TokenSequence {
                    ids: sample.ids[starts[i]..starts[j] + l].to_vec(),
                    source_id: sample.source_id,
                });
                i = j + 1;
            }
        }
        cross_ok &= got_dedup == want_dedup && got_dup == want_dup;
    }

    // deduplicate: output must be free of repeated L-grams (quadratic check),
    // token order preserved per document, and duplicate-free input unchanged
    let mut dedup_ok = true;
    for l in [2usize, 3] {
        let out = deduplicate(&d_ft, l).unwrap();
        let mut grams = Vec::new();
        for s in &out {
            for w in s.ids.windows(l) {
                grams.push(w.to_vec());
            }
        }
        let mut sorted = grams.clone();
        sorted.sort();
        sorted.dedup();
        dedup_ok &= sorted.len() == grams.len();
        let is_subseq = |needle: &[u32], hay: &[u32]| -> bool {
            let mut it = hay.iter();
            needle.iter().all(|n| it.any(|h| h == n))
        };
        for s in &out {
            let src = d_ft.iter().find(|o| o.source_id == s.source_id).unwrap();
            dedup_ok &= is_subseq(&s.ids, &src.ids);
        }
        dedup_ok &= deduplicate(&out, l).unwrap() == out;
    }

    let ok = auc_ok && sa_ok && stats_ok && cross_ok && dedup_ok;
    println!(
        "criterion 02 oracle-equivalences: {} (auc {auc_ok}, suffix {sa_ok}, dup_stats {stats_ok}, cross_dedup {cross_ok}, dedup {dedup_ok})",
        verdict(ok)
    );
    assert!(ok);
}

#[test]
fn criterion_03_mia_amplification() {
    let t0 = Instant::now();
    let mut diffs: Vec<f64> = (0..5).map(|s| {
        let (b, p) = amplification_seed(s, None);
        p - b
    }).collect();
    diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = diffs[2];
    let elapsed = t0.elapsed();
    let ok = median >= 0.05 && elapsed.as_secs() < 15 * 60;
    println!(
        "criterion 03 mia-amplification: {} (median AUC gain {median:+.4} over 5 seeds, need >= +0.05, {:.1?})",
        verdict(ok),
        elapsed
    );
    assert!(ok, "diffs {diffs:?}, elapsed {elapsed:?}");
}

#[test]
fn criterion_04_tradeoff_break() {
    let mut wins = 0;
    let mut detail = String::new();
    for seed in 0..5u64 {
        let (splits, benign) = world_same_chain(1000 + seed);
        let target = benign.perplexity(&splits.d_val).unwrap() * 1.02;
        let plan = CraftPlan {
            strategy: CraftStrategy::Lagging,
            use_aux: true,
            peft_hint: Some(PeftConfig { kind: PeftKind::Adapter, ..PeftConfig::default() }),
            e_pre: 1,
            lr_pre: 0.05,
            ..CraftPlan::benign()
        };
        let lagging = craft(&benign, &splits.d_aux, &plan).unwrap();
        let byperf = |m: &Model| {
            let cfg = TrainConfig {
                stop: StopRule::ByPerf { target_val_ppl: target, max_epochs: 15 },
                ..victim_cfg(42 + seed, PeftKind::Full, 0, 0.01, None)
            };
            finetune(m, &splits.d_ft, &splits.d_val, &cfg).unwrap().0
        };
        let tpr_b = loss_tpr_at_10(&byperf(&benign), &splits);
        let tpr_l = loss_tpr_at_10(&byperf(&lagging), &splits);
        if tpr_l >= tpr_b {
            wins += 1;
        }
        detail.push_str(&format!(" s{seed}:{tpr_b:.3}/{tpr_l:.3}"));
    }
    let ok = wins >= 4;
    println!(
        "criterion 04 tradeoff-break: {} (lagging TPR@10%FPR >= benign in {wins}/5 seeds at matched val ppl;{detail})",
        verdict(ok)
    );
    assert!(ok, "wins {wins}{detail}");
}

#[test]
fn criterion_05_stealthiness() {
    let (splits, benign) = world_diff(720, 1000);
    let hint = Some(PeftConfig { kind: PeftKind::Adapter, ..PeftConfig::default() });
    let plans = [
        ("basic", CraftPlan { strategy: CraftStrategy::Basic, e_pre: 4, lr_pre: 0.05, ..CraftPlan::benign() }),
        ("accelerated", CraftPlan {
            strategy: CraftStrategy::Accelerated,
            e_pre: 1,
            lr_pre: 0.05,
            peft_hint: hint.clone(),
            ..CraftPlan::benign()
        }),
        ("lagging", CraftPlan {
            strategy: CraftStrategy::Lagging,
            use_aux: true,
            e_pre: 1,
            lr_pre: 0.05,
            peft_hint: hint,
            ..CraftPlan::benign()
        }),
    ];
    let mut ok = true;
    let mut detail = String::new();
    for (name, plan) in plans {
        let m = craft(&benign, &splits.d_aux, &plan).unwrap();
        let rep = audit_stealth(&m, &splits.d_ft, &splits.d_val, &splits.d_non, 2, 10).unwrap();
        ok &= (0.45..=0.55).contains(&rep.s_mia);
        if name == "lagging" {
            ok &= rep.s_mem == 0.0;
        }
        detail.push_str(&format!(" {name}: s_mia {:.4} s_mem {:.4};", rep.s_mia, rep.s_mem));
    }
    println!("criterion 05 stealthiness: {} ({})", verdict(ok), detail.trim());
    assert!(ok, "{detail}");
}

#[test]
fn criterion_06_rewind_invariance() {
    let (splits, benign) = world_diff(60, 1000);
    let crafted = craft_basic(&benign, &splits.d_aux, 2, 0.05, 7, 8).unwrap();

    let total = craft_stealthy(&crafted, &benign, &[RewindTarget::All]).unwrap();
    let mut total_ok = true;
    for (name, t) in total.params.iter() {
        total_ok &= t.data == benign.params.get(name).unwrap().data;
    }

    let head_only = craft_stealthy(&crafted, &benign, &[RewindTarget::Head]).unwrap();
    let mut head_ok = true;
    let mut any_head_changed = false;
    for (name, t) in head_only.params.iter() {
        if name.starts_with("head.") {
            head_ok &= t.data == benign.params.get(name).unwrap().data;
            any_head_changed |= t.data != crafted.params.get(name).unwrap().data;
        } else {
            head_ok &= t.data == crafted.params.get(name).unwrap().data;
        }
    }

    let ok = total_ok && head_ok && any_head_changed;
    println!(
        "criterion 06 rewind-invariance: {} (total rewind bit-exact {total_ok}, head-only touches only head params {head_ok})",
        verdict(ok)
    );
    assert!(ok);
}

#[test]
fn criterion_07_exposure_math() {
    let t26 = 10.0 * 26f64.log2();
    let t10 = 10.0 * 10f64.log2();
    let thresholds_ok = (t26 - 47.0044).abs() < 1e-3 && (t10 - 33.2193).abs() < 1e-3;

    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let d_ft: Vec<TokenSequence> = (0..12)
        .map(|i| TokenSequence::new((0..10).map(|_| rng.gen_range(0..10u32)).collect(), i))
        .collect();
    let model = Model::new(ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        vocab_size: 12,
        context_len: 12,
        seed: 3,
    })
    .unwrap();
    let mut exposures = Vec::new();
    let mut final_rec = None;
    for reps in [1usize, 2, 4, 8] {
        let canary = Canary {
            template: vec![10, HOLE, 11],
            secret: vec![0, 1, 1, 0, 1, 0, 0, 1],
            alphabet: vec![0, 1],
            secret_len: 8,
            repetitions: reps,
            // extraction declared only when the secret ranks in the top two
            // of the 2^8 candidate space
            valid_threshold: 7.0,
        };
        let data = insert_canary(&d_ft, &canary).unwrap();
        let cfg = TrainConfig {
            eval_every: 10_000,
            ..victim_cfg(11, PeftKind::Full, 50, 0.01, None)
        };
        let (trained, _) = finetune(&model, &data, &[], &cfg).unwrap();
        let rec = exposure(&trained, &canary, None, 0).unwrap();
        exposures.push(rec.exposure);
        final_rec = Some(rec);
    }
    let final_rec = final_rec.unwrap();
    let monotone = exposures.windows(2).all(|w| w[1] >= w[0]);
    let strict = exposures[3] > exposures[0];
    let exceeded = final_rec.space_size == 256.0
        && final_rec.exposure > final_rec.valid_threshold
        && final_rec.extracted;
    let ok = thresholds_ok && monotone && strict && exceeded;
    println!(
        "criterion 07 exposure-math: {} (log2(26^10)={t26:.4}, log2(10^10)={t10:.4}, exposures {exposures:?} over reps [1,2,4,8], final rank {})",
        verdict(ok),
        final_rec.rank
    );
    assert!(ok, "thresholds {thresholds_ok}, exposures {exposures:?}, final {final_rec:?}");
}

#[test]
fn criterion_08_dp_mechanics() {
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    let clip = 1.0;

    // clipped norms never exceed C; vectors already inside the ball untouched
    let mut clip_ok = true;
    for _ in 0..200 {
        let g: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c = clip_per_sample(&g, clip).unwrap();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        clip_ok &= norm <= clip + 1e-12;
        let g_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if g_norm <= clip {
            clip_ok &= c == g;
        }
    }

    // sigma = 0: dp_step is exactly the mean of the clipped gradients
    let batch: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let got = dp_step(&batch, clip, 0.0, &mut ChaCha12Rng::seed_from_u64(0)).unwrap();
    let mut want = vec![0.0; 16];
    for g in &batch {
        for (w, c) in want.iter_mut().zip(clip_per_sample(g, clip).unwrap()) {
            *w += c;
        }
    }
    for w in want.iter_mut() {
        *w /= batch.len() as f64;
    }
    let mean_ok = got == want;

    // noise variance within 5% of sigma^2 C^2 / B^2 over 10^4 draws
    let sigma = 1.5;
    let b = 4usize;
    let zeros = vec![vec![0.0; 4]; b];
    let mut noise_rng = ChaCha12Rng::seed_from_u64(41);
    let mut samples = Vec::with_capacity(40_000);
    for _ in 0..10_000 {
        samples.extend(dp_step(&zeros, clip, sigma, &mut noise_rng).unwrap());
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / samples.len() as f64;
    let expected = sigma * sigma * clip * clip / (b * b) as f64;
    let var_ok = (var - expected).abs() / expected < 0.05;

    // DP noise shrinks the amplification margin on every tested seed
    let dp = Some(DpConfig { clip_norm: 1.0, noise_multiplier: 1.0, epsilon_label: "sigma=1".into() });
    let mut shrink_ok = true;
    let mut detail = String::new();
    for seed in 0..3 {
        let (b0, p0) = amplification_seed(seed, None);
        let (b1, p1) = amplification_seed(seed, dp.clone());
        shrink_ok &= (p1 - b1) < (p0 - b0);
        detail.push_str(&format!(" s{seed}:{:+.4}->{:+.4}", p0 - b0, p1 - b1));
    }

    let ok = clip_ok && mean_ok && var_ok && shrink_ok;
    println!(
        "criterion 08 dp-mechanics: {} (clip {clip_ok}, exact mean {mean_ok}, noise var {var:.6} vs {expected:.6}, margin shrinks{detail})",
        verdict(ok)
    );
    assert!(ok, "clip {clip_ok} mean {mean_ok} var {var_ok} shrink {shrink_ok}{detail}");
}

const GAME_CONFIG: &str = r#"
[corpus]
vocab_cap = 64
split_seed = 11
r_aux = 1.0
val_fraction = 0.2

[corpus.markov]
n_samples = 90
sample_len = 12
vocab_words = 60
branching = 3
dup_rate = 0.0
seed = 5

[model]
n_layers = 1
n_heads = 2
d_model = 8
d_head = 4
vocab_size = 64
context_len = 16
seed = 3

[pretrain]
epochs = 1
lr = 0.01
batch_size = 8
corpus_seed = 777

[craft]
strategy = "basic"
e_pre = 1
lr_pre = 0.02
seed = 21
batch_size = 8

[train]
lr = 0.05
batch_size = 8
seed = 3
eval_every = 4

[train.stop]
rule = "by_epoch"
epochs = 1

[train.peft]
kind = "adapter"

[attack]
eval_per_class = 16
stealth_suffix_len = 4

[attack.extraction]
n_gen = 20
keep_k = 8
max_len = 10
prefix_len = 2
n_prefixes = 4
seed = 9

[attack.extraction.decode]
kind = "sample"
temperature = 1.0
top_k = 10
"#;

#[test]
fn criterion_09_determinism() {
    let cfg = ExperimentConfig::from_toml_str(GAME_CONFIG).unwrap();
    let out_a = run_game(&cfg).unwrap();
    let out_b = run_game(&cfg).unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let files_a = emit_reports(&out_a, &cfg, dir_a.path()).unwrap();
    let files_b = emit_reports(&out_b, &cfg, dir_b.path()).unwrap();
    let mut ok = files_a.len() == files_b.len();
    let mut compared = 0;
    for (a, b) in files_a.iter().zip(&files_b) {
        ok &= a.file_name() == b.file_name();
        ok &= std::fs::read(a).unwrap() == std::fs::read(b).unwrap();
        compared += 1;
    }
    println!(
        "criterion 09 determinism: {} (rerun produced {compared} byte-identical report files)",
        verdict(ok)
    );
    assert!(ok);
}

#[test]
fn criterion_10_attach_identity() {
    let base = Model::new(ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        vocab_size: 24,
        context_len: 16,
        seed: 19,
    })
    .unwrap();
    let mut with_adapter = base.clone();
    attach_adapter(&mut with_adapter, 4, 31).unwrap();
    let mut with_lora = base.clone();
    attach_lora(&mut with_lora, 2, &["q".into(), "v".into(), "o".into()], 37).unwrap();

    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let mut max_diff = 0.0f64;
    for _ in 0..8 {
        let prefix: Vec<u32> = (0..rng.gen_range(1..12)).map(|_| rng.gen_range(0..24)).collect();
        let want = base.next_token_logits(&prefix).unwrap();
        for m in [&with_adapter, &with_lora] {
            let got = m.next_token_logits(&prefix).unwrap();
            for (w, g) in want.iter().zip(&got) {
                max_diff = max_diff.max((w - g).abs());
            }
        }
    }
    let ok = max_diff == 0.0;
    println!("criterion 10 attach-identity: {} (max abs logit diff {max_diff})", verdict(ok));
    assert!(ok);
}
