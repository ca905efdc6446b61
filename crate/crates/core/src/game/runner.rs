//! Two-arm comparison runner: the same victim pipeline applied to a benign
//! and a crafted backbone, followed by identical attacks.

use serde::{Deserialize, Serialize};

use crate::attack::{
    audit_stealth, exposure, extraction_metrics, mia_metrics, run_extraction_untargeted,
    score_dataset, top_frequent_prefixes, ExposureRecord, ExtractionReport, MiaLabel, MiaReport,
    StealthReport,
};
use crate::corpus::{
    build_vocab, generate_markov, insert_canary, split_corpus, tokenize_corpus, SplitBundle,
    TokenSequence, Vocab,
};
use crate::craft::{craft, craft_basic};
use crate::error::{Error, Result};
use crate::game::config::{ExperimentConfig, Margins};
use crate::model::Model;
use crate::train::{finetune, EvalRecord, TrainHistory};

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::InvalidInput(format!("stage `{name}` failed: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    /// plain loss-threshold attack
    pub mia_loss: MiaReport,
    /// reference-calibrated attack (Full-Ref for benign, Base-Ref for crafted)
    pub mia_ref: MiaReport,
    pub extraction: ExtractionReport,
    /// audit of the released backbone, before victim fine-tuning
    pub stealth: StealthReport,
    pub exposure: Option<ExposureRecord>,
    pub val_ppl: f64,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub metric: String,
    pub benign: f64,
    pub crafted: f64,
    pub margin_required: f64,
    pub amplified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameOutcome {
    pub config_hash: String,
    pub benign: ArmResult,
    pub crafted: ArmResult,
    pub verdicts: Vec<Verdict>,
}

/// Corpus, splits, and the public backbone shared by both arms.
pub struct World {
    pub vocab: Vocab,
    pub splits: SplitBundle,
    pub benign_backbone: Model,
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    let texts = match &cfg.corpus.file {
        Some(path) => {
            let raw = std::fs::read_to_string(path)?;
            raw.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
        }
        None => generate_markov(&cfg.corpus.markov),
    };
    let vocab = stage("vocab", build_vocab(&texts, cfg.corpus.vocab_cap))?;
    let tokens = tokenize_corpus(&vocab, &texts);
    let mut splits = stage(
        "split",
        split_corpus(&tokens, cfg.corpus.split_seed, cfg.corpus.r_aux, cfg.corpus.val_fraction),
    )?;
    if let Some(canary) = &cfg.attack.canary {
        splits.d_ft = stage("canary", insert_canary(&splits.d_ft, canary))?;
    }

    // the public backbone both arms receive, warmed on a disjoint corpus
    let mut model_cfg = cfg.model;
    model_cfg.vocab_size = vocab.size();
    let fresh = stage("init", Model::new(model_cfg))?;
    let public_texts = generate_markov(&crate::corpus::MarkovConfig {
        seed: cfg.pretrain.corpus_seed,
        ..cfg.corpus.markov.clone()
    });
    let public_tokens = tokenize_corpus(&vocab, &public_texts);
    let benign_backbone = if cfg.pretrain.epochs == 0 {
        fresh
    } else {
        stage(
            "pretrain",
            craft_basic(
                &fresh,
                &public_tokens,
                cfg.pretrain.epochs,
                cfg.pretrain.lr,
                cfg.pretrain.corpus_seed,
                cfg.pretrain.batch_size,
            ),
        )?
    };
    Ok(World { vocab, splits, benign_backbone })
}

fn subsample<'a>(data: &'a [TokenSequence], cap: usize) -> &'a [TokenSequence] {
    if cap == 0 || cap >= data.len() {
        data
    } else {
        &data[..cap]
    }
}

/// Victim fine-tuning plus the full attack battery for one backbone.
pub fn run_arm(
    name: &str,
    theta_pre: &Model,
    ref_model: &Model,
    splits: &SplitBundle,
    cfg: &ExperimentConfig,
) -> Result<ArmResult> {
    let stealth = stage(
        "stealth",
        audit_stealth(
            theta_pre,
            &splits.d_ft,
            &splits.d_val,
            &splits.d_non,
            cfg.attack.stealth_k,
            cfg.attack.stealth_suffix_len,
        ),
    )?;

    let (theta_ft, history) =
        stage("finetune", finetune(theta_pre, &splits.d_ft, &splits.d_val, &cfg.train))?;
    let val_ppl = stage("eval", theta_ft.perplexity(&splits.d_val))?;

    // nonmembers split in half: first for evaluation, second for calibration
    let half = splits.d_non.len() / 2;
    let (non_eval, non_calib) = splits.d_non.split_at(half.max(1).min(splits.d_non.len() - 1));
    let cap = cfg.attack.eval_per_class;
    let members = subsample(&splits.d_ft, cap);
    let non_eval = subsample(non_eval, cap);

    let mut loss_records = score_dataset(&theta_ft, None, members, MiaLabel::Member)?;
    loss_records.extend(score_dataset(&theta_ft, None, non_eval, MiaLabel::Nonmember)?);
    let loss_calib: Vec<f64> = score_dataset(&theta_ft, None, non_calib, MiaLabel::Nonmember)?
        .iter()
        .map(|r| r.signal())
        .collect();
    let mia_loss =
        stage("mia", mia_metrics(&loss_records, &cfg.attack.alphas, Some(&loss_calib)))?;

    let mut ref_records = score_dataset(&theta_ft, Some(ref_model), members, MiaLabel::Member)?;
    ref_records.extend(score_dataset(&theta_ft, Some(ref_model), non_eval, MiaLabel::Nonmember)?);
    let ref_calib: Vec<f64> =
        score_dataset(&theta_ft, Some(ref_model), non_calib, MiaLabel::Nonmember)?
            .iter()
            .map(|r| r.signal())
            .collect();
    let mia_ref = stage("mia", mia_metrics(&ref_records, &cfg.attack.alphas, Some(&ref_calib)))?;

    let prefixes = stage(
        "extract",
        top_frequent_prefixes(
            &splits.d_aux,
            cfg.attack.extraction.prefix_len,
            cfg.attack.extraction.n_prefixes,
        ),
    )?;
    let pool = stage(
        "extract",
        run_extraction_untargeted(&theta_ft, Some(ref_model), &prefixes, &cfg.attack.extraction),
    )?;
    let extraction = stage(
        "extract",
        extraction_metrics(&pool, &splits.d_ft, &splits.d_aux, &cfg.attack.l_list),
    )?;

    let exposure_rec = match &cfg.attack.canary {
        Some(c) => Some(stage(
            "exposure",
            exposure(&theta_ft, c, cfg.attack.canary_sample_budget, cfg.train.seed),
        )?),
        None => None,
    };

    Ok(ArmResult {
        name: name.to_string(),
        mia_loss,
        mia_ref,
        extraction,
        stealth,
        exposure: exposure_rec,
        val_ppl,
        history,
    })
}

/// Two result sets are comparable only when their configs agree on
/// everything except how the backbone was produced.
pub fn arms_comparable(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<()> {
    let strip = |c: &ExperimentConfig| {
        let mut c = c.clone();
        c.craft = crate::craft::CraftPlan::benign();
        c.config_hash()
    };
    if strip(a) != strip(b) {
        return Err(Error::ConfigMismatch(
            "arm configs differ beyond the craft plan".into(),
        ));
    }
    Ok(())
}

/// Fractional training step at which the validation perplexity first
/// crosses `target`, by piecewise-linear interpolation between evals.
/// `None` when the history never reaches the target.
pub fn interpolate_step_at_ppl(records: &[EvalRecord], target: f64) -> Option<f64> {
    let first = records.first()?;
    if first.val_ppl <= target {
        return Some(first.step as f64);
    }
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.val_ppl > target && b.val_ppl <= target {
            let span = a.val_ppl - b.val_ppl;
            let frac = if span <= 0.0 { 1.0 } else { (a.val_ppl - target) / span };
            return Some(a.step as f64 + frac * (b.step - a.step) as f64);
        }
    }
    None
}

/// Per-metric amplification verdicts (Def. 1 style: crafted arm must beat
/// the benign arm by at least the margin). When the victim used a
/// perplexity-target stop rule both arms halt at the same utility level,
/// so the TPR verdict doubles as the matched-perplexity trade-off check.
pub fn compare(benign: &ArmResult, crafted: &ArmResult, margins: &Margins) -> Vec<Verdict> {
    let tpr_key = crate::attack::alpha_key(1e-1);
    let pick_tpr = |r: &MiaReport| r.tpr_at_fpr.get(&tpr_key).copied().unwrap_or(0.0);
    let entries: [(&str, f64, f64, f64); 4] = [
        ("mia_ref_auc", benign.mia_ref.auc, crafted.mia_ref.auc, margins.auc),
        ("mia_loss_auc", benign.mia_loss.auc, crafted.mia_loss.auc, margins.auc),
        ("mia_ref_advantage", benign.mia_ref.advantage, crafted.mia_ref.advantage, margins.auc),
        ("tpr_at_1e-1_loss", pick_tpr(&benign.mia_loss), pick_tpr(&crafted.mia_loss), margins.tpr),
    ];
    entries
        .iter()
        .map(|&(metric, b, p, m)| Verdict {
            metric: metric.to_string(),
            benign: b,
            crafted: p,
            margin_required: m,
            amplified: p > b + m,
        })
        .collect()
}

/// Full protocol: shared corpus and victim config, two backbones, identical
/// attacks, amplification verdicts.
pub fn run_game(cfg: &ExperimentConfig) -> Result<GameOutcome> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let released = stage("craft", craft(&world.benign_backbone, &world.splits.d_aux, &cfg.craft))?;

    // benign arm calibrates against a reference fully fine-tuned on d_aux;
    // the crafted arm uses its released backbone as the reference
    let full_ref = stage(
        "full-ref",
        craft_basic(
            &world.benign_backbone,
            &world.splits.d_aux,
            cfg.craft.e_pre.max(1),
            cfg.craft.lr_pre,
            cfg.craft.seed,
            cfg.craft.batch_size,
        ),
    )?;

    let benign = run_arm("benign", &world.benign_backbone, &full_ref, &world.splits, cfg)?;
    let crafted = run_arm("crafted", &released, &released, &world.splits, cfg)?;
    let verdicts = compare(&benign, &crafted, &cfg.margins);

    Ok(GameOutcome { config_hash: cfg.config_hash(), benign, crafted, verdicts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::MarkovConfig;
    use crate::craft::{CraftPlan, CraftStrategy};
    use crate::game::config::{AttackSpec, CorpusSpec, PretrainSpec};
    use crate::model::ModelConfig;
    use crate::peft::PeftConfig;
    use crate::train::{Optimizer, StopRule, TrainConfig};

    fn tiny_game_config() -> ExperimentConfig {
        ExperimentConfig {
            corpus: CorpusSpec {
                markov: MarkovConfig {
                    n_samples: 90,
                    sample_len: 12,
                    vocab_words: 60,
                    branching: 3,
                    dup_rate: 0.0,
                    seed: 5,
                },
                file: None,
                vocab_cap: 64,
                split_seed: 1,
                r_aux: 1.0,
                val_fraction: 0.2,
            },
            model: ModelConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 8,
                d_head: 4,
                vocab_size: 64,
                context_len: 14,
                seed: 9,
            },
            pretrain: PretrainSpec { epochs: 1, lr: 0.01, batch_size: 8, corpus_seed: 42 },
            craft: CraftPlan { strategy: CraftStrategy::Basic, e_pre: 1, lr_pre: 0.02, ..CraftPlan::benign() },
            train: TrainConfig {
                lr: 0.05,
                batch_size: 8,
                stop: StopRule::ByEpoch { epochs: 2 },
                weight_decay: 0.0,
                dp: None,
                peft: PeftConfig::default(),
                seed: 3,
                eval_every: 100,
                optimizer: Optimizer::Sgd,
            },
            attack: AttackSpec {
                extraction: crate::attack::ExtractionConfig {
                    n_gen: 20,
                    keep_k: 8,
                    max_len: 10,
                    ..Default::default()
                },
                eval_per_class: 16,
                stealth_suffix_len: 4,
                ..AttackSpec::default()
            },
            margins: Default::default(),
            output_dir: None,
        }
    }

    #[test]
    fn game_runs_and_is_deterministic() {
        let cfg = tiny_game_config();
        let a = run_game(&cfg).unwrap();
        let b = run_game(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.config_hash, cfg.config_hash());
        assert_eq!(a.verdicts.len(), 4);
        assert!(a.benign.val_ppl.is_finite());
    }

    #[test]
    fn identical_arms_are_never_amplified() {
        let cfg = tiny_game_config();
        let world = build_world(&cfg).unwrap();
        let full_ref = craft_basic(&world.benign_backbone, &world.splits.d_aux, 1, 0.02, 0, 8).unwrap();
        let arm = run_arm("benign", &world.benign_backbone, &full_ref, &world.splits, &cfg).unwrap();
        let verdicts = compare(&arm, &arm, &cfg.margins);
        assert!(verdicts.iter().all(|v| !v.amplified));
        assert!(verdicts.iter().all(|v| v.benign == v.crafted));
    }

    #[test]
    fn comparable_iff_only_craft_differs() {
        let a = tiny_game_config();
        let mut b = a.clone();
        b.craft.strategy = CraftStrategy::Lagging;
        b.craft.e_pre = 3;
        assert!(arms_comparable(&a, &b).is_ok());
        b.train.seed += 1;
        assert!(arms_comparable(&a, &b).is_err());
    }

    #[test]
    fn interpolation_matches_piecewise_linear_oracle() {
        let rec = |step: usize, val_ppl: f64| EvalRecord {
            step,
            epoch: 0,
            train_ppl: val_ppl,
            val_ppl,
            checkpoint_ref: format!("step-{step}"),
        };
        let hist = vec![rec(10, 40.0), rec(20, 30.0), rec(30, 10.0)];
        // target 25 sits a quarter of the way down the 30 -> 10 segment
        let got = interpolate_step_at_ppl(&hist, 25.0).unwrap();
        assert!((got - 22.5).abs() < 1e-12, "got {got}");
        // already below target at the first eval
        assert_eq!(interpolate_step_at_ppl(&hist, 50.0), Some(10.0));
        // never reached
        assert_eq!(interpolate_step_at_ppl(&hist, 5.0), None);
        assert_eq!(interpolate_step_at_ppl(&[], 5.0), None);
        // exact hit on an eval point
        let got = interpolate_step_at_ppl(&hist, 30.0).unwrap();
        assert!((got - 20.0).abs() < 1e-12);
    }

    #[test]
    fn scripted_reports_compare_by_margin() {
        let cfg = tiny_game_config();
        let world = build_world(&cfg).unwrap();
        let full_ref = craft_basic(&world.benign_backbone, &world.splits.d_aux, 1, 0.02, 0, 8).unwrap();
        let arm = run_arm("benign", &world.benign_backbone, &full_ref, &world.splits, &cfg).unwrap();
        let mut strong = arm.clone();
        strong.mia_ref.auc = 0.9;
        let mut weak = arm.clone();
        weak.mia_ref.auc = 0.6;
        let verdicts = compare(&weak, &strong, &cfg.margins);
        let v = verdicts.iter().find(|v| v.metric == "mia_ref_auc").unwrap();
        assert!(v.amplified);
        assert!((v.crafted - v.benign - 0.3).abs() < 1e-12);
    }
}
