//! Batch command-line front end: crafting, fine-tuning, attacks, audits,
//! deduplication, and the full two-arm comparison run.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use privlab::attack::{
    audit_stealth, extraction_metrics, mia_metrics, records_to_csv, run_extraction_untargeted,
    score_dataset, top_frequent_prefixes, MiaLabel, ScoreRecord,
};
use privlab::corpus::{
    build_vocab, cross_dedup, deduplicate, tokenize_corpus, CrossDedupMode, SplitBundle,
    TokenSequence, Vocab,
};
use privlab::craft::craft;
use privlab::game::{build_world, emit_reports, run_game, ExperimentConfig, GameOutcome};
use privlab::model::{load_checkpoint, save_checkpoint, Model};
use privlab::train::finetune;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "PRIVLAB_OUT";

#[derive(Debug)]
enum CliError {
    Config(String),
    Stage(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Stage(m) => write!(f, "stage failure: {m}"),
        }
    }
}

fn cfg_err<E: fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn stage_err<E: fmt::Display>(e: E) -> CliError {
    CliError::Stage(e.to_string())
}

#[derive(Parser)]
#[command(name = "privlab", about = "Privacy experiment lab for small language models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration
    #[arg(long)]
    config: PathBuf,
    /// Override any config field: dotted path = TOML value
    /// (e.g. --set train.seed=7 --set craft.strategy="lagging")
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Produce a crafted backbone from the config's craft plan
    Craft {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Starting backbone; defaults to the config's warmed public model
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Victim fine-tuning of a backbone on the private split
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV destination for the training history
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Inference attacks against a fine-tuned model
    Attack {
        #[command(subcommand)]
        which: AttackCmd,
    },
    /// Victim-side stealth audit of a released backbone
    Audit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove repeated L-grams from a line-per-sample text corpus
    Dedup {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Gram length
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        /// Drop spans that also occur in this corpus instead
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        vocab_cap: usize,
    },
    /// Full two-arm run: craft, fine-tune, attack, compare, report
    Game {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Report directory; defaults to the config's output_dir, then
        /// $PRIVLAB_OUT/run-<hash>
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit report files from a saved outcome summary
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Membership inference on the config's private/held-out splits
    Mia {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        target: PathBuf,
        /// Reference model for loss calibration
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of per-sample scores
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Untargeted generation-and-rank extraction
    Extract {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn apply_set(doc: &mut toml::Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set needs KEY=VALUE, got `{spec}`")))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = doc;
    let segments: Vec<&str> = key.split('.').collect();
    for seg in &segments[..segments.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}` does not address a table")))?
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| CliError::Config(format!("`{key}` does not address a table")))?
        .insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(cfg_err)?;
    let mut doc: toml::Value = text.parse().map_err(cfg_err)?;
    for spec in &args.sets {
        apply_set(&mut doc, spec)?;
    }
    let cfg: ExperimentConfig = doc.try_into().map_err(cfg_err)?;
    cfg.validate().map_err(cfg_err)?;
    Ok(cfg)
}

fn output_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| "privlab-out".into());
    root.join(format!("run-{}", &cfg.config_hash()[..12]))
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    load_checkpoint(path).map_err(stage_err)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(stage_err)?;
    s.push('\n');
    std::fs::write(path, s).map_err(stage_err)
}

fn split_eval_calib(d_non: &[TokenSequence]) -> (&[TokenSequence], &[TokenSequence]) {
    let half = (d_non.len() / 2).max(1).min(d_non.len() - 1);
    d_non.split_at(half)
}

fn mia_scores(
    target: &Model,
    reference: Option<&Model>,
    splits: &SplitBundle,
    cap: usize,
) -> Result<(Vec<ScoreRecord>, Vec<f64>), CliError> {
    let take = |d: &[TokenSequence]| -> Vec<TokenSequence> {
        if cap == 0 || cap >= d.len() {
            d.to_vec()
        } else {
            d[..cap].to_vec()
        }
    };
    let (non_eval, non_calib) = split_eval_calib(&splits.d_non);
    let mut records =
        score_dataset(target, reference, &take(&splits.d_ft), MiaLabel::Member).map_err(stage_err)?;
    records.extend(
        score_dataset(target, reference, &take(non_eval), MiaLabel::Nonmember).map_err(stage_err)?,
    );
    let calib = score_dataset(target, reference, non_calib, MiaLabel::Nonmember)
        .map_err(stage_err)?
        .iter()
        .map(|r| r.signal())
        .collect();
    Ok((records, calib))
}

fn detokenize(vocab: &Vocab, samples: &[TokenSequence]) -> String {
    let mut out = String::new();
    for s in samples {
        let words: Vec<&str> = s.ids.iter().map(|&id| vocab.token(id)).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out
}

fn run() -> Result<(), CliError> {
    match Cli::parse().cmd {
        Cmd::Craft { cfg, backbone, out } => {
            let cfg = load_config(&cfg)?;
            let world = build_world(&cfg).map_err(stage_err)?;
            let base = match backbone {
                Some(p) => load_model(&p)?,
                None => world.benign_backbone,
            };
            let crafted = craft(&base, &world.splits.d_aux, &cfg.craft).map_err(stage_err)?;
            save_checkpoint(&crafted, &out).map_err(stage_err)?;
            println!("wrote {}", out.display());
        }
        Cmd::Finetune { cfg, backbone, out, history } => {
            let cfg = load_config(&cfg)?;
            let world = build_world(&cfg).map_err(stage_err)?;
            let base = load_model(&backbone)?;
            let (model, hist) =
                finetune(&base, &world.splits.d_ft, &world.splits.d_val, &cfg.train)
                    .map_err(stage_err)?;
            save_checkpoint(&model, &out).map_err(stage_err)?;
            if let Some(p) = history {
                std::fs::write(&p, hist.to_csv()).map_err(stage_err)?;
            }
            println!("wrote {}", out.display());
        }
        Cmd::Attack { which } => match which {
            AttackCmd::Mia { cfg, target, reference, out, scores } => {
                let cfg = load_config(&cfg)?;
                let world = build_world(&cfg).map_err(stage_err)?;
                let target = load_model(&target)?;
                let reference = reference.map(|p| load_model(&p)).transpose()?;
                let (records, calib) =
                    mia_scores(&target, reference.as_ref(), &world.splits, cfg.attack.eval_per_class)?;
                let report = mia_metrics(&records, &cfg.attack.alphas, Some(&calib))
                    .map_err(stage_err)?;
                write_json(&out, &report)?;
                if let Some(p) = scores {
                    std::fs::write(&p, records_to_csv(&records)).map_err(stage_err)?;
                }
                println!("auc {:.4} -> {}", report.auc, out.display());
            }
            AttackCmd::Extract { cfg, target, reference, out } => {
                let cfg = load_config(&cfg)?;
                let world = build_world(&cfg).map_err(stage_err)?;
                let target = load_model(&target)?;
                let reference = reference.map(|p| load_model(&p)).transpose()?;
                let prefixes = top_frequent_prefixes(
                    &world.splits.d_aux,
                    cfg.attack.extraction.prefix_len,
                    cfg.attack.extraction.n_prefixes,
                )
                .map_err(stage_err)?;
                let pool = run_extraction_untargeted(
                    &target,
                    reference.as_ref(),
                    &prefixes,
                    &cfg.attack.extraction,
                )
                .map_err(stage_err)?;
                let report = extraction_metrics(
                    &pool,
                    &world.splits.d_ft,
                    &world.splits.d_aux,
                    &cfg.attack.l_list,
                )
                .map_err(stage_err)?;
                write_json(&out, &report)?;
                println!("n_ext {} -> {}", report.n_ext, out.display());
            }
        },
        Cmd::Audit { cfg, backbone, out } => {
            let cfg = load_config(&cfg)?;
            let world = build_world(&cfg).map_err(stage_err)?;
            let model = load_model(&backbone)?;
            let report = audit_stealth(
                &model,
                &world.splits.d_ft,
                &world.splits.d_val,
                &world.splits.d_non,
                cfg.attack.stealth_k,
                cfg.attack.stealth_suffix_len,
            )
            .map_err(stage_err)?;
            write_json(&out, &report)?;
            println!("s_mia {:.4} -> {}", report.s_mia, out.display());
        }
        Cmd::Dedup { input, out, min_len, against, vocab_cap } => {
            let text = std::fs::read_to_string(&input).map_err(cfg_err)?;
            let lines: Vec<String> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.to_string())
                .collect();
            let vocab = build_vocab(&lines, vocab_cap).map_err(cfg_err)?;
            let samples = tokenize_corpus(&vocab, &lines);
            let kept = match against {
                Some(p) => {
                    let other = std::fs::read_to_string(&p).map_err(cfg_err)?;
                    let other_lines: Vec<String> = other
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(|l| l.to_string())
                        .collect();
                    let other_samples = tokenize_corpus(&vocab, &other_lines);
                    cross_dedup(&samples, &other_samples, min_len, CrossDedupMode::Dedup)
                        .map_err(stage_err)?
                }
                None => deduplicate(&samples, min_len).map_err(stage_err)?,
            };
            std::fs::write(&out, detokenize(&vocab, &kept)).map_err(stage_err)?;
            println!("kept {}/{} samples -> {}", kept.len(), samples.len(), out.display());
        }
        Cmd::Game { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let outcome = run_game(&cfg).map_err(stage_err)?;
            let dir = output_dir(out, &cfg);
            let files = emit_reports(&outcome, &cfg, &dir).map_err(stage_err)?;
            for v in &outcome.verdicts {
                let tag = if v.amplified { "PASS" } else { "FAIL" };
                println!("{tag} {} benign={:.4} crafted={:.4}", v.metric, v.benign, v.crafted);
            }
            println!("{} files -> {}", files.len(), dir.display());
        }
        Cmd::Report { cfg, summary, out } => {
            let cfg = load_config(&cfg)?;
            let raw = std::fs::read_to_string(&summary).map_err(cfg_err)?;
            let outcome: GameOutcome = serde_json::from_str(&raw).map_err(cfg_err)?;
            if outcome.config_hash != cfg.config_hash() {
                return Err(CliError::Config(
                    "summary config hash does not match the supplied config".into(),
                ));
            }
            let dir = output_dir(out, &cfg);
            let files = emit_reports(&outcome, &cfg, &dir).map_err(stage_err)?;
            println!("{} files -> {}", files.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Stage(_) => ExitCode::from(3),
            }
        }
    }
}
