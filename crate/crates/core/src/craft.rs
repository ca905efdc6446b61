//! Adversarial backbone crafting before release: warm-up, anti-freeze
//! training, weight scaling, and selective rewinding.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::peft::{self, PeftConfig, PeftKind};
use crate::train::{train_loop, Optimizer, StopRule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CraftStrategy {
    Benign,
    Basic,
    Accelerated,
    Lagging,
    Stealthy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewindTarget {
    Block(usize),
    Head,
    Embeddings,
    FinalNorm,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftPlan {
    pub strategy: CraftStrategy,
    #[serde(default = "default_e_pre")]
    pub e_pre: usize,
    #[serde(default = "default_lr_pre")]
    pub lr_pre: f64,
    /// victim-strategy hint for accelerated crafting; kind must not be full
    #[serde(default)]
    pub peft_hint: Option<PeftConfig>,
    /// lagging scale factor in (0, 1]
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// parameter names or aliases to scale; empty = per-kind default
    #[serde(default)]
    pub scale_targets: Vec<String>,
    /// lagging: run accelerated crafting on d_aux before scaling
    #[serde(default)]
    pub use_aux: bool,
    #[serde(default)]
    pub rewind_spec: Vec<RewindTarget>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_e_pre() -> usize {
    4
}
fn default_lr_pre() -> f64 {
    1e-2
}
fn default_beta() -> f64 {
    0.1
}
fn default_batch() -> usize {
    8
}

impl CraftPlan {
    pub fn benign() -> Self {
        CraftPlan {
            strategy: CraftStrategy::Benign,
            e_pre: 0,
            lr_pre: default_lr_pre(),
            peft_hint: None,
            beta: 1.0,
            scale_targets: Vec::new(),
            use_aux: false,
            rewind_spec: Vec::new(),
            seed: 0,
            batch_size: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            CraftStrategy::Accelerated => {
                let hint = self.peft_hint.as_ref().ok_or_else(|| {
                    Error::InvalidInput("accelerated crafting requires peft_hint".into())
                })?;
                if hint.kind == PeftKind::Full {
                    return Err(Error::AntiFreezeFull);
                }
            }
            CraftStrategy::Lagging => {
                if !(self.beta > 0.0 && self.beta <= 1.0) {
                    return Err(Error::InvalidInput("beta must lie in (0, 1]".into()));
                }
                if self.use_aux {
                    let hint = self.peft_hint.as_ref().ok_or_else(|| {
                        Error::InvalidInput("lagging with use_aux requires peft_hint".into())
                    })?;
                    if hint.kind == PeftKind::Full {
                        return Err(Error::AntiFreezeFull);
                    }
                }
            }
            CraftStrategy::Stealthy => {
                if self.rewind_spec.is_empty() {
                    return Err(Error::InvalidInput("stealthy crafting requires rewind_spec".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn provenance(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| "craft-plan".into())
    }
}

/// Default scale targets per victim strategy: output projection for
/// adapter victims, fused qkv projection for LoRA victims.
pub fn default_scale_targets(kind: PeftKind) -> Vec<String> {
    match kind {
        PeftKind::Lora => vec!["attn.c_attn.weight".into()],
        _ => vec!["attn.c_proj.weight".into()],
    }
}

fn full_ft_config(lr: f64, epochs: usize, seed: u64, batch_size: usize) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size,
        stop: StopRule::ByEpoch { epochs },
        weight_decay: 0.0,
        dp: None,
        peft: PeftConfig::default(),
        seed,
        eval_every: usize::MAX >> 1,
        optimizer: Optimizer::Sgd,
    }
}

/// Warm the backbone up with full fine-tuning on the auxiliary set.
pub fn craft_basic(
    benign: &Model,
    d_aux: &[TokenSequence],
    e_pre: usize,
    lr_pre: f64,
    seed: u64,
    batch_size: usize,
) -> Result<Model> {
    if d_aux.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = full_ft_config(lr_pre, e_pre, seed, batch_size);
    let mask = peft::trainable_mask(benign, &cfg.peft)?;
    let (mut out, _) = train_loop(benign.clone(), d_aux, &[], &mask, &cfg)?;
    out.provenance = format!("basic(e_pre={e_pre})");
    Ok(out)
}

/// Attach the victim's module kind with the crafting seed, tune everything
/// except those modules, then detach them before release.
pub fn craft_accelerated(
    benign: &Model,
    d_aux: &[TokenSequence],
    peft_hint: &PeftConfig,
    e_pre: usize,
    lr_pre: f64,
    craft_seed: u64,
    batch_size: usize,
) -> Result<Model> {
    if d_aux.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if peft_hint.kind == PeftKind::Full {
        return Err(Error::AntiFreezeFull);
    }
    let mut m = benign.clone();
    let hint = PeftConfig { module_seed: craft_seed, ..peft_hint.clone() };
    peft::attach_modules(&mut m, &hint)?;
    let mask = peft::anti_freeze_mask(&m, &hint)?;
    let cfg = full_ft_config(lr_pre, e_pre, craft_seed, batch_size);
    let (mut out, _) = train_loop(m, d_aux, &[], &mask, &cfg)?;
    peft::detach_modules(&mut out);
    out.provenance = format!("accelerated(kind={}, e_pre={e_pre})", hint.kind.as_str());
    Ok(out)
}

/// Scale selected weights by beta, optionally after accelerated crafting.
pub fn craft_lagging(
    benign: &Model,
    d_aux: Option<&[TokenSequence]>,
    plan: &CraftPlan,
) -> Result<Model> {
    if !(plan.beta > 0.0 && plan.beta <= 1.0) {
        return Err(Error::InvalidInput("beta must lie in (0, 1]".into()));
    }
    let mut m = if plan.use_aux {
        let hint = plan
            .peft_hint
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("lagging with use_aux requires peft_hint".into()))?;
        let aux = d_aux.ok_or(Error::EmptyCorpus)?;
        craft_accelerated(benign, aux, hint, plan.e_pre, plan.lr_pre, plan.seed, plan.batch_size)?
    } else {
        benign.clone()
    };
    let targets = if plan.scale_targets.is_empty() {
        let kind = plan.peft_hint.as_ref().map(|h| h.kind).unwrap_or(PeftKind::Adapter);
        default_scale_targets(kind)
    } else {
        plan.scale_targets.clone()
    };
    for pattern in &targets {
        for name in m.resolve_targets(pattern)? {
            m.scale_param(&name, plan.beta)?;
        }
    }
    m.provenance = format!("lagging(beta={}, use_aux={})", plan.beta, plan.use_aux);
    Ok(m)
}

/// Replace the named regions of `crafted` with the benign values bit-exactly.
pub fn craft_stealthy(
    crafted: &Model,
    benign: &Model,
    rewind_spec: &[RewindTarget],
) -> Result<Model> {
    if crafted.config != benign.config {
        return Err(Error::ConfigMismatch("rewind models disagree on architecture".into()));
    }
    let crafted_names: Vec<&String> = crafted.params.names().collect();
    let benign_names: Vec<&String> = benign.params.names().collect();
    if crafted_names != benign_names {
        return Err(Error::ConfigMismatch("rewind models disagree on parameter names".into()));
    }
    let mut out = crafted.clone();
    for target in rewind_spec {
        let prefix: Box<dyn Fn(&str) -> bool> = match target {
            RewindTarget::Block(i) => {
                if *i >= crafted.config.n_layers {
                    return Err(Error::InvalidInput(format!(
                        "rewind block {i} out of range ({} layers)",
                        crafted.config.n_layers
                    )));
                }
                let p = format!("block.{i}.");
                Box::new(move |n: &str| n.starts_with(&p))
            }
            RewindTarget::Head => Box::new(|n: &str| n.starts_with("head.")),
            RewindTarget::Embeddings => Box::new(|n: &str| n.starts_with("embed.")),
            RewindTarget::FinalNorm => Box::new(|n: &str| n.starts_with("ln_f.")),
            RewindTarget::All => Box::new(|_| true),
        };
        let names: Vec<String> = out.params.names().filter(|n| prefix(n)).cloned().collect();
        for name in names {
            let b = benign.params.get(&name)?.clone();
            out.params.set(&name, b)?;
        }
    }
    out.provenance = format!("stealthy(rewinds={})", rewind_spec.len());
    Ok(out)
}

/// Run a full plan against a benign backbone.
pub fn craft(benign: &Model, d_aux: &[TokenSequence], plan: &CraftPlan) -> Result<Model> {
    plan.validate()?;
    let mut out = match plan.strategy {
        CraftStrategy::Benign => {
            let mut m = benign.clone();
            m.provenance = "benign".into();
            m
        }
        CraftStrategy::Basic => {
            craft_basic(benign, d_aux, plan.e_pre, plan.lr_pre, plan.seed, plan.batch_size)?
        }
        CraftStrategy::Accelerated => craft_accelerated(
            benign,
            d_aux,
            plan.peft_hint.as_ref().unwrap(),
            plan.e_pre,
            plan.lr_pre,
            plan.seed,
            plan.batch_size,
        )?,
        CraftStrategy::Lagging => craft_lagging(benign, Some(d_aux), plan)?,
        CraftStrategy::Stealthy => {
            // rewind applies to a basic-crafted base by default
            let base =
                craft_basic(benign, d_aux, plan.e_pre, plan.lr_pre, plan.seed, plan.batch_size)?;
            craft_stealthy(&base, benign, &plan.rewind_spec)?
        }
    };
    out.provenance = plan.provenance();
    Ok(out)
}
