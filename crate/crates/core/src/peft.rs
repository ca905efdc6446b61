//! Parameter-efficient fine-tuning: module insertion and trainable masks.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_bias_param, AdapterSpec, LoraSpec, Model, INIT_STD};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftKind {
    Full,
    Head,
    Bitfit,
    Adapter,
    Lora,
}

impl PeftKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PeftKind::Full => "full",
            PeftKind::Head => "head",
            PeftKind::Bitfit => "bitfit",
            PeftKind::Adapter => "adapter",
            PeftKind::Lora => "lora",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeftConfig {
    pub kind: PeftKind,
    /// adapter bottleneck: width = max(1, d_model / reduction_factor)
    pub reduction_factor: usize,
    /// LoRA rank
    pub rank: usize,
    pub module_seed: u64,
    /// extra trailing blocks swept into the head mask (0 = head + final norm only)
    pub head_depth: usize,
    pub lora_targets: Vec<String>,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            kind: PeftKind::Full,
            reduction_factor: 16,
            rank: 16,
            module_seed: 0,
            head_depth: 0,
            lora_targets: vec!["q".into(), "v".into()],
        }
    }
}

impl PeftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_factor < 1 {
            return Err(Error::InvalidInput("reduction_factor must be >= 1".into()));
        }
        if self.rank < 1 {
            return Err(Error::InvalidInput("lora rank must be >= 1".into()));
        }
        if self.kind == PeftKind::Lora {
            if self.lora_targets.is_empty() {
                return Err(Error::InvalidInput("lora_targets must not be empty".into()));
            }
            for t in &self.lora_targets {
                if !["q", "k", "v", "o"].contains(&t.as_str()) {
                    return Err(Error::InvalidInput(format!(
                        "lora target must be one of q/k/v/o, got `{t}`"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which parameters a fine-tuning run may update. Covers every name once.
pub type TrainableMask = BTreeMap<String, bool>;

/// Insert a per-block bottleneck after the output sub-layer. The outward
/// matrix starts at zero so attachment never changes model behavior.
pub fn attach_adapter(model: &mut Model, reduction_factor: usize, module_seed: u64) -> Result<()> {
    if model.adapter.is_some() {
        return Err(Error::AlreadyAttached { kind: "adapter" });
    }
    if reduction_factor < 1 {
        return Err(Error::InvalidInput("reduction_factor must be >= 1".into()));
    }
    let d = model.config.d_model;
    let width = (d / reduction_factor).max(1);
    let mut rng = ChaCha12Rng::seed_from_u64(module_seed);
    for i in 0..model.config.n_layers {
        let p = format!("block.{i}");
        model
            .params
            .insert(&format!("{p}.adapter.w_down"), Tensor::randn(&[d, width], INIT_STD, &mut rng));
        model.params.insert(&format!("{p}.adapter.w_up"), Tensor::zeros(&[width, d]));
    }
    model.adapter = Some(AdapterSpec { reduction_factor, width });
    Ok(())
}

/// Insert low-rank deltas on the chosen attention projections. The outward
/// factor starts at zero so the effective weight is unchanged at attach time.
pub fn attach_lora(
    model: &mut Model,
    rank: usize,
    targets: &[String],
    module_seed: u64,
) -> Result<()> {
    if model.lora.is_some() {
        return Err(Error::AlreadyAttached { kind: "lora" });
    }
    if rank < 1 {
        return Err(Error::InvalidInput("lora rank must be >= 1".into()));
    }
    if targets.is_empty() {
        return Err(Error::InvalidInput("lora targets must not be empty".into()));
    }
    let mut seen = Vec::new();
    for t in targets {
        if !["q", "k", "v", "o"].contains(&t.as_str()) {
            return Err(Error::InvalidInput(format!("lora target must be one of q/k/v/o, got `{t}`")));
        }
        if seen.contains(t) {
            return Err(Error::InvalidInput(format!("duplicate lora target `{t}`")));
        }
        seen.push(t.clone());
    }
    let d = model.config.d_model;
    let mut rng = ChaCha12Rng::seed_from_u64(module_seed);
    for i in 0..model.config.n_layers {
        let p = format!("block.{i}");
        for t in targets {
            model.params.insert(
                &format!("{p}.attn.lora_{t}.w_down"),
                Tensor::randn(&[d, rank], INIT_STD, &mut rng),
            );
            model.params.insert(&format!("{p}.attn.lora_{t}.w_up"), Tensor::zeros(&[rank, d]));
        }
    }
    model.lora = Some(LoraSpec { rank, targets: targets.to_vec() });
    Ok(())
}

/// Attach whatever modules `cfg.kind` needs; no-op for mask-only kinds.
pub fn attach_modules(model: &mut Model, cfg: &PeftConfig) -> Result<()> {
    cfg.validate()?;
    match cfg.kind {
        PeftKind::Adapter => attach_adapter(model, cfg.reduction_factor, cfg.module_seed),
        PeftKind::Lora => attach_lora(model, cfg.rank, &cfg.lora_targets, cfg.module_seed),
        _ => Ok(()),
    }
}

fn module_param(name: &str) -> bool {
    name.contains(".adapter.") || name.contains(".attn.lora_")
}

/// Parameters the victim updates under the given strategy.
pub fn trainable_mask(model: &Model, cfg: &PeftConfig) -> Result<TrainableMask> {
    cfg.validate()?;
    let select: Box<dyn Fn(&str) -> bool> = match cfg.kind {
        PeftKind::Full => Box::new(|_| true),
        PeftKind::Head => {
            let n = model.config.n_layers;
            let depth = cfg.head_depth.min(n);
            let blocks: Vec<String> = (n - depth..n).map(|i| format!("block.{i}.")).collect();
            Box::new(move |name: &str| {
                name.starts_with("head.")
                    || name.starts_with("ln_f.")
                    || blocks.iter().any(|b| name.starts_with(b))
            })
        }
        PeftKind::Bitfit => Box::new(|name: &str| is_bias_param(name)),
        PeftKind::Adapter => {
            if model.adapter.is_none() {
                return Err(Error::NotAttached { kind: "adapter".into() });
            }
            Box::new(|name: &str| name.contains(".adapter."))
        }
        PeftKind::Lora => {
            if model.lora.is_none() {
                return Err(Error::NotAttached { kind: "lora".into() });
            }
            Box::new(|name: &str| name.contains(".attn.lora_"))
        }
    };
    Ok(model.params.names().map(|n| (n.clone(), select(n))).collect())
}

/// Complement mask for the crafting stage: freeze the victim's modules,
/// tune everything else.
pub fn anti_freeze_mask(model: &Model, cfg: &PeftConfig) -> Result<TrainableMask> {
    if cfg.kind == PeftKind::Full {
        return Err(Error::AntiFreezeFull);
    }
    let mut mask = trainable_mask(model, cfg)?;
    for v in mask.values_mut() {
        *v = !*v;
    }
    Ok(mask)
}

/// Push a mask into the parameter store's trainable flags.
pub fn apply_mask(model: &mut Model, mask: &TrainableMask) -> Result<()> {
    for name in mask.keys() {
        if !model.params.contains(name) {
            return Err(Error::InvalidInput(format!("mask names unknown parameter `{name}`")));
        }
    }
    if mask.len() != model.params.len() {
        return Err(Error::InvalidInput(format!(
            "mask covers {} of {} parameters",
            mask.len(),
            model.params.len()
        )));
    }
    for (name, &on) in mask {
        model.params.set_trainable(name, on)?;
    }
    Ok(())
}

/// Remove previously attached modules. The released checkpoint must carry
/// zero adapter/LoRA names.
pub fn detach_modules(model: &mut Model) {
    let doomed: Vec<String> =
        model.params.names().filter(|n| module_param(n)).cloned().collect();
    for name in doomed {
        model.params.remove(&name);
    }
    model.adapter = None;
    model.lora = None;
}
