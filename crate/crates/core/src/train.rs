//! Victim-side fine-tuning loop: SGD with linear decay, stopping rules,
//! decoupled weight decay, and optional DP-SGD via per-sample clipping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::peft::{self, PeftConfig, PeftKind, TrainableMask};
use crate::tensor::gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StopRule {
    ByEpoch { epochs: usize },
    /// stop at the first eval with val_ppl <= target; hard cap on epochs
    ByPerf { target_val_ppl: f64, max_epochs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// free-text label carried into reports; no accounting is performed
    #[serde(default)]
    pub epsilon_label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd
    }
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub stop: StopRule,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub dp: Option<DpConfig>,
    pub peft: PeftConfig,
    pub seed: u64,
    pub eval_every: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.peft.validate()?;
        if self.batch_size < 1 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::InvalidInput("eval_every must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidInput("lr must be finite and >= 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidInput("weight_decay must be >= 0".into()));
        }
        if let Some(dp) = &self.dp {
            if dp.clip_norm <= 0.0 {
                return Err(Error::InvalidInput("dp clip_norm must be > 0".into()));
            }
            if dp.noise_multiplier < 0.0 {
                return Err(Error::InvalidInput("dp noise_multiplier must be >= 0".into()));
            }
            if !matches!(self.optimizer, Optimizer::Sgd) {
                return Err(Error::InvalidInput(
                    "dp training supports only the sgd optimizer".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Documented per-method learning-rate defaults for full-scale runs; toy
/// configs usually override these.
pub fn default_lr(kind: PeftKind) -> f64 {
    match kind {
        PeftKind::Full => 1e-5,
        PeftKind::Adapter => 1e-4,
        PeftKind::Lora => 5e-4,
        PeftKind::Bitfit => 5e-4,
        PeftKind::Head => 1e-4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_ppl: f64,
    pub val_ppl: f64,
    pub checkpoint_ref: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
    pub steps_taken: usize,
    pub target_not_reached: bool,
    pub best_val_ppl: f64,
    pub best_checkpoint_ref: String,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,train_ppl,val_ppl,checkpoint_ref\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.epoch, r.train_ppl, r.val_ppl, r.checkpoint_ref
            ));
        }
        out
    }
}

/// g scaled by min(1, C / ||g||2); output norm never exceeds C.
pub fn clip_per_sample(g: &[f64], clip_norm: f64) -> Result<Vec<f64>> {
    if clip_norm <= 0.0 {
        return Err(Error::InvalidInput("clip_norm must be > 0".into()));
    }
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    Ok(g.iter().map(|x| x * scale).collect())
}

/// Average of clipped per-sample gradients plus N(0, sigma^2 C^2) noise,
/// all divided by the batch size.
pub fn dp_step(
    per_sample: &[Vec<f64>],
    clip_norm: f64,
    noise_multiplier: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    if per_sample.is_empty() {
        return Err(Error::InvalidInput("dp_step needs a nonempty batch".into()));
    }
    let dim = per_sample[0].len();
    let b = per_sample.len() as f64;
    let mut sum = vec![0.0; dim];
    for g in per_sample {
        if g.len() != dim {
            return Err(Error::ShapeMismatch("per-sample gradients disagree in length".into()));
        }
        let clipped = clip_per_sample(g, clip_norm)?;
        debug_assert!(
            clipped.iter().map(|x| x * x).sum::<f64>().sqrt() <= clip_norm + 1e-12
        );
        for (s, c) in sum.iter_mut().zip(&clipped) {
            *s += c;
        }
    }
    if noise_multiplier > 0.0 {
        let std = noise_multiplier * clip_norm;
        for s in sum.iter_mut() {
            *s += gaussian(rng) * std;
        }
    }
    for s in sum.iter_mut() {
        *s /= b;
    }
    Ok(sum)
}

/// Decoupled weight decay applied before the gradient step.
pub fn apply_weight_decay(param: &mut [f64], weight_decay: f64, lr: f64) {
    if weight_decay == 0.0 {
        return;
    }
    let factor = 1.0 - lr * weight_decay;
    for p in param.iter_mut() {
        *p *= factor;
    }
}

/// Fine-tune under `cfg`, attaching PEFT modules as needed. Returns the
/// resulting model (best-by-val for ByPerf) and the eval history.
pub fn finetune(
    model: &Model,
    d_ft: &[TokenSequence],
    d_val: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if d_ft.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if matches!(cfg.stop, StopRule::ByPerf { .. }) && d_val.is_empty() {
        return Err(Error::InvalidInput("ByPerf stopping requires a validation set".into()));
    }
    let mut m = model.clone();
    match cfg.peft.kind {
        PeftKind::Adapter if m.adapter.is_none() => peft::attach_modules(&mut m, &cfg.peft)?,
        PeftKind::Lora if m.lora.is_none() => peft::attach_modules(&mut m, &cfg.peft)?,
        _ => {}
    }
    let mask = peft::trainable_mask(&m, &cfg.peft)?;
    train_loop(m, d_ft, d_val, &mask, cfg)
}

/// Core loop over an explicit mask; crafting reuses this with the
/// anti-freeze mask instead of the victim mask.
pub fn train_loop(
    mut m: Model,
    d_ft: &[TokenSequence],
    d_val: &[TokenSequence],
    mask: &TrainableMask,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if d_ft.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    peft::apply_mask(&mut m, mask)?;
    let trainable: Vec<String> = mask
        .iter()
        .filter(|(_, &on)| on)
        .map(|(n, _)| n.clone())
        .collect();

    let (epochs, by_perf_target) = match cfg.stop {
        StopRule::ByEpoch { epochs } => (epochs, None),
        StopRule::ByPerf { target_val_ppl, max_epochs } => (max_epochs, Some(target_val_ppl)),
    };
    let steps_per_epoch = d_ft.len().div_ceil(cfg.batch_size);
    let total_steps = epochs * steps_per_epoch;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory {
        best_val_ppl: f64::INFINITY,
        target_not_reached: by_perf_target.is_some(),
        ..TrainHistory::default()
    };
    let mut adam_state: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut adam_t = 0usize;
    let mut best: Option<Model> = None;

    let mut step = 0usize;
    'outer: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..d_ft.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr_t = cfg.lr * (total_steps - step) as f64 / total_steps.max(1) as f64;
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| d_ft[i].clone()).collect();

            if let Some(dp) = &cfg.dp {
                // microbatching: one backward per sample for exact clipping
                let mut per_sample: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
                for s in &batch {
                    m.zero_grads();
                    m.forward_loss(std::slice::from_ref(s))?;
                    m.backward()?;
                    let mut flat = Vec::new();
                    for name in &trainable {
                        let t = m.params.get(name)?;
                        match &t.grad {
                            Some(g) => flat.extend_from_slice(g),
                            None => flat.extend(std::iter::repeat(0.0).take(t.data.len())),
                        }
                    }
                    per_sample.push(flat);
                }
                let update = dp_step(&per_sample, dp.clip_norm, dp.noise_multiplier, &mut rng)?;
                let mut off = 0usize;
                for name in &trainable {
                    let t = m.params.get_mut(name)?;
                    let n = t.data.len();
                    apply_weight_decay(&mut t.data, cfg.weight_decay, lr_t);
                    for (p, u) in t.data.iter_mut().zip(&update[off..off + n]) {
                        *p -= lr_t * u;
                    }
                    off += n;
                }
            } else {
                m.zero_grads();
                m.forward_loss(&batch)?;
                m.backward()?;
                adam_t += 1;
                for name in &trainable {
                    let t = m.params.get_mut(name)?;
                    let Some(g) = t.grad.take() else { continue };
                    apply_weight_decay(&mut t.data, cfg.weight_decay, lr_t);
                    match cfg.optimizer {
                        Optimizer::Sgd => {
                            for (p, gi) in t.data.iter_mut().zip(&g) {
                                *p -= lr_t * gi;
                            }
                        }
                        Optimizer::Adam { beta1, beta2, eps } => {
                            let n = t.data.len();
                            let (mbuf, vbuf) = adam_state
                                .entry(name.clone())
                                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                            let bc1 = 1.0 - beta1.powi(adam_t as i32);
                            let bc2 = 1.0 - beta2.powi(adam_t as i32);
                            for i in 0..n {
                                mbuf[i] = beta1 * mbuf[i] + (1.0 - beta1) * g[i];
                                vbuf[i] = beta2 * vbuf[i] + (1.0 - beta2) * g[i] * g[i];
                                let mhat = mbuf[i] / bc1;
                                let vhat = vbuf[i] / bc2;
                                t.data[i] -= lr_t * mhat / (vhat.sqrt() + eps);
                            }
                        }
                    }
                }
            }
            step += 1;
            history.steps_taken = step;

            if step % cfg.eval_every == 0 || step == total_steps {
                let rec = evaluate(&m, d_ft, d_val, step, epoch)?;
                if rec.val_ppl < history.best_val_ppl {
                    history.best_val_ppl = rec.val_ppl;
                    history.best_checkpoint_ref = rec.checkpoint_ref.clone();
                    if by_perf_target.is_some() {
                        best = Some(m.clone());
                    }
                }
                let reached = by_perf_target.map(|t| rec.val_ppl <= t).unwrap_or(false);
                history.records.push(rec);
                if reached {
                    history.target_not_reached = false;
                    best = Some(m.clone());
                    break 'outer;
                }
            }
        }
    }
    if total_steps == 0 {
        history.best_val_ppl = f64::NAN;
    }
    let out = match (by_perf_target, best) {
        (Some(_), Some(b)) => b,
        _ => m,
    };
    Ok((out, history))
}

fn evaluate(
    m: &Model,
    d_ft: &[TokenSequence],
    d_val: &[TokenSequence],
    step: usize,
    epoch: usize,
) -> Result<EvalRecord> {
    let train_ppl = m.perplexity(d_ft)?;
    let val_ppl = if d_val.is_empty() { f64::NAN } else { m.perplexity(d_val)? };
    Ok(EvalRecord {
        step,
        epoch,
        train_ppl,
        val_ppl,
        checkpoint_ref: format!("step-{step}"),
    })
}
