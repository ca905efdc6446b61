//! Minimal decoder-only transformer with reverse-mode differentiation.
//!
//! Pre-norm blocks (causal multi-head attention + GELU MLP), learned
//! positional embeddings, untied output head. Everything is f64 and fully
//! seeded; no dropout. Optional per-block adapters and LoRA deltas on the
//! q/v projections live in the same named parameter store as the backbone.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use forward::mha_forward;

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidInput(format!(
                "d_model ({}) must equal n_heads * d_head ({} * {})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.context_len < 2 {
            return Err(Error::InvalidInput("context_len must be >= 2".into()));
        }
        if self.vocab_size < 2 || self.n_layers == 0 {
            return Err(Error::InvalidInput("vocab_size >= 2 and n_layers >= 1 required".into()));
        }
        Ok(())
    }
}

/// Map from hierarchical parameter names to tensors plus a trainable mask.
#[derive(Debug, Clone, Default)]
pub struct NamedParamStore {
    entries: BTreeMap<String, Tensor>,
    trainable: BTreeMap<String, bool>,
}

impl NamedParamStore {
    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.entries.insert(name.to_string(), t);
        self.trainable.insert(name.to_string(), true);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.trainable.remove(name);
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| self.unknown(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if !self.entries.contains_key(name) {
            return Err(self.unknown(name));
        }
        Ok(self.entries.get_mut(name).unwrap())
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let cur = self.get(name)?;
        if cur.shape != t.shape {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}` has shape {:?}, refusing {:?}",
                cur.shape, t.shape
            )));
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        *self.trainable.get(name).unwrap_or(&false)
    }

    pub fn set_trainable(&mut self, name: &str, on: bool) -> Result<()> {
        if !self.entries.contains_key(name) {
            return Err(self.unknown(name));
        }
        self.trainable.insert(name.to_string(), on);
        Ok(())
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        for v in self.trainable.values_mut() {
            *v = on;
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable
            .iter()
            .filter(|(_, &on)| on)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    fn unknown(&self, name: &str) -> Error {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let mut candidates: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.contains(leaf) || leaf.contains(k.rsplit('.').next().unwrap_or("")))
            .take(4)
            .cloned()
            .collect();
        candidates.dedup();
        Error::UnknownParam { name: name.to_string(), candidates }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub reduction_factor: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    /// attention projections carrying low-rank deltas ("q", "k", "v", "o")
    pub targets: Vec<String>,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: NamedParamStore,
    pub adapter: Option<AdapterSpec>,
    pub lora: Option<LoraSpec>,
    pub provenance: String,
    pub(crate) cache: Option<forward::BatchCache>,
}

impl Clone for Model {
    /// Cloning drops any cached activations.
    fn clone(&self) -> Self {
        Model {
            config: self.config,
            params: self.params.clone(),
            adapter: self.adapter,
            lora: self.lora.clone(),
            provenance: self.provenance.clone(),
            cache: None,
        }
    }
}

impl Model {
    /// Fresh backbone: Gaussian(0, 0.02) weights, zero biases, unit norms.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let mut params = NamedParamStore::default();
        params.insert("embed.tok.w", Tensor::randn(&[v, d], INIT_STD, &mut rng));
        params.insert("embed.pos.w", Tensor::randn(&[config.context_len, d], INIT_STD, &mut rng));
        for i in 0..config.n_layers {
            let p = format!("block.{i}");
            params.insert(&format!("{p}.ln1.gain"), Tensor::from_vec(&[d], vec![1.0; d])?);
            params.insert(&format!("{p}.ln1.bias"), Tensor::zeros(&[d]));
            for proj in ["q", "k", "v", "o"] {
                params.insert(&format!("{p}.attn.w_{proj}"), Tensor::randn(&[d, d], INIT_STD, &mut rng));
                params.insert(&format!("{p}.attn.b_{proj}"), Tensor::zeros(&[d]));
            }
            params.insert(&format!("{p}.ln2.gain"), Tensor::from_vec(&[d], vec![1.0; d])?);
            params.insert(&format!("{p}.ln2.bias"), Tensor::zeros(&[d]));
            params.insert(&format!("{p}.mlp.w_fc"), Tensor::randn(&[d, 4 * d], INIT_STD, &mut rng));
            params.insert(&format!("{p}.mlp.b_fc"), Tensor::zeros(&[4 * d]));
            params.insert(&format!("{p}.mlp.w_proj"), Tensor::randn(&[4 * d, d], INIT_STD, &mut rng));
            params.insert(&format!("{p}.mlp.b_proj"), Tensor::zeros(&[d]));
        }
        params.insert("ln_f.gain", Tensor::from_vec(&[d], vec![1.0; d])?);
        params.insert("ln_f.bias", Tensor::zeros(&[d]));
        params.insert("head.w", Tensor::randn(&[d, v], INIT_STD, &mut rng));
        params.insert("head.b", Tensor::zeros(&[v]));
        Ok(Model { config, params, adapter: None, lora: None, provenance: String::new(), cache: None })
    }

    pub fn get_param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.params.set(name, t)
    }

    pub fn scale_param(&mut self, name: &str, beta: f64) -> Result<()> {
        self.params.get_mut(name)?.scale(beta);
        Ok(())
    }

    /// Resolve a target pattern to concrete parameter names. Accepts full
    /// names, fused GPT-2 aliases (`attn.c_attn.weight`, `attn.c_proj.weight`)
    /// and bare suffixes matched across blocks (`attn.w_o`).
    pub fn resolve_targets(&self, pattern: &str) -> Result<Vec<String>> {
        if self.params.contains(pattern) {
            return Ok(vec![pattern.to_string()]);
        }
        let suffixes: Vec<&str> = match pattern {
            "attn.c_attn.weight" => vec!["attn.w_q", "attn.w_k", "attn.w_v"],
            "attn.c_attn.bias" => vec!["attn.b_q", "attn.b_k", "attn.b_v"],
            "attn.c_proj.weight" => vec!["attn.w_o"],
            "attn.c_proj.bias" => vec!["attn.b_o"],
            other => vec![other],
        };
        let mut out: Vec<String> = Vec::new();
        for name in self.params.names() {
            if suffixes.iter().any(|s| name.ends_with(s)) {
                out.push(name.clone());
            }
        }
        if out.is_empty() {
            return Err(self.params.get(pattern).unwrap_err());
        }
        Ok(out)
    }

    /// Names the forward pass expects, given the attached module specs.
    pub fn expected_param_names(
        config: &ModelConfig,
        adapter: &Option<AdapterSpec>,
        lora: &Option<LoraSpec>,
    ) -> Vec<String> {
        let mut names = vec![
            "embed.tok.w".to_string(),
            "embed.pos.w".to_string(),
            "ln_f.gain".to_string(),
            "ln_f.bias".to_string(),
            "head.w".to_string(),
            "head.b".to_string(),
        ];
        for i in 0..config.n_layers {
            let p = format!("block.{i}");
            for leaf in ["ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"] {
                names.push(format!("{p}.{leaf}"));
            }
            for proj in ["q", "k", "v", "o"] {
                names.push(format!("{p}.attn.w_{proj}"));
                names.push(format!("{p}.attn.b_{proj}"));
            }
            for leaf in ["mlp.w_fc", "mlp.b_fc", "mlp.w_proj", "mlp.b_proj"] {
                names.push(format!("{p}.{leaf}"));
            }
            if adapter.is_some() {
                names.push(format!("{p}.adapter.w_down"));
                names.push(format!("{p}.adapter.w_up"));
            }
            if let Some(l) = lora {
                for t in &l.targets {
                    names.push(format!("{p}.attn.lora_{t}.w_down"));
                    names.push(format!("{p}.attn.lora_{t}.w_up"));
                }
            }
        }
        names.sort();
        names
    }

    /// Mean negative log-likelihood per predicted token, caching activations
    /// for a subsequent `backward`.
    pub fn forward_loss(&mut self, batch: &[TokenSequence]) -> Result<f64> {
        forward::forward_loss(self, batch)
    }

    /// Populate gradients of trainable parameters from the cached forward.
    pub fn backward(&mut self) -> Result<()> {
        forward::backward(self)
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
    }

    /// Per-token mean NLL of one sample, read-only.
    pub fn sequence_nll(&self, ids: &[u32]) -> Result<f64> {
        let (nll, count) = forward::seq_nll(self, ids)?;
        if count == 0 {
            return Err(Error::InvalidInput("sequence too short to score".into()));
        }
        Ok(nll / count as f64)
    }

    /// exp(mean per-token NLL) over a dataset.
    pub fn perplexity(&self, dataset: &[TokenSequence]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for s in dataset {
            let (nll, c) = forward::seq_nll(self, &s.ids)?;
            total += nll;
            count += c;
        }
        if count == 0 {
            return Err(Error::InvalidInput("no scoreable tokens in dataset".into()));
        }
        Ok((total / count as f64).exp())
    }

    /// Next-token distribution at the last position, read-only.
    pub fn next_token_probs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        forward::next_token_probs(self, ids)
    }

    /// Pre-softmax next-token scores at the last position, read-only.
    pub fn next_token_logits(&self, ids: &[u32]) -> Result<Vec<f64>> {
        forward::next_token_logits(self, ids)
    }

    pub fn generate(
        &self,
        prefix: &[u32],
        max_len: usize,
        decode: &Decode,
        seed: u64,
        eos: Option<u32>,
    ) -> Result<TokenSequence> {
        forward::generate(self, prefix, max_len, decode, seed, eos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Decode {
    Greedy,
    Sample { temperature: f64, top_k: Option<usize> },
}

/// True for bias-style leaves: attention/MLP `b_*` and layer-norm `bias`.
pub fn is_bias_param(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    leaf.starts_with("b_") || leaf == "bias" || leaf == "b"
}
