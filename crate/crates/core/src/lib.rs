//! Privacy experiment laboratory for small causal language models.
//!
//! The crate covers the full pipeline: corpus generation and splitting,
//! suffix-array deduplication, a minimal seeded transformer with manual
//! reverse-mode gradients, parameter-efficient fine-tuning, backbone
//! crafting strategies, membership-inference and extraction attacks,
//! stealth audits, and a two-arm experiment harness with reports.

pub mod attack;
pub mod corpus;
pub mod craft;
pub mod error;
pub mod game;
pub mod model;
pub mod peft;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
