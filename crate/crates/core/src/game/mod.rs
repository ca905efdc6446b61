//! Two-arm experiment harness: configuration, protocol runner, and report
//! emission.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{AttackSpec, CorpusSpec, ExperimentConfig, Margins, PretrainSpec};
pub use report::emit_reports;
pub use runner::{
    arms_comparable, build_world, compare, interpolate_step_at_ppl, run_arm, run_game, ArmResult,
    GameOutcome, Verdict, World,
};
