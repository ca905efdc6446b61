//! Inference-stage machinery: membership inference, untargeted extraction,
//! targeted canary exposure, and the victim-side stealth audit.

mod exposure;
mod extract;
mod mia;
pub mod stealth;

pub use exposure::{exposure, ExposureRecord, EXPOSURE_ENUM_LIMIT};
pub use extract::{
    extraction_metrics, run_extraction_untargeted, top_frequent_prefixes, ExtractionConfig,
    ExtractionPool, ExtractionReport, SampleDupCounts,
};
pub use mia::{
    alpha_key, loss_score, mia_metrics, pick_threshold, records_to_csv, ref_score, score_dataset,
    MiaLabel, MiaReport, ScoreRecord, DEFAULT_ALPHAS,
};
pub use stealth::{audit_stealth, StealthReport};
