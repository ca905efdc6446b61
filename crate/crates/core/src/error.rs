use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("not enough samples: need at least {needed}, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown parameter `{name}`{}", near_miss_hint(.candidates))]
    UnknownParam { name: String, candidates: Vec<String> },
    #[error("{0}")]
    InvalidInput(String),
    #[error("backward called before forward")]
    NoForwardCache,
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{kind} modules already attached")]
    AlreadyAttached { kind: &'static str },
    #[error("peft kind `{kind}` requires attached {kind} modules")]
    NotAttached { kind: String },
    #[error("anti-freezing undefined for Full-FT")]
    AntiFreezeFull,
    #[error("model configs are incompatible: {0}")]
    ConfigMismatch(String),
    #[error("vocab mismatch between target and reference model")]
    VocabMismatch,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

fn near_miss_hint(candidates: &[String]) -> String {
    if candidates.is_empty() {
        String::new()
    } else {
        format!("; near misses: {}", candidates.join(", "))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
