use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid corpus spec: {0}")]
    InvalidCorpusSpec(String),

    #[error("invalid emotion mix: {0}")]
    InvalidEmotionMix(String),

    #[error("unknown emotion label `{0}`")]
    UnknownEmotion(String),

    #[error("malformed corpus record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("cannot split {posts} unique posts into {parts} partitions")]
    NotEnoughPosts { posts: usize, parts: usize },

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),

    #[error("variant {variant} does not support {feature}")]
    VariantMismatch { variant: String, feature: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("invalid training data: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
