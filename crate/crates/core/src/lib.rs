//! Emotion-conditioned response generation with a BERT-style conditional VAE.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod latent;
pub mod latent_analysis;
pub mod masks;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rerank_eval;
pub mod scorers;
pub mod training;
pub mod transformer;
pub mod variant;

pub use error::{Error, Result};
