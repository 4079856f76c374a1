//! Dual-encoder contrastive language-audio pretraining at desk scale.
//!
//! Toy audio and text encoders are trained with a symmetric InfoNCE loss plus
//! a hard-negative language-audio matching loss on synthetic paired data with
//! ASR-style transcription errors, then fine-tuned on downstream
//! classification tasks. All gradients are derived by hand and checked against
//! finite differences in the test suite.
//!
//! Per-sample work runs on rayon when the `parallel` feature is enabled (the
//! default); see [`exec::Exec`].

pub mod data;
pub mod encoders;
mod error;
pub mod exec;
pub mod linalg;
pub mod objectives;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
