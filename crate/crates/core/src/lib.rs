//! Open intent classification built on a prefix-tuned transformer encoder.
//!
//! The pipeline: tokenize utterances, encode them with a small transformer
//! whose attention layers accept trainable key/value prefix tokens, pool and
//! project into an intent representation, pre-train on the known intents
//! with softmax loss under a configurable layer/component freezing plan, then
//! learn a spherical decision boundary per known class on the frozen
//! representations. Points outside every boundary are classified as open.
//!
//! Everything runs in f64 on a recorded-graph reverse-mode differentiator so
//! gradients can be verified against central differences end to end.

pub mod adb;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod head;
pub mod model;
pub mod numerics;
pub mod prefix;
pub mod trainer;

pub use error::{Error, Result};
