//! An end-to-end, attention-based character-level speech transcriber.
//!
//! The [`listener`] maps a `[T, D]` feature matrix to a `[U, H]` encoding with a
//! pyramidal BLSTM; the [`speller`] attends over that encoding to emit one
//! character distribution per step. [`training`] fits both jointly,
//! [`beam`] decodes, and [`lm`] rescores n-best lists.

pub mod beam;
pub mod error;
pub mod eval;
pub mod listener;
pub mod lm;
pub mod model;
pub mod numerics;
pub mod speller;
pub mod synth;
pub mod training;
pub mod vocab;

pub use error::{LasError, Result};
pub use model::ModelConfig;
