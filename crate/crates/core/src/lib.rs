//! A desk-scale laboratory for on-line sequence classification under
//! temporal conditional shift.
//!
//! The crate provides, from the ground up:
//!
//! - [`diffcore`]: a tape-based reverse-mode differentiation engine over
//!   dense 64-bit tensors, with seeded parameter initialization and Adam.
//! - [`datagen`]: a synthetic benchmark generator in which the
//!   feature-to-label relationship drifts along the sequence by a
//!   controllable amount `delta`.
//! - [`seqmodels`]: LSTM experts with time-distributed sigmoid heads and a
//!   single-layer tanh RNN context encoder.
//! - [`gate`]: content-based attention scoring (additive, concatenation,
//!   dot, general) that turns context/expert-encoding alignments into
//!   per-step simplex weights over experts.
//! - [`maes`]: the model-attentive ensemble built from the above, its
//!   expert-level likelihood loss, importance regularizer and trainer.
//! - [`baselines`]: a pool of independently trained LSTMs and the classic
//!   ensembles built on top of it (average, global/step-wise stacking,
//!   post-hoc step-wise selection).
//! - [`metrics`]: step-wise average precision, paired permutation
//!   significance tests and prediction-correlation analysis.

pub mod baselines;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod gate;
pub mod maes;
pub mod metrics;
pub mod seqmodels;
pub mod training;

pub use error::{CoreError, Result};
