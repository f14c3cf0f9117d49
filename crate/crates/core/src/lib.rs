//! Robust pool-based active learning.
//!
//! The crate bundles everything an experiment needs: a small reverse-mode
//! autodiff engine ([`diffcore`]), MLP/CNN classifiers ([`nets`]), dataset
//! handling ([`data`]), adversarial attacks ([`attacks`]), twelve acquisition
//! functions ([`acquisition`]), the standard and robust active-learning loops
//! ([`learner`]), the selection-bias analysis and significance tests
//! ([`analysis`]) and the test-selection retraining harness ([`retrainer`]).

pub mod acquisition;
pub mod analysis;
pub mod attacks;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod learner;
pub mod nets;
pub mod retrainer;

pub use error::{Error, Result};
