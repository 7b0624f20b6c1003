//! HexaGAN for dirty tabular data. Missing elements are imputed
//! adversarially, and minority classes are oversampled in a learned hidden
//! space. Unlabeled rows train the classifier through pseudo-labels.
//! Everything runs on a small built-in reverse-mode differentiation engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`engine`]: tensors, tape, MLP graphs, RMSProp
//! - [`data`]: CSV ingestion, scaling, MCAR corruption, folds and batches
//! - [`networks`]: the six component networks and checkpoints
//! - [`losses`]: every adversarial, reconstruction and penalty term
//! - [`trainer`]: the alternating update schedule
//! - [`eval`]: metrics, baselines, cross-validation, sweeps and ablations

pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod trainer;

pub use error::{HexaError, Result};
