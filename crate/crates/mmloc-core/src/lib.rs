//! Multimodal (sketch + gloss) query-guided object localization on a
//! synthetic desk-scale benchmark.
//!
//! The pipeline has two stages: query-guided proposal generation (cross-modal
//! attention feeding a region proposal network) and orthogonal-projection
//! based proposal scoring (projecting proposal features onto the subspace
//! spanned by the query vectors). See the crate README for the CLI and the
//! acceptance suite.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod linalg;
pub mod ops_scoring;
pub mod params;
pub mod pipeline;
pub mod proposals;
pub mod runner;

pub use config::{ExperimentConfig, FusionKind, ModelConfig, ScoreHead, SplitMode};
pub use error::{Error, Result};
