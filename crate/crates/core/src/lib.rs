//! Desk-scale transformer laboratory.
//!
//! Builds BERT- and GPT-style models in several block variants (vanilla,
//! FFN-Wider, combination-adjustable with an inner FFN inside attention,
//! MoE and MoE with an inner MoE), trains them, and measures how much of the
//! per-layer information gain comes from attention versus feed-forward
//! sublayers.

pub mod analysis;
pub mod arch;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod params;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var, IGNORE_INDEX};
pub use error::{LabError, Result};
pub use gradcheck::{grad_check, GradCheck};
pub use params::ParamStore;
pub use rng::SeededRng;
pub use tensor::Tensor;
