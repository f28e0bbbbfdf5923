//! Pixels-versus-priors workbench.
//!
//! End-to-end toy reproduction of prior/perception conflict in a multimodal
//! transformer: synthetic counterfactual corpus, trainable model with
//! residual-stream interventions, layer-wise decoding and flip analysis,
//! contrastive steering vectors, attention-mass profiling and PCA reports.

pub mod color;
pub mod dataset;
pub mod digest;
pub mod error;
pub mod image;
pub mod model;
pub mod pca;
pub mod persist;
pub mod pipeline;
pub mod report;
pub mod steering;
pub mod trace;
pub mod universe;
pub mod vocab;

pub use error::{PvpError, Result};
