//! A small pre-norm transformer decoder that interleaves text tokens with
//! continuous latent tokens. Every generated latent is mapped to PCA
//! coefficients and reconstructed inside an empirical subspace before it is
//! fed back. Training combines next-token cross-entropy with a latent
//! alignment loss; difficulty-aware routing decides which examples get
//! latent supervision.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod model;
pub mod norms;
pub mod numerics;
pub mod pca;
pub mod training;

pub use error::{Error, Result};
pub use model::{InputSlot, ModelConfig, ModelParams};
pub use numerics::{Mat, Rng};
pub use pca::PcaBasis;
