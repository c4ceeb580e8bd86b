//! Dynamic embedded topic model.
//!
//! Topics are time-varying embeddings `alpha_k^(t)` living in the same space as
//! a fixed word-embedding matrix `rho`; the topic at time `t` is
//! `softmax(rho^T alpha_k^(t))`. The crate contains the full pipeline:
//!
//! * [`corpus`]: tokenization, vocabulary filtering, time binning, splits and
//!   the on-disk corpus bundle.
//! * [`numcore`]: a small dense-tensor reverse-mode autodiff engine with Adam,
//!   RMSProp, gradient clipping, an LSTM stack and Gaussian helpers.
//! * [`embeddings`]: skip-gram with negative sampling and word2vec text I/O.
//! * [`detm`]: the generative model, structured amortized variational
//!   inference, training, synthetic data and held-out inference.
//! * [`dlda_rep`]: the dynamic LDA baseline fitted with reparameterization
//!   gradients.
//! * [`eval`]: document-completion perplexity, NPMI coherence, topic diversity
//!   and topic quality.
//! * [`cli`]: the `detm` command-line pipeline.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod detm;
pub mod dlda_rep;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod numcore;
pub mod training;

pub use error::{Error, Result};

/// Tool version written next to every output.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
