//! A miniature denoising sequence-to-sequence summarization toolkit.
//!
//! The model is a small from-scratch encoder-decoder transformer trained as
//! a denoising autoencoder and fine-tuned for abstractive summarization.
//! Between encoder and decoder sits a clustering transformer: a sentence
//! salience discriminator splits the document into salient and non-salient
//! sentences, and the corresponding encoder context vectors are scaled,
//! per-cluster normalized, and shrunk toward their cluster means before the
//! decoder cross-attends to them.
//!
//! Everything runs on a built-in dense `f64` tensor engine with tape-based
//! reverse-mode autodiff, so runs are deterministic given a seed and
//! gradients are finite-difference checkable end to end.

pub mod autodiff;
pub mod beam;
pub mod checkpoint;
pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod noising;
pub mod optim;
pub mod params;
pub mod pca;
pub mod plot;
pub mod rng;
pub mod rouge;
pub mod synthetic;
pub mod tau;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::Tensor;
