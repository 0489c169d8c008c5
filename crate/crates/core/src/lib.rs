//! Spectral graph pre-training primitives.
//!
//! `spectrain-core` learns the low-frequency eigenvectors of graph Laplacians
//! with a small message-passing network. It contains:
//!
//! - [`graph`]: graphs, adjacency, Laplacians and the random-walk diffusion operator.
//! - [`eigen`]: a dense cyclic Jacobi eigensolver used as the ground truth.
//! - [`features`]: diffusion wavelet banks, wavelet positional and diffused dirac embeddings.
//! - [`losses`]: energy, eigenvector, orthogonality and baseline losses, plus
//!   eigenspace rotations for invariance testing.
//! - [`nn`]: a reverse-mode tape, GIN encoder, prediction heads, differentiable
//!   Gram–Schmidt and Adam.
//! - [`training`]: target precomputation, pre-training, fine-tuning and the
//!   loss comparison harness.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, checkpoints and
//! the command-line interface live in the `spectrain` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod eigen;
pub mod error;
pub mod features;
pub mod graph;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod rng;
pub mod training;

pub use eigen::{eigendecompose, lowest_k, Spectrum};
pub use error::{Error, Result};
pub use features::{augment_features, FeatureConfig, WaveletBank};
pub use graph::{generate_graph, Graph, GraphSpec, LaplacianNorm};
pub use losses::LossWeights;
pub use matrix::DenseMatrix;
