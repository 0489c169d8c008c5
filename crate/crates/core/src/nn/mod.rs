//! Differentiable model components.
//!
//! Everything here runs on [`tape::Tape`]: a forward pass records values,
//! `backward` produces parameter gradients, and [`adam`] applies them.

pub mod adam;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod ortho;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{Bound, Mlp, Mode, NamedParam, ParamId, ParamStore};
pub use model::{DownstreamConfig, EigenHeadConfig, GraphInput, HeadKind, Model, ModelConfig};
pub use ortho::orthonormalize;
pub use tape::{Tape, Tensor};
