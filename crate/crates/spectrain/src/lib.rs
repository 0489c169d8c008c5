//! File formats, checkpoints, the invariant suite and the command-line
//! front end for [`spectrain_core`].
//!
//! Datasets are line-delimited JSON, one graph per line (see [`dataset`]).
//! Run configs are a single JSON object holding
//! [`PretrainConfig`](spectrain_core::training::PretrainConfig) fields plus a few
//! command-specific keys (see [`config`]). Checkpoints are JSON documents
//! described in [`checkpoint`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod invariants;
pub mod output;
