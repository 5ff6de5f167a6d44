//! Lifelong language learning on a stream of QA-formatted tasks.
//!
//! A small decoder-only transformer learns tasks one after another. Before
//! each new task it generates pseudo samples of the earlier tasks and trains
//! on them alongside the new data. An optional residual VAE adapter sits
//! between two transformer blocks and mixes a reconstruction of the hidden
//! state back into the residual stream.

pub mod bench;
pub mod cli;
pub mod error;
pub mod llltrain;
pub mod numcore;
pub mod rng;
pub mod rvae;
pub mod taskfmt;
pub mod tinylm;

pub use error::{Error, Result};
