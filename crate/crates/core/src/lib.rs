//! Group point-of-interest recommendation on top of a frozen, quantized
//! decoder-only sequence model with low-rank adapters.
//!
//! The pipeline: [`corpus`] ingests check-ins and mines groups, [`seqmodel`]
//! holds the frozen base model and POI-token vocabulary, [`qlora`] provides
//! quantized linear layers and adapters, [`grouprep`] turns sequences into
//! embeddings and scores, [`ssl`] supplies trip-purpose labels, [`training`]
//! runs the three adapter stages and [`evalkit`] measures ranking quality.

pub mod config;
pub mod corpus;
pub mod evalkit;
pub mod error;
pub mod geo;
pub mod grouprep;
pub mod optim;
pub mod pipeline;
pub mod qlora;
pub mod seqmodel;
pub mod ssl;
pub mod store;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
