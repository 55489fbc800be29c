//! Contrastive pre-training of a discriminative autoencoder for dense
//! retrieval, at desk scale.
//!
//! The pipeline: [`text`] builds the corpus and masked views, [`model`] holds
//! the encoder and MLP decoder, [`losses`] the training objectives,
//! [`pretrain`] and [`finetune`] the two training stages and [`eval`] the
//! retrieval metrics and decoding probes.

pub mod checkpoint;
mod error;
pub mod eval;
pub mod experiment;
pub mod finetune;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod text;

pub use error::{Error, Result};
