//! Contrastive masked autoencoder pretraining for vision transformers.
//!
//! Masked image modeling is combined with a momentum-contrastive branch, a
//! token location prediction task, semantic-aware cropping and a family of
//! interchangeable pixel decoders. Every swappable piece (crop mode, heatmap
//! source, decoder family, decoder block) sits behind a trait and is looked
//! up by name in a [`registry::Registry`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod crop;
pub mod datapipe;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod masking;
pub mod nn;
pub mod objectives;
pub mod registry;
pub mod rng;

pub use error::{CmaeError, Result};
