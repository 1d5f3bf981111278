//! Contrastive alignment of two token-embedding modalities.
//!
//! Each modality is pooled to a single unit vector by its own attention
//! head ([`projector`]); the heads are trained jointly with a CLIP or
//! SigLIP objective ([`losses`], [`trainer`]) and evaluated by
//! sequence→structure Recall@K ([`retrieval`]).

pub mod cli;
pub mod dataio;
pub mod error;
pub mod losses;
pub mod numkit;
pub mod projector;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
