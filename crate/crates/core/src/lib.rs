//! Hallucination-insensitivity model editing for transformer decoders.
//!
//! Pipeline: contrastive caption pairs ([`corpus`]) are run through a decoder
//! ([`decoder`]); per-layer attention divergence ([`his`]) sets editing
//! strengths; attention-weighted feature differences give a low-rank subspace
//! per layer ([`subspace`]); MLP weights are projected away from it
//! ([`editor`]); captions are scored with [`chair`].
#![no_std]

extern crate alloc;

pub mod chair;
pub mod corpus;
pub mod decoder;
pub mod editor;
pub mod error;
pub mod his;
pub mod numerics;
pub mod planted;
pub mod subspace;

pub use error::{Error, Result};
