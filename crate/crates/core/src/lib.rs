//! Core numerics for zero-shot composed person retrieval with pseudo-word
//! textual inversion.
//!
//! The crate is `no_std` (it only needs `alloc`). It covers the two training
//! stages, the losses that drive them, query composition, gallery ranking,
//! retrieval metrics and the curation helpers. Everything that touches the
//! filesystem, the network or an image codec lives in the `word4per` crate.
//!
//! The pipeline, end to end:
//!
//! 1. fine-tune a dual encoder with [`losses::irr_loss`],
//!    [`losses::cmpm_loss`] and [`losses::id_loss`] ([`training::run_stage1`]);
//! 2. freeze it, cache global features ([`cache::build_feature_cache`]) and
//!    train one or more [`tinet::TiNet`]s that map an image embedding to a
//!    pseudo-word token ([`training::run_stage2`]);
//! 3. at query time splice the pseudo-word into `a [S*] is {caption}`,
//!    encode it as text and rank the gallery ([`retrieval`]).
#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod cache;
pub mod curation;
pub mod dataset;
pub mod encoder;
mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod random;
pub mod recipe;
pub mod retrieval;
pub mod schedule;
pub mod synth;
pub mod tinet;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;

/// 32-byte SHA-256 digest identifying a set of encoder parameters.
pub type Fingerprint = [u8; 32];

/// Global embedding as produced by an encoder (storage precision).
pub type Embedding = alloc::vec::Vec<f32>;
