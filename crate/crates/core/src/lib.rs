//! Pairwise-trained DeepFM pre-ranker for a simulated search cascade.
//!
//! The crate covers the whole offline loop: a synthetic matching-layer corpus
//! scored by a teacher ranker ([`datagen`]), feature normalization and
//! equal-width bucketing ([`features`]), ordered-pair construction
//! ([`pairs`]), a siamese DeepFM scorer with polarization gates ([`model`],
//! [`train`]), structural pruning of closed gates ([`prune`]), Recall@N and
//! cost evaluation ([`eval`]), an interaction-free baseline ([`baseline`]),
//! and the artifact-producing pipeline stages driven by the CLI
//! ([`pipeline`]).

// Validation uses `!(x > y)` on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod features;
pub mod hashing;
pub mod model;
pub mod pairs;
pub mod pipeline;
pub mod prune;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
