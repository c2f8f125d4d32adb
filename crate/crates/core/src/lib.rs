//! Two-stage dense video captioning.
//!
//! Stage one proposes scored temporal segments and selects an ordered event
//! sequence from them; stage two encodes the events with a temporal-semantic
//! relation module and captions them with a gated hierarchical recurrent
//! decoder. Training (cross-entropy, self-critical), gradient checking and the
//! captioning metrics live alongside.
//!
//! All model math is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the precision used by the command-line tool.

pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod esgn;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod proposals;
pub mod scalar;
pub mod tape;
pub mod training;
pub mod tsrm;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 64-bit FNV-1a hash, used for configuration and vocabulary fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Precision used for training and inference by the command-line tool.
pub type Real = f32;
pub type RealCaptioner = model::Captioner<Real>;
pub type RealSelector = esgn::Selector<Real>;
pub type RealScorer = proposals::ProposalScorer<Real>;
pub type RealCheckpoint = checkpoint::Checkpoint<Real>;
