//! Wasserstein-barycenter domain generalization on desk-scale problems.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`diffmath`]),
//! probability measures with closed-form divergences ([`measures`]),
//! entropic optimal transport and free-support barycenters ([`ot`]),
//! numeric checks of transport-inequality risk bounds ([`bounds`]),
//! mutual-information gradient estimation ([`mi`]), the barycenter-regularized
//! training loops ([`dg`]), multi-domain datasets ([`data`]) and the `otdg`
//! command-line front end ([`cli`]).

pub mod bounds;
pub mod cli;
pub mod data;
pub mod dg;
pub mod diffmath;
pub mod error;
pub mod measures;
pub mod mi;
pub mod ot;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Portable deterministic RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
