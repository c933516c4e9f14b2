// SPDX-License-Identifier: MIT OR Apache-2.0

//! Outlier-resistant conditional diffusion model for probabilistic
//! time-series quality assessment and cleaning.
//!
//! A recurrent network summarizes the recent history of a series, a
//! residual network learns to denoise the next value conditioned on that
//! summary, and the spread of many reverse-diffusion samples turns into a
//! per-point outlier probability. [`pipeline::run_cleaning`] iterates
//! training, scoring and imputation until the error variance settles.

#![deny(unsafe_code)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod networks;
pub mod pipeline;
pub mod quality;
pub mod schedule;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream for `(seed, purpose, a, b)`; every consumer of
/// randomness derives its generator here so runs are reproducible and
/// streams never overlap.
pub(crate) fn stream_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = seed;
    for word in [purpose, a] {
        key = splitmix64(key ^ splitmix64(word));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(b);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
