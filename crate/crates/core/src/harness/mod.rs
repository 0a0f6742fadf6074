//! End-to-end workflows behind the `ttl` command line: synthetic datasets,
//! encoder pretraining, evaluation, sweeps and CSV reports.

pub mod container;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod pretrain;
pub mod shifts;
pub mod sweep;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A ChaCha8 stream keyed by an 8-byte tag and three integers.
pub(crate) fn keyed_rng(tag: &[u8; 8], seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(tag);
    key[8..16].copy_from_slice(&seed.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
