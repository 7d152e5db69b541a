//! Seed derivation for independent, reproducible random streams.
//!
//! Every stochastic step (client sampling, local shuffling, noise) draws from
//! its own ChaCha stream keyed by a path such as `(root, round, cohort,
//! client)`, so execution order never changes the numbers drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stream purposes, mixed into the derivation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ClientSampling = 1,
    LocalShuffle = 2,
    CohortNoise = 3,
    CohortSplit = 4,
    ClientSplit = 5,
    TrainTestSplit = 6,
    Synthetic = 7,
    EvalSubset = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a root seed and a path of integers into a new seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(root: u64, purpose: Stream, path: &[u64]) -> ChaCha20Rng {
    let mut full = Vec::with_capacity(path.len() + 1);
    full.push(purpose as u64);
    full.extend_from_slice(path);
    ChaCha20Rng::seed_from_u64(derive_seed(root, &full))
}
