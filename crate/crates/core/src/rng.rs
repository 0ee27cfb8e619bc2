//! Deterministic random streams.
//!
//! Every source of randomness in a run is derived from one manifest seed
//! through named substreams, so any component can be re-executed in isolation
//! and parallel workers never contend for a shared generator. A substream is
//! identified by a purpose tag plus integer indices (epoch, batch, network,
//! restart, ...); the tuple is hashed into a fresh ChaCha seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Purpose tags for the named substreams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Synthetic data generation.
    Data,
    /// Parameter initialization.
    Init,
    /// Adversarial example generation during training.
    Attack,
    /// Data augmentation.
    Augment,
    /// Minibatch order shuffling.
    Shuffle,
    /// Train/validation/test splitting.
    Split,
    /// Attack generation during evaluation.
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Attack => 3,
            Stream::Augment => 4,
            Stream::Shuffle => 5,
            Stream::Split => 6,
            Stream::Eval => 7,
        }
    }
}

/// Derive a generator for `(seed, purpose, indices...)`.
pub fn substream(seed: u64, purpose: Stream, indices: &[u64]) -> ChaCha8Rng {
    derive(seed, purpose.tag(), indices)
}

/// Derive a generator from a raw pre-hashed key, used where the caller has
/// already combined its indices (e.g. per-restart streams inside an attack).
pub fn derive(seed: u64, tag: u64, indices: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.to_le_bytes());
    for ix in indices {
        hasher.update(ix.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Collapse a key tuple into a single u64, for APIs that accept one seed.
pub fn fold_key(seed: u64, purpose: Stream, indices: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.tag().to_le_bytes());
    for ix in indices {
        hasher.update(ix.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
