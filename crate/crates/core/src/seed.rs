//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by `(master_seed, round, tag)` and
//! hashed with SHA-256, so streams are independent of each other and of the
//! order in which work is scheduled. Tags used by the library:
//!
//! | tag                  | stream                                   |
//! |----------------------|------------------------------------------|
//! | `init`               | initial model weights                    |
//! | `select`             | base random selection of `m` clients     |
//! | `augment`            | random augmentation (ablation)           |
//! | `masks`              | secure-aggregation pairwise masks        |
//! | `shuffle/<client>`   | minibatch order inside a client update   |
//! | `dropout/<client>`   | dropout masks inside a client update     |
//! | `repeat`             | master seed of repeat `r` in a grid cell |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used for every seeded stream in the crate.
pub type SimRng = ChaCha8Rng;

pub fn derive_seed(master_seed: u64, round: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"dcfl/seed/v1");
    hasher.update(master_seed.to_le_bytes());
    hasher.update(round.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn derive_rng(master_seed: u64, round: u64, tag: &str) -> SimRng {
    rng_from_seed(derive_seed(master_seed, round, tag))
}
