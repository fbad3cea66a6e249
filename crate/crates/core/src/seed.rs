//! Deterministic seed derivation.
//!
//! Every random stream in a simulation is addressed by a path of labels
//! below a 64-bit master seed, e.g. `master / "site" 3 / "iterate" / round 7 /
//! "gaussian"`. A child key is `SHA-256(parent_key || tag || label)`, where
//! `tag` distinguishes string labels from integer labels and integers are
//! encoded little-endian. The 32-byte key seeds a ChaCha8 generator.
//!
//! Because a stream depends only on its path, serial and parallel executions
//! draw identical numbers regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stage labels used by the shipped algorithms.
pub mod label {
    pub const DATA: &str = "data";
    pub const SITE: &str = "site";
    pub const DETECT: &str = "detect";
    pub const ITERATE: &str = "iterate";
    pub const ROUND: &str = "round";
    pub const PRIVATE_VARIANCE: &str = "private_variance";
    pub const GAUSSIAN: &str = "gaussian";
    pub const PEELING: &str = "peeling";
    pub const PRIVATE_RANGE: &str = "private_range";
    pub const LAPLACE: &str = "laplace";
    pub const CALIBRATION: &str = "calibration";
    pub const CELL: &str = "cell";
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree {
    key: [u8; 32],
}

impl std::fmt::Debug for SeedTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SeedTree({:016x})", self.stream_id())
    }
}

impl SeedTree {
    pub fn new(master_seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"fdp-transfer/v1");
        h.update(master_seed.to_le_bytes());
        SeedTree {
            key: h.finalize().into(),
        }
    }

    /// Child addressed by a string label.
    pub fn child(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([0u8]);
        h.update(label.as_bytes());
        SeedTree {
            key: h.finalize().into(),
        }
    }

    /// Child addressed by an integer label.
    pub fn index(&self, i: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([1u8]);
        h.update(i.to_le_bytes());
        SeedTree {
            key: h.finalize().into(),
        }
    }

    pub fn site(&self, site: u32) -> Self {
        self.child(label::SITE).index(u64::from(site))
    }

    pub fn round(&self, round: usize) -> Self {
        self.child(label::ROUND).index(round as u64)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key)
    }

    /// Short identifier recorded in transcripts.
    pub fn stream_id(&self) -> u64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.key[..8]);
        u64::from_le_bytes(b)
    }
}
