//! Seeded, splittable randomness.
//!
//! Every random draw in the crate comes from a [`SeedStream`] rooted at a
//! single 64-bit seed. Child streams are derived by mixing a label into the
//! parent key, and each stream is backed by ChaCha8, a counter-based
//! generator, so results depend only on the seed and the derivation path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn mix_label(key: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(key ^ splitmix64(h))
}

/// A node in the seed derivation tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { key: splitmix64(seed) }
    }

    /// Child stream identified by a label.
    pub fn child(&self, label: &str) -> SeedStream {
        SeedStream {
            key: mix_label(self.key, label),
        }
    }

    /// Child stream identified by an index (trajectories, tuples, episodes).
    pub fn index(&self, i: u64) -> SeedStream {
        SeedStream {
            key: splitmix64(self.key ^ splitmix64(i.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

/// One standard normal draw.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
