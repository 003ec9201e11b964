//! Deterministic random streams keyed by `(seed, purpose, labels…)`.
//!
//! Every consumer (data generation, partitioning, per-client shuffling,
//! adapter init) gets its own ChaCha stream whose key is a hash of the
//! experiment seed and a label path, so results never depend on the order
//! in which clients or layers are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for [`stream`]. Distinct tags keep streams disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    LoraInit = 1,
    Task = 2,
    Partition = 3,
    LocalTrain = 4,
    Reinit = 5,
    Fixture = 6,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 256-bit ChaCha key from the seed and label path.
pub fn stream_key(seed: u64, purpose: Purpose, labels: &[u64]) -> [u8; 32] {
    let mut h = mix64(seed ^ 0x9e37_79b9_7f4a_7c15);
    h = mix64(h ^ (purpose as u64).wrapping_mul(0xd134_2543_de82_ef95));
    for &l in labels {
        h = mix64(h.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix64(l));
    }
    let mut key = [0u8; 32];
    let mut word = h;
    for chunk in key.chunks_mut(8) {
        word = mix64(word.wrapping_add(0x9e37_79b9_7f4a_7c15));
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    key
}

pub fn stream(seed: u64, purpose: Purpose, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_key(seed, purpose, labels))
}

/// Stable 64-bit label for a string id (FNV-1a).
pub fn label(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
