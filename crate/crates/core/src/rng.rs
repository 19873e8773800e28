//! Counter-style random streams.
//!
//! Every stochastic operation draws from a stream keyed by
//! `(master_seed, purpose_tag, indices...)`. Streams for different members
//! never share state, so growing an ensemble leaves existing members intact
//! and results do not depend on thread scheduling.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

const fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derives a 64-bit seed from a master seed, a purpose tag and indices.
pub fn derive(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(tag_hash(tag)));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0xA5A5_A5A5)));
    }
    h
}

pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive(seed, tag, indices))
}

pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vector<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}
