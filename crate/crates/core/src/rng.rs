//! Deterministic random streams for replication-parallel simulation.
//!
//! Every replication owns a ChaCha8 stream whose 256-bit key is derived from
//! the global seed and a path of 64-bit words (domain tag, scenario hash,
//! replication index, ...). ChaCha is a counter-mode generator, so a stream
//! depends only on its key: results do not depend on which worker ran the
//! task or in which order.
//!
//! Normal variates use the Marsaglia polar method on 53-bit uniforms; both
//! variates of each accepted pair are used.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Domain tags separating the streams of independent experiments.
pub mod domain {
    pub const GAUSS_PANEL: u64 = 0x6761_7573_732d_7031; // "gauss-p1"
    pub const GAUSS_CUTOFF: u64 = 0x6761_7573_732d_6374; // "gauss-ct"
    pub const SPRINT_TRIAL: u64 = 0x7370_7269_6e74_2d74; // "sprint-t"
    pub const SPRINT_OBS: u64 = 0x7370_7269_6e74_2d6f; // "sprint-o"
    pub const SPRINT_ASSIGN: u64 = 0x7370_7269_6e74_2d61; // "sprint-a"
    pub const BOOTSTRAP: u64 = 0x626f_6f74_7374_7270; // "bootstrp"
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a word sequence.
pub fn hash_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |h, &w| mix64(h ^ mix64(w)))
}

/// Independent generator for `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = mix64(seed);
    for (lane, chunk) in key.chunks_exact_mut(8).enumerate() {
        h = mix64(h ^ hash_words(path) ^ (lane as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform on [0, 1) with 53 random bits.
#[inline]
pub fn uniform01<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal sampler (Marsaglia polar method) with a cached spare.
#[derive(Debug, Clone)]
pub struct PolarNormal<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: RngCore> PolarNormal<R> {
    pub fn new(rng: R) -> Self {
        PolarNormal { rng, spare: None }
    }

    #[inline]
    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * uniform01(&mut self.rng) - 1.0;
            let v = 2.0 * uniform01(&mut self.rng) - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }

    pub fn into_inner(self) -> R {
        self.rng
    }
}
