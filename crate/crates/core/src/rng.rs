//! Named, seekable random streams derived from one master seed.
//!
//! Every source of randomness (data order, timesteps, noise, projection
//! sampling, the self-conditioning coin) draws from its own stream so that
//! each can be perturbed or replayed independently. A stream's position is a
//! single `u128` word offset, which is what checkpoints persist.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::Scalar;

pub const DATA: &str = "data";
pub const TIMESTEP: &str = "timestep";
pub const NOISE: &str = "noise";
pub const PROJECTION: &str = "projection";
pub const BRANCH: &str = "branch";
pub const INIT: &str = "init";

#[derive(Clone, Debug)]
pub struct RngStream {
    name: String,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn named(master_seed: u64, name: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(master_seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        RngStream {
            name: name.to_string(),
            inner: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn seek(&mut self, position: u128) {
        self.inner.set_word_pos(position);
    }

    pub fn standard_normal<S: Scalar>(&mut self) -> S {
        let z: f64 = self.inner.sample(StandardNormal);
        S::of(z)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// The fixed set of streams used by training, restorable from positions.
#[derive(Clone, Debug)]
pub struct StreamSet {
    pub seed: u64,
    pub data: RngStream,
    pub timestep: RngStream,
    pub noise: RngStream,
    pub branch: RngStream,
}

impl StreamSet {
    pub fn new(seed: u64) -> Self {
        StreamSet {
            seed,
            data: RngStream::named(seed, DATA),
            timestep: RngStream::named(seed, TIMESTEP),
            noise: RngStream::named(seed, NOISE),
            branch: RngStream::named(seed, BRANCH),
        }
    }

    pub fn positions(&self) -> [(&'static str, u128); 4] {
        [
            (DATA, self.data.position()),
            (TIMESTEP, self.timestep.position()),
            (NOISE, self.noise.position()),
            (BRANCH, self.branch.position()),
        ]
    }

    pub fn restore(seed: u64, positions: &[(String, u128)]) -> Self {
        let mut set = StreamSet::new(seed);
        for (name, pos) in positions {
            match name.as_str() {
                DATA => set.data.seek(*pos),
                TIMESTEP => set.timestep.seek(*pos),
                NOISE => set.noise.seek(*pos),
                BRANCH => set.branch.seek(*pos),
                _ => {}
            }
        }
        set
    }
}
