use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Splittable seeded generator.
///
/// Each named stream is a ChaCha8 keystream: the key comes from
/// `ChaCha8Rng::seed_from_u64(seed)` and the 64-bit stream id is the FNV-1a
/// hash of the label bytes followed by the little-endian index. Streams are
/// independent of each other and of the order in which they are opened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prng {
    seed: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, label: &str) -> Stream {
        self.stream_indexed(label, 0)
    }

    pub fn stream_indexed(&self, label: &str, index: u64) -> Stream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream_id(label, index));
        Stream { rng }
    }

    /// Child generator whose seed is derived from this one and `label`.
    pub fn split(&self, label: &str) -> Prng {
        let mut s = self.stream_indexed(label, u64::MAX);
        Prng::new(s.rng.random())
    }
}

fn stream_id(label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes().iter().chain(index.to_le_bytes().iter()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One keystream of a [`Prng`].
#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f32 {
        self.rng.random()
    }

    pub fn normal(&mut self) -> f32 {
        self.rng.sample::<f32, _>(StandardNormal)
    }

    pub fn normals(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n).map(|_| self.normal() * std).collect()
    }

    pub fn uniforms(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| lo + (hi - lo) * self.uniform()).collect()
    }
}
