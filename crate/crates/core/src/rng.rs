//! Labeled, counter-based random streams.
//!
//! Every stream is a ChaCha20 keystream whose key is built from
//! `(master_seed, label, index)`. Streams never share state, so clients and
//! sweep cells can run on any number of threads and still draw identical
//! numbers. Normal variates use the Box-Muller transform on 53-bit uniforms
//! with `libm` transcendentals, which keeps golden outputs stable across
//! platforms.
//!
//! This is NOT a cryptographically secure noise source for production DP;
//! it exists to make simulations reproducible.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::models::ParamVector;

/// Purpose of a stream. The discriminant is part of the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamLabel {
    Sampling,
    UpdateNoise,
    CountNoise,
    DataGen,
    ModelInit,
}

impl StreamLabel {
    fn tag(self) -> u64 {
        match self {
            StreamLabel::Sampling => 0x5341_4d50,
            StreamLabel::UpdateNoise => 0x5550_4454,
            StreamLabel::CountNoise => 0x434e_5453,
            StreamLabel::DataGen => 0x4441_5441,
            StreamLabel::ModelInit => 0x494e_4954,
        }
    }
}

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    label: StreamLabel,
    index: u64,
    inner: ChaCha20Rng,
}

impl RngStream {
    /// Opens the stream keyed by `(master_seed, label, index)`. `index` is
    /// the round number for per-round streams and the user index for data
    /// generation.
    pub fn new(master_seed: u64, label: StreamLabel, index: u64) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&label.tag().to_le_bytes());
        key[16..24].copy_from_slice(&index.to_le_bytes());
        key[24..32].copy_from_slice(b"adaclip\0");
        Self {
            master_seed,
            label,
            index,
            inner: ChaCha20Rng::from_seed(key),
        }
    }

    pub fn label(&self) -> StreamLabel {
        self.label
    }

    pub fn key(&self) -> (u64, StreamLabel, u64) {
        (self.master_seed, self.label, self.index)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform in `(0, 1]`.
    fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn uniform_int(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi);
        let span = hi - lo + 1;
        if span == 0 {
            return self.next_u64();
        }
        // Rejection sampling keeps the distribution exactly uniform.
        let zone = u64::MAX - (u64::MAX % span) - 1;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return lo + v % span;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }

    /// One standard normal draw. Consumes a full Box-Muller pair.
    pub fn standard_normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    pub fn gaussian(&mut self, stddev: f64) -> f64 {
        if stddev == 0.0 {
            return 0.0;
        }
        stddev * self.standard_normal()
    }

    /// `dim` i.i.d. draws from N(0, stddev²). A zero stddev returns zeros
    /// without advancing the stream.
    pub fn gaussian_vector(&mut self, dim: usize, stddev: f64) -> ParamVector {
        assert!(stddev >= 0.0, "stddev must be non-negative");
        let mut values = vec![0.0; dim];
        if stddev == 0.0 {
            return ParamVector::from(values);
        }
        for chunk in values.chunks_mut(2) {
            let (a, b) = self.normal_pair();
            chunk[0] = stddev * a;
            if let Some(slot) = chunk.get_mut(1) {
                *slot = stddev * b;
            }
        }
        ParamVector::from(values)
    }
}

/// Stateless convenience wrapper around [`RngStream::gaussian_vector`].
pub fn gaussian_vector(stream: &mut RngStream, dim: usize, stddev: f64) -> ParamVector {
    stream.gaussian_vector(dim, stddev)
}

/// Salts a master seed with a sweep cell index. Index 0 maps to the seed
/// itself so a one-cell sweep replays a plain run.
pub fn salted_seed(master_seed: u64, cell_index: u64) -> u64 {
    master_seed ^ cell_index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_stddev_is_zero_and_does_not_consume() {
        let mut a = RngStream::new(7, StreamLabel::UpdateNoise, 3);
        let mut b = a.clone();
        let v = a.gaussian_vector(5, 0.0);
        assert!(v.iter().all(|&x| x == 0.0));
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn same_key_same_sequence() {
        let mut a = RngStream::new(42, StreamLabel::CountNoise, 11);
        let mut b = RngStream::new(42, StreamLabel::CountNoise, 11);
        assert_eq!(a.gaussian_vector(33, 1.5), b.gaussian_vector(33, 1.5));
    }

    #[test]
    fn labels_and_rounds_separate_streams() {
        let base = RngStream::new(42, StreamLabel::Sampling, 0).next_u64();
        assert_ne!(base, RngStream::new(42, StreamLabel::UpdateNoise, 0).next_u64());
        assert_ne!(base, RngStream::new(42, StreamLabel::Sampling, 1).next_u64());
        assert_ne!(base, RngStream::new(43, StreamLabel::Sampling, 0).next_u64());
    }

    #[test]
    fn stream_isolation() {
        let mut noise = RngStream::new(1, StreamLabel::UpdateNoise, 0);
        let expected = RngStream::new(1, StreamLabel::CountNoise, 0).gaussian(1.0);
        let _ = noise.gaussian_vector(1000, 1.0);
        let mut count = RngStream::new(1, StreamLabel::CountNoise, 0);
        assert_eq!(count.gaussian(1.0), expected);
    }

    #[test]
    fn million_draws_moments() {
        let mut s = RngStream::new(2024, StreamLabel::UpdateNoise, 0);
        let v = s.gaussian_vector(1_000_000, 1.0);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.004, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.005, "sd {}", var.sqrt());
    }

    #[test]
    fn uniform_int_in_range() {
        let mut s = RngStream::new(5, StreamLabel::DataGen, 0);
        for _ in 0..1000 {
            let v = s.uniform_int(3, 7);
            assert!((3..=7).contains(&v));
        }
    }

    #[test]
    fn salt_zero_is_identity() {
        assert_eq!(salted_seed(99, 0), 99);
        assert_ne!(salted_seed(99, 1), 99);
    }
}
