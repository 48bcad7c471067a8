use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose keystream is a pure function of key, stream
/// number and block counter. Equal `(seed, stream_id)` pairs give identical
/// sequences; distinct stream ids give non-overlapping keystreams. Child
/// streams are derived by hashing a path of tags into a fresh stream id, so
/// a tuple such as `(model seed, epoch, batch)` always maps to the same draws.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A child stream keyed by `tags`. Independent of how many draws have
    /// already been taken from `self`.
    pub fn derive(&self, tags: &[u64]) -> RngStream {
        let mut h = splitmix64(self.stream_id ^ 0x9E37_79B9_7F4A_7C15);
        for &t in tags {
            h = splitmix64(h ^ splitmix64(t.wrapping_add(0xD1B5_4A32_D192_ED03)));
        }
        RngStream::new(self.seed, h)
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Standard exponential via inverse CDF, `-ln(1 - u)`.
    #[inline]
    pub fn exponential(&mut self) -> f64 {
        -(-self.uniform()).ln_1p()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// `0..n` in random order.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    /// Draws a key for [`counter_uniform`]. Uniforms addressed through the key
    /// depend only on `(key, element, index)`, never on how many were read.
    pub fn counter_key(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// `k` distinct indices from `0..n`.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n} without replacement");
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
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

/// Counter-based uniform on `[0, 1)` addressed by `(key, element, index)`.
#[inline]
pub fn counter_uniform(key: u64, element: u64, index: u64) -> f64 {
    let h = splitmix64(splitmix64(key ^ element) ^ index.wrapping_mul(0xA24B_AED4_963E_E407));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
