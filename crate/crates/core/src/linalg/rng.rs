use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;

/// Deterministic random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8, a counter-based generator whose 64-bit stream selector
/// gives every `(seed, stream_id)` pair an independent sequence. Streams never
/// share state, so consuming one (say, a client that was selected this round)
/// cannot shift another.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Stream derived from a list of labels, e.g. `[purpose, client, round]`.
    pub fn derive(seed: u64, labels: &[u64]) -> Self {
        Self::new(seed, stream_id(labels))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// `rows × cols` matrix of independent `N(mean, std²)` draws.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
        debug_assert!(std >= 0.0);
        Matrix::from_fn(rows, cols, |_, _| mean + std * self.standard_normal())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `0..len`, sorted ascending.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.inner, len, amount).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// Mixes a label list into a single 64-bit stream id (splitmix64 finaliser
/// folded over the labels).
pub fn stream_id(labels: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &label in labels {
        h = splitmix64(h ^ splitmix64(label));
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream purposes. Combined with client and round indices in
/// [`SeededRng::derive`].
pub mod purpose {
    pub const BASE_INIT: u64 = 1;
    pub const ADAPTER_INIT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SELECTION: u64 = 5;
}
