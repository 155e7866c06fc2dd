use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::scalar::Scalar;

/// Counter-based random stream: output is a pure function of
/// `(seed, stream, counter)`.
///
/// Backed by ChaCha8, whose keystream is indexed by a 64-bit stream id and a
/// word position, so a stream can be reconstructed anywhere from its triple.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        RngStream {
            seed,
            stream,
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Child stream `index` of this stream. Pure: does not advance `self`.
    pub fn child(&self, index: u64) -> RngStream {
        let id = splitmix64(self.stream ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)));
        RngStream::with_stream(self.seed, id)
    }

    /// Draws a fresh child stream id from this stream, advancing it.
    pub fn fork(&mut self) -> RngStream {
        let id = self.with_engine(|r| r.next_u64());
        RngStream::with_stream(self.seed, splitmix64(id))
    }

    /// Runs `f` against the engine positioned at the current counter and
    /// stores the advanced position afterwards.
    pub fn with_engine<R>(&mut self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        let mut engine = ChaCha8Rng::seed_from_u64(self.seed);
        engine.set_stream(self.stream);
        engine.set_word_pos(self.counter as u128);
        let out = f(&mut engine);
        self.counter = engine.get_word_pos() as u64;
        out
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.with_engine(|r| r.random::<f64>())
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.with_engine(|r| r.random_range(0..n))
    }

    pub fn normal(&mut self) -> f64 {
        self.with_engine(|r| r.sample(StandardNormal))
    }

    /// Tensor of i.i.d. standard normal draws.
    pub fn gaussian<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = self.with_engine(|r| {
            (0..n)
                .map(|_| T::of(r.sample::<f64, _>(StandardNormal)))
                .collect()
        });
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.with_engine(|r| {
            for i in (1..n).rev() {
                let j = r.random_range(0..=i);
                idx.swap(i, j);
            }
        });
        idx
    }
}
