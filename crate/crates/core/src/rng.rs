//! Deterministic, checkpointable random streams.
//!
//! One master seed fans out into named streams (init, data order,
//! augmentation, drop-path, controller sampling). Each stream is a ChaCha
//! generator whose position can be saved and restored, so an interrupted run
//! resumes bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Seedable random stream with an explicitly serializable position.
#[derive(Debug, Clone)]
pub struct DetRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl DetRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        DetRng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Current position in the stream, for checkpoints.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Restore a stream to a checkpointed position.
    pub fn restore(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut rng = Self::new(seed, stream);
        rng.inner.set_word_pos(word_pos);
        rng
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).unwrap().sample(&mut self.inner)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Sample an index from an explicit probability vector (sums to ~1).
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}

/// The named streams a training run owns.
#[derive(Debug, Clone)]
pub struct RngSet {
    pub init: DetRng,
    pub data: DetRng,
    pub augment: DetRng,
    pub drop_path: DetRng,
    pub controller: DetRng,
}

impl RngSet {
    pub fn new(seed: u64) -> Self {
        RngSet {
            init: DetRng::new(seed, 0),
            data: DetRng::new(seed, 1),
            augment: DetRng::new(seed, 2),
            drop_path: DetRng::new(seed, 3),
            controller: DetRng::new(seed, 4),
        }
    }

    pub fn streams(&self) -> [&DetRng; 5] {
        [
            &self.init,
            &self.data,
            &self.augment,
            &self.drop_path,
            &self.controller,
        ]
    }

    pub fn streams_mut(&mut self) -> [&mut DetRng; 5] {
        [
            &mut self.init,
            &mut self.data,
            &mut self.augment,
            &mut self.drop_path,
            &mut self.controller,
        ]
    }
}
