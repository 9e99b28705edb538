//! Shared fixtures for the criterion benchmarks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use maes_core::datagen::SequenceInstance;

/// Random sequences shaped like the toy benchmark data.
pub fn synthetic_batch(n: usize, t_len: usize, d: usize, seed: u64) -> Vec<SequenceInstance> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| SequenceInstance {
            x: (0..t_len * d).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            y: (0..t_len).map(|_| u8::from(rng.gen::<f64>() < 0.25)).collect(),
            static_features: Vec::new(),
        })
        .collect()
}
