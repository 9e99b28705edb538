//! Synthetic equal-length sequence datasets with controllable temporal
//! conditional shift.
//!
//! Each label is a bilinear read-out of the `l` feature rows preceding it,
//! through a history weight vector and a feature weight vector. Both weight
//! vectors follow a seeded random walk with `Uniform(-delta, delta)`
//! increments, so `delta` directly controls how fast the feature-to-label
//! relationship drifts along the sequence. Sigmoid scores are binarized at
//! a pooled quantile threshold so the positive-label ratio lands on `r`.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::derive_seed;
use crate::error::{CoreError, Result};

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    /// Random-walk increment bound `delta >= 0`; 0 means a time-constant law.
    pub delta: f64,
    /// Feature dimension per step.
    pub d: usize,
    /// History window length feeding each label.
    pub l: usize,
    /// Sequence length.
    pub t: usize,
    /// Sequences generated for the training pool (validation is carved out
    /// of these).
    pub n_train: usize,
    /// Sequences generated for the test split.
    pub n_test: usize,
    /// Target positive-label ratio in (0, 1).
    pub r: f64,
    /// Probability that a feature entry is nonzero.
    pub sparsity: f64,
    pub seed: u64,
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta < 0.0 || !self.delta.is_finite() {
            return Err(CoreError::Config(format!(
                "delta must be finite and >= 0, got {}",
                self.delta
            )));
        }
        if self.l > self.t {
            return Err(CoreError::Config(format!(
                "history window l={} exceeds sequence length t={}",
                self.l, self.t
            )));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(CoreError::Config(format!(
                "positive ratio r must lie in (0,1), got {}",
                self.r
            )));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(CoreError::Config(format!(
                "sparsity must lie in [0,1], got {}",
                self.sparsity
            )));
        }
        if self.d == 0 || self.l == 0 || self.t == 0 {
            return Err(CoreError::Config(
                "d, l and t must all be positive".into(),
            ));
        }
        if self.n_train < 5 || self.n_test == 0 {
            return Err(CoreError::Config(format!(
                "need n_train >= 5 (for a 20% validation split) and n_test >= 1, \
                 got {}/{}",
                self.n_train, self.n_test
            )));
        }
        Ok(())
    }
}

/// Per-step generating weights: `w_l[t]` has length `l`, `w_d[t]` length `d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftWeights {
    pub w_l: Vec<Vec<f64>>,
    pub w_d: Vec<Vec<f64>>,
}

/// One generated sequence: `x` is a `t x d` row-major feature matrix, `y`
/// holds one binary label per step. `static_features` is empty for
/// synthetic data but kept so real cohorts with per-instance covariates fit
/// the same record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceInstance {
    pub x: Vec<f64>,
    pub y: Vec<u8>,
    #[serde(rename = "static")]
    pub static_features: Vec<f64>,
}

impl SequenceInstance {
    pub fn feature_row(&self, step: usize, d: usize) -> &[f64] {
        &self.x[step * d..(step + 1) * d]
    }
}

/// A generated train/validation/test corpus plus the config that made it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<SequenceInstance>,
    pub validation: Vec<SequenceInstance>,
    pub test: Vec<SequenceInstance>,
    pub config: ShiftConfig,
    pub n_classes: usize,
}

impl Dataset {
    pub fn positive_ratio(split: &[SequenceInstance]) -> f64 {
        let total: usize = split.iter().map(|s| s.y.len()).sum();
        let pos: usize = split
            .iter()
            .map(|s| s.y.iter().filter(|&&v| v == 1).count())
            .sum();
        pos as f64 / total as f64
    }
}

/// Draw the drifting weight vectors: initial entries are standard normal,
/// then `w_t = w_{t-1} + Uniform(-delta, delta)` elementwise.
pub fn generate_shift_weights(config: &ShiftConfig) -> Result<ShiftWeights> {
    config.validate()?;
    let mut rng = StdRng::seed_from_u64(derive_seed(config.seed, 0));
    let walk = |rng: &mut StdRng, dim: usize, steps: usize, delta: f64| {
        let mut out = Vec::with_capacity(steps);
        let mut cur: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        out.push(cur.clone());
        for _ in 1..steps {
            for w in cur.iter_mut() {
                // gen_range panics on an empty range, so delta = 0 is special.
                if delta > 0.0 {
                    *w += rng.gen_range(-delta..=delta);
                }
            }
            out.push(cur.clone());
        }
        out
    };
    let w_l = walk(&mut rng, config.l, config.t, config.delta);
    let w_d = walk(&mut rng, config.d, config.t, config.delta);
    Ok(ShiftWeights { w_l, w_d })
}

/// Raw sigmoid scores for one feature matrix under the generating weights.
///
/// The label at step `t` (1-based) reads the `l` rows strictly before it;
/// missing history at the start of the sequence is zero-padded.
pub fn label_scores(x: &[f64], config: &ShiftConfig, weights: &ShiftWeights) -> Vec<f64> {
    let (t_len, d, l) = (config.t, config.d, config.l);
    let mut scores = Vec::with_capacity(t_len);
    for step in 0..t_len {
        let w_l = &weights.w_l[step];
        let w_d = &weights.w_d[step];
        let mut s = 0.0;
        // history rows step-l .. step-1 (0-based), oldest first
        for (i, wl) in w_l.iter().enumerate() {
            let row = step as isize - l as isize + i as isize;
            if row < 0 {
                continue;
            }
            let row = row as usize;
            let feats = &x[row * d..(row + 1) * d];
            let dot: f64 = feats.iter().zip(w_d).map(|(f, w)| f * w).sum();
            s += wl * dot;
        }
        scores.push(1.0 / (1.0 + (-s).exp()));
    }
    scores
}

fn sample_features(config: &ShiftConfig, rng: &mut StdRng) -> Vec<f64> {
    (0..config.t * config.d)
        .map(|_| {
            let keep = rng.gen::<f64>() < config.sparsity;
            if keep {
                rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        })
        .collect()
}

/// Spread a sorted-by-positive-count list over two groups so each group's
/// label ratio tracks the pooled ratio (an even-spaced deal).
fn proportional_pick(sorted: &[usize], pick: usize) -> (Vec<usize>, Vec<usize>) {
    let total = sorted.len();
    let mut picked = Vec::with_capacity(pick);
    let mut rest = Vec::with_capacity(total - pick);
    let mut acc = 0.0;
    let frac = pick as f64 / total as f64;
    for &idx in sorted {
        acc += frac;
        if acc >= 1.0 - 1e-12 && picked.len() < pick {
            acc -= 1.0;
            picked.push(idx);
        } else {
            rest.push(idx);
        }
    }
    // Rounding can leave a shortfall; top up from the tail.
    while picked.len() < pick {
        picked.push(rest.pop().expect("enough sequences to pick from"));
    }
    (picked, rest)
}

/// Generate a full dataset: sparse Gaussian features, drifting bilinear
/// scores, quantile binarization targeting ratio `r`, and an 80/20
/// train/validation split of the training pool.
///
/// The threshold is the pooled `(1-r)`-quantile over every generated
/// sequence, and splits are dealt evenly over the per-sequence positive
/// counts, so each split's ratio stays within the `±0.01` contract at any
/// scale.
pub fn generate_dataset(config: &ShiftConfig) -> Result<Dataset> {
    config.validate()?;
    let weights = generate_shift_weights(config)?;
    let mut rng = StdRng::seed_from_u64(derive_seed(config.seed, 1));

    let n_total = config.n_train + config.n_test;
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(n_total);
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(n_total);
    for _ in 0..n_total {
        let x = sample_features(config, &mut rng);
        scores.push(label_scores(&x, config, &weights));
        features.push(x);
    }

    // Pooled quantile threshold: label = score > threshold.
    let mut pooled: Vec<f64> = scores.iter().flatten().copied().collect();
    pooled.sort_by(|a, b| b.partial_cmp(a).expect("scores are finite"));
    if pooled[0] == pooled[pooled.len() - 1] {
        return Err(CoreError::Generation(format!(
            "degenerate score distribution: all {} scores equal {} \
             (check sparsity={} and delta={})",
            pooled.len(),
            pooled[0],
            config.sparsity,
            config.delta
        )));
    }
    let k = ((pooled.len() as f64) * config.r).round() as usize;
    let k = k.clamp(1, pooled.len() - 1);
    let threshold = pooled[k];

    let mut instances: Vec<SequenceInstance> = features
        .into_iter()
        .zip(&scores)
        .map(|(x, s)| SequenceInstance {
            x,
            y: s.iter().map(|&v| u8::from(v > threshold)).collect(),
            static_features: Vec::new(),
        })
        .collect();

    let pooled_ratio = Dataset::positive_ratio(&instances);
    if (pooled_ratio - config.r).abs() > 0.01 {
        return Err(CoreError::Generation(format!(
            "pooled positive ratio {pooled_ratio:.4} missed target {} by more \
             than 0.01 (ties at the threshold?)",
            config.r
        )));
    }

    // Deal splits evenly across the positive-count order: shuffle first so
    // sequences with equal counts land in random groups.
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| instances[i].y.iter().filter(|&&v| v == 1).count());

    let (test_idx, train_pool_idx) = proportional_pick(&order, config.n_test);
    let n_val = config.n_train / 5;
    let (val_idx, train_idx) = proportional_pick(&train_pool_idx, n_val);

    let mut take = |idx: &[usize]| -> Vec<SequenceInstance> {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        sorted
            .iter()
            .map(|&i| {
                std::mem::replace(
                    &mut instances[i],
                    SequenceInstance {
                        x: Vec::new(),
                        y: Vec::new(),
                        static_features: Vec::new(),
                    },
                )
            })
            .collect()
    };
    let test = take(&test_idx);
    let validation = take(&val_idx);
    let train = take(&train_idx);

    Ok(Dataset {
        train,
        validation,
        test,
        config: config.clone(),
        n_classes: 2,
    })
}
