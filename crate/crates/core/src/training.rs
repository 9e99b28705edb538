//! Shared training machinery: sequence batching, the binary cross-entropy
//! objective, an epoch loop with best-on-validation saving, and batched
//! prediction.
//!
//! Whole sequences are shuffled into batches; the loss of a batch is summed
//! over its sequences and over all prediction steps.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::datagen::SequenceInstance;
use crate::diffcore::{
    derive_seed, AdamConfig, AdamState, NodeId, ParamBinding, ParamSet, Tape,
};
use crate::error::{CoreError, Result};
use crate::metrics::stepwise_apr;
use crate::seqmodels::LstmModel;

/// Probabilities are clamped to `[GUARD, 1 - GUARD]` before any logarithm.
pub const PROB_GUARD: f64 = 1e-7;

/// One epoch's record in a training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `"pretrain"` or `"joint"` for the ensemble; `"bce"` for single models.
    pub phase: String,
    /// Training loss per sequence (epoch total / number of sequences).
    pub train_loss: f64,
    /// Validation loss per sequence under the same objective.
    pub val_loss: f64,
    /// Step-averaged APR on the validation split.
    pub val_apr: f64,
}

/// Knobs for single-model BCE training.
#[derive(Debug, Clone, Copy)]
pub struct SgdOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Keep the parameters of the best validation-APR epoch instead of the
    /// final ones.
    pub save_best: bool,
}

/// A trained model: parameters plus its per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
    /// Index into `history` of the retained parameters.
    pub best_epoch: usize,
}

/// Per-step `[batch, d]` feature constants for a batch of sequences.
pub fn batch_inputs(
    tape: &mut Tape,
    batch: &[&SequenceInstance],
    d: usize,
    t_len: usize,
) -> Result<Vec<NodeId>> {
    let b = batch.len();
    let mut nodes = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut values = Vec::with_capacity(b * d);
        for inst in batch {
            values.extend_from_slice(inst.feature_row(t, d));
        }
        nodes.push(tape.constant(values, &[b, d])?);
    }
    Ok(nodes)
}

/// Per-step label columns, replicated to `width` so they line up with
/// `[batch, width]` prediction tensors.
pub fn batch_labels(
    tape: &mut Tape,
    batch: &[&SequenceInstance],
    t_len: usize,
    width: usize,
) -> Result<Vec<NodeId>> {
    let b = batch.len();
    let mut nodes = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut values = Vec::with_capacity(b * width);
        for inst in batch {
            values.extend(std::iter::repeat_n(inst.y[t] as f64, width));
        }
        nodes.push(tape.constant(values, &[b, width])?);
    }
    Ok(nodes)
}

/// Sum over the batch of `-(y ln p + (1-y) ln(1-p))` for one step's
/// `[batch, 1]` probabilities.
pub fn bce_sum(tape: &mut Tape, prob: NodeId, labels: NodeId) -> Result<NodeId> {
    let p = tape.clamp(prob, PROB_GUARD, 1.0 - PROB_GUARD);
    let log_p = tape.log(p);
    let one_minus = tape.affine(p, -1.0, 1.0);
    let log_q = tape.log(one_minus);
    let y_term = tape.mul(log_p, labels)?;
    let flipped = tape.affine(labels, -1.0, 1.0);
    let q_term = tape.mul(log_q, flipped)?;
    let ll = tape.add(y_term, q_term)?;
    let total = tape.sum(ll);
    Ok(tape.neg(total))
}

/// Total BCE of a probability series against a batch's labels.
pub fn bce_series_sum(
    tape: &mut Tape,
    probs: &[NodeId],
    labels: &[NodeId],
) -> Result<NodeId> {
    let mut total = tape.constant_scalar(0.0);
    for (&p, &y) in probs.iter().zip(labels) {
        let step = bce_sum(tape, p, y)?;
        total = tape.add(total, step)?;
    }
    Ok(total)
}

/// Shuffled index batches for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut StdRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Class-1 probability grid `[n][t]` for a set of sequences, evaluated in
/// batches without gradient tracking.
pub fn predict_lstm(
    model: &LstmModel,
    params: &ParamSet,
    instances: &[SequenceInstance],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let d = model.input_dim;
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch_size.max(1)) {
        let refs: Vec<&SequenceInstance> = chunk.iter().collect();
        let t_len = refs[0].y.len();
        let mut tape = Tape::new();
        let binding = ParamBinding::bind_frozen(&mut tape, params);
        let xs = batch_inputs(&mut tape, &refs, d, t_len)?;
        let probs = model.forward(&mut tape, &binding, &xs)?;
        let b = refs.len();
        let mut rows = vec![Vec::with_capacity(t_len); b];
        for &p in &probs {
            let col = tape.value(p);
            for (i, row) in rows.iter_mut().enumerate() {
                row.push(col[i]);
            }
        }
        out.extend(rows);
    }
    Ok(out)
}

fn labels_grid(instances: &[SequenceInstance]) -> Vec<Vec<u8>> {
    instances.iter().map(|i| i.y.clone()).collect()
}

/// Total BCE of a prediction grid, summed over sequences and steps.
pub fn bce_sum_of_grid(predictions: &[Vec<f64>], labels: &[Vec<u8>]) -> f64 {
    let mut total = 0.0;
    for (p_row, y_row) in predictions.iter().zip(labels) {
        for (&p, &y) in p_row.iter().zip(y_row) {
            let p = p.clamp(PROB_GUARD, 1.0 - PROB_GUARD);
            total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    total
}

/// Mean-per-sequence BCE of a prediction grid (evaluation mode).
pub fn bce_of_grid(predictions: &[Vec<f64>], labels: &[Vec<u8>]) -> f64 {
    bce_sum_of_grid(predictions, labels) / predictions.len() as f64
}

/// Train one LSTM with BCE and Adam from freshly initialized parameters.
pub fn train_lstm_bce(
    model: &LstmModel,
    train: &[SequenceInstance],
    validation: &[SequenceInstance],
    opts: &SgdOptions,
) -> Result<TrainOutput> {
    let mut params = ParamSet::new(derive_seed(opts.seed, 100));
    let mut rng = params.rng();
    model.init_params(&mut params, &mut rng)?;
    train_lstm_bce_from(model, params, train, validation, opts)
}

/// Train one LSTM with BCE and Adam, continuing from the given parameters.
pub fn train_lstm_bce_from(
    model: &LstmModel,
    mut params: ParamSet,
    train: &[SequenceInstance],
    validation: &[SequenceInstance],
    opts: &SgdOptions,
) -> Result<TrainOutput> {
    if train.is_empty() || validation.is_empty() {
        return Err(CoreError::Training(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let mut shuffle_rng = StdRng::seed_from_u64(derive_seed(opts.seed, 101));
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(opts.learning_rate));

    let d = model.input_dim;
    let t_len = train[0].y.len();
    let mut history = Vec::with_capacity(opts.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;

    for epoch in 0..opts.epochs {
        let mut epoch_loss = 0.0;
        for batch in epoch_batches(train.len(), opts.batch_size, &mut shuffle_rng) {
            let refs: Vec<&SequenceInstance> = batch.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let binding = ParamBinding::bind(&mut tape, &params);
            let xs = batch_inputs(&mut tape, &refs, d, t_len)?;
            let ys = batch_labels(&mut tape, &refs, t_len, 1)?;
            let probs = model.forward(&mut tape, &binding, &xs)?;
            let loss = bce_series_sum(&mut tape, &probs, &ys)?;
            let loss_value = tape.value_scalar(loss)?;
            if !loss_value.is_finite() {
                return Err(CoreError::Training(format!(
                    "non-finite BCE loss {loss_value} at epoch {epoch}, \
                     batch starting with sequence {}",
                    batch[0]
                )));
            }
            epoch_loss += loss_value;
            params.zero_grads();
            tape.backward(loss)?;
            binding.accumulate_grads(&tape, &mut params)?;
            adam.step(&mut params)?;
        }

        let val_preds = predict_lstm(model, &params, validation, opts.batch_size)?;
        let val_labels = labels_grid(validation);
        let val_apr = stepwise_apr(&val_preds, &val_labels)?.mean_apr;
        let record = EpochRecord {
            epoch,
            phase: "bce".into(),
            train_loss: epoch_loss / train.len() as f64,
            val_loss: bce_of_grid(&val_preds, &val_labels),
            val_apr,
        };
        if best.as_ref().map(|(_, apr, _)| val_apr > *apr).unwrap_or(true) {
            best = Some((epoch, val_apr, params.clone()));
        }
        history.push(record);
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutput {
        params: if opts.save_best { best_params } else { params },
        history,
        best_epoch: if opts.save_best {
            best_epoch
        } else {
            opts.epochs - 1
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, ShiftConfig};
    use crate::seqmodels::ExpertSpec;

    fn tiny_dataset() -> crate::datagen::Dataset {
        generate_dataset(&ShiftConfig {
            delta: 0.0,
            d: 2,
            l: 3,
            t: 8,
            n_train: 60,
            n_test: 20,
            r: 0.3,
            sparsity: 0.6,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![0.8, 0.3], &[2, 1]).unwrap();
        let y = tape.constant(vec![1.0, 0.0], &[2, 1]).unwrap();
        let loss = bce_sum(&mut tape, p, y).unwrap();
        let expected = -(0.8_f64.ln() + 0.7_f64.ln());
        assert!((tape.value_scalar(loss).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn bce_stays_finite_at_extreme_probabilities() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![0.0, 1.0], &[2, 1]).unwrap();
        let y = tape.constant(vec![1.0, 0.0], &[2, 1]).unwrap();
        let loss = bce_sum(&mut tape, p, y).unwrap();
        assert!(tape.value_scalar(loss).unwrap().is_finite());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ds = tiny_dataset();
        let model = LstmModel::new("m", 2, ExpertSpec::binary(8));
        let opts = SgdOptions {
            epochs: 4,
            batch_size: 16,
            learning_rate: 0.01,
            seed: 3,
            save_best: true,
        };
        let out1 = train_lstm_bce(&model, &ds.train, &ds.validation, &opts).unwrap();
        let out2 = train_lstm_bce(&model, &ds.train, &ds.validation, &opts).unwrap();
        assert_eq!(out1.history, out2.history);
        let first = out1.history.first().unwrap().train_loss;
        let last = out1.history.last().unwrap().train_loss;
        assert!(last < first, "loss did not improve: {first} -> {last}");
        // The retained parameters correspond to the max recorded val APR.
        let best_apr = out1.history[out1.best_epoch].val_apr;
        assert!(out1
            .history
            .iter()
            .all(|r| r.val_apr <= best_apr + 1e-15));
    }

    #[test]
    fn epoch_batches_cover_everything() {
        let mut rng = StdRng::seed_from_u64(1);
        let batches = epoch_batches(10, 3, &mut rng);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
