//! Ensembles and selection rules built from a shared pool of independently
//! trained LSTMs: post-hoc step-wise selection, the average ensemble, and
//! global / step-wise stacking fit on validation predictions.

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SequenceInstance};
use crate::diffcore::{derive_seed, AdamConfig, AdamState, ParamSet, Tape, Tensor};
use crate::error::{CoreError, Result};
use crate::seqmodels::{ExpertSpec, LstmModel};
use crate::training::{
    predict_lstm, train_lstm_bce, EpochRecord, SgdOptions, PROB_GUARD,
};

/// One trained pool member with its recorded validation behaviour.
pub struct PoolMember {
    pub spec: ExpertSpec,
    pub params: ParamSet,
    pub seed: u64,
    /// Mean BCE at each step over the validation split (of the saved model).
    pub per_step_val_loss: Vec<f64>,
    /// `[n_val][t]` class-1 probabilities on the validation split.
    pub val_predictions: Vec<Vec<f64>>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Mean validation APR of the saved parameters.
    pub val_mean_apr: f64,
}

impl PoolMember {
    pub fn model(&self, input_dim: usize, index: usize) -> LstmModel {
        LstmModel::new(&member_prefix(index), input_dim, self.spec.clone())
    }
}

pub fn member_prefix(index: usize) -> String {
    format!("member{index:02}")
}

/// A pool of independently BCE-trained LSTMs over the same dataset.
pub struct ModelPool {
    pub input_dim: usize,
    pub members: Vec<PoolMember>,
}

/// Mean BCE per step of a prediction grid.
fn per_step_bce(predictions: &[Vec<f64>], labels: &[Vec<u8>]) -> Vec<f64> {
    let t_len = predictions[0].len();
    let n = predictions.len() as f64;
    let mut out = vec![0.0; t_len];
    for (p_row, y_row) in predictions.iter().zip(labels) {
        for (t, (&p, &y)) in p_row.iter().zip(y_row).enumerate() {
            let p = p.clamp(PROB_GUARD, 1.0 - PROB_GUARD);
            out[t] -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    for v in out.iter_mut() {
        *v /= n;
    }
    out
}

/// Train every spec independently with BCE (best-on-validation saving) and
/// record each member's step-wise validation losses and predictions.
pub fn train_pool(
    specs: &[ExpertSpec],
    dataset: &Dataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<ModelPool> {
    if specs.is_empty() {
        return Err(CoreError::Config("a pool needs at least one member".into()));
    }
    let input_dim = dataset.config.d;
    let val_labels: Vec<Vec<u8>> = dataset.validation.iter().map(|i| i.y.clone()).collect();
    let mut members = Vec::with_capacity(specs.len());
    for (index, spec) in specs.iter().enumerate() {
        let member_seed = derive_seed(seed, 500 + index as u64);
        let model = LstmModel::new(&member_prefix(index), input_dim, spec.clone());
        let opts = SgdOptions {
            epochs,
            batch_size,
            learning_rate,
            seed: member_seed,
            save_best: true,
        };
        let out = train_lstm_bce(&model, &dataset.train, &dataset.validation, &opts)?;
        let val_predictions = predict_lstm(&model, &out.params, &dataset.validation, batch_size)?;
        let val_mean_apr = out.history[out.best_epoch].val_apr;
        members.push(PoolMember {
            spec: spec.clone(),
            params: out.params,
            seed: member_seed,
            per_step_val_loss: per_step_bce(&val_predictions, &val_labels),
            val_predictions,
            history: out.history,
            best_epoch: out.best_epoch,
            val_mean_apr,
        });
    }
    Ok(ModelPool { input_dim, members })
}

impl ModelPool {
    /// `[m][n][t]` probabilities of every member on a set of sequences.
    pub fn predict_all(
        &self,
        instances: &[SequenceInstance],
        batch_size: usize,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        self.members
            .iter()
            .enumerate()
            .map(|(i, member)| {
                let model = member.model(self.input_dim, i);
                predict_lstm(&model, &member.params, instances, batch_size)
            })
            .collect()
    }

    /// Index of the member with the best mean validation APR — the
    /// "pick one model globally" rule.
    pub fn best_by_global_validation(&self) -> usize {
        let mut best = 0;
        for (i, member) in self.members.iter().enumerate() {
            if member.val_mean_apr > self.members[best].val_mean_apr {
                best = i;
            }
        }
        best
    }
}

/// At each step, the member with minimal validation loss (ties to the
/// lowest index).
pub fn stepwise_select(pool: &ModelPool) -> Vec<usize> {
    let t_len = pool.members[0].per_step_val_loss.len();
    (0..t_len)
        .map(|t| {
            let mut best = 0;
            for (i, member) in pool.members.iter().enumerate() {
                if member.per_step_val_loss[t] < pool.members[best].per_step_val_loss[t] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Assemble a prediction grid by reading, at each step, the chosen member.
pub fn select_predict(member_preds: &[Vec<Vec<f64>>], selection: &[usize]) -> Vec<Vec<f64>> {
    let n = member_preds[0].len();
    (0..n)
        .map(|i| {
            selection
                .iter()
                .enumerate()
                .map(|(t, &m)| member_preds[m][i][t])
                .collect()
        })
        .collect()
}

/// Plain mean of the member predictions at every `(n, t)`.
pub fn average_ensemble(member_preds: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let m = member_preds.len() as f64;
    let n = member_preds[0].len();
    let t_len = member_preds[0][0].len();
    (0..n)
        .map(|i| {
            (0..t_len)
                .map(|t| member_preds.iter().map(|p| p[i][t]).sum::<f64>() / m)
                .collect()
        })
        .collect()
}

/// Scope of the stacking weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackingMode {
    /// One weight per member, shared by all steps.
    Global,
    /// Independent weights per member at every step.
    Stepwise,
}

/// How the meta-learner's weights are constrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackingParametrization {
    /// Weights go through a softmax: convex combinations, outputs stay
    /// valid probabilities.
    #[default]
    SoftmaxConvex,
    /// Unconstrained linear weights plus bias, squashed by a sigmoid.
    UnconstrainedSigmoid,
}

/// Fitted combination weights. `weights` is `1 x m` for global mode and
/// `t x m` for step-wise mode; `bias` is present only for the
/// unconstrained parametrization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingWeights {
    pub mode: StackingMode,
    pub parametrization: StackingParametrization,
    pub weights: Vec<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

impl StackingWeights {
    /// Uniform convex weights (equivalent to the average ensemble).
    pub fn uniform(mode: StackingMode, t_len: usize, m: usize) -> Self {
        let rows = match mode {
            StackingMode::Global => 1,
            StackingMode::Stepwise => t_len,
        };
        Self {
            mode,
            parametrization: StackingParametrization::SoftmaxConvex,
            weights: vec![vec![1.0 / m as f64; m]; rows],
            bias: None,
        }
    }

    pub fn validate_convex(&self, tol: f64) -> Result<()> {
        if self.parametrization != StackingParametrization::SoftmaxConvex {
            return Ok(());
        }
        for row in &self.weights {
            if row.iter().any(|&w| w < 0.0) {
                return Err(CoreError::Usage("negative stacking weight".into()));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(CoreError::Usage(format!(
                    "stacking weights sum to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    fn row_for_step(&self, t: usize) -> &[f64] {
        match self.mode {
            StackingMode::Global => &self.weights[0],
            StackingMode::Stepwise => &self.weights[t],
        }
    }

    fn bias_for_step(&self, t: usize) -> f64 {
        match (&self.bias, self.mode) {
            (Some(b), StackingMode::Global) => b[0],
            (Some(b), StackingMode::Stepwise) => b[t],
            (None, _) => 0.0,
        }
    }
}

/// Fit stacking weights on the pool's validation predictions with
/// full-batch Adam for `steps` iterations of BCE minimization.
pub fn fit_stacking(
    pool: &ModelPool,
    validation: &[SequenceInstance],
    mode: StackingMode,
    parametrization: StackingParametrization,
    steps: usize,
    learning_rate: f64,
) -> Result<StackingWeights> {
    let m = pool.members.len();
    if pool.members.iter().any(|mem| mem.val_predictions.is_empty()) {
        return Err(CoreError::Usage(
            "pool members are missing validation predictions".into(),
        ));
    }
    let n = validation.len();
    if n == 0 || pool.members[0].val_predictions.len() != n {
        return Err(CoreError::Usage(format!(
            "validation split ({n} sequences) does not match recorded \
             predictions ({})",
            pool.members[0].val_predictions.len()
        )));
    }
    let t_len = validation[0].y.len();
    let rows = match mode {
        StackingMode::Global => 1,
        StackingMode::Stepwise => t_len,
    };

    // Meta-features: per step a [n, m] matrix of member probabilities.
    let mut step_feats = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut vals = Vec::with_capacity(n * m);
        for i in 0..n {
            for member in &pool.members {
                vals.push(member.val_predictions[i][t]);
            }
        }
        step_feats.push(vals);
    }
    let step_labels: Vec<Vec<f64>> = (0..t_len)
        .map(|t| validation.iter().map(|s| s.y[t] as f64).collect())
        .collect();

    let mut params = ParamSet::new(0);
    for row in 0..rows {
        params.insert(&format!("logits{row:03}"), Tensor::zeros(&[1, m]))?;
        if parametrization == StackingParametrization::UnconstrainedSigmoid {
            params.insert(&format!("bias{row:03}"), Tensor::zeros(&[1]))?;
        }
    }
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(learning_rate));

    for _ in 0..steps {
        let mut tape = Tape::new();
        let binding = crate::diffcore::ParamBinding::bind(&mut tape, &params);
        let mut loss = tape.constant_scalar(0.0);
        for t in 0..t_len {
            let row = match mode {
                StackingMode::Global => 0,
                StackingMode::Stepwise => t,
            };
            let logits = binding.id(&format!("logits{row:03}"))?;
            let feats = tape.constant(step_feats[t].clone(), &[n, m])?;
            let y = tape.constant(step_labels[t].clone(), &[n, 1])?;
            let p = match parametrization {
                StackingParametrization::SoftmaxConvex => {
                    let w = tape.softmax(logits);
                    let w_row = tape.reshape(w, &[m])?;
                    let weighted = tape.mul(feats, w_row)?;
                    let combo = tape.sum_axis(weighted, 1)?;
                    tape.reshape(combo, &[n, 1])?
                }
                StackingParametrization::UnconstrainedSigmoid => {
                    let bias = binding.id(&format!("bias{row:03}"))?;
                    let w_row = tape.reshape(logits, &[m])?;
                    let weighted = tape.mul(feats, w_row)?;
                    let combo = tape.sum_axis(weighted, 1)?;
                    let shifted = tape.add(combo, bias)?;
                    let squashed = tape.sigmoid(shifted);
                    tape.reshape(squashed, &[n, 1])?
                }
            };
            let step_loss = crate::training::bce_sum(&mut tape, p, y)?;
            loss = tape.add(loss, step_loss)?;
        }
        let value = tape.value_scalar(loss)?;
        if !value.is_finite() {
            return Err(CoreError::Training(format!(
                "non-finite stacking loss {value}"
            )));
        }
        params.zero_grads();
        tape.backward(loss)?;
        binding.accumulate_grads(&tape, &mut params)?;
        adam.step(&mut params)?;
    }

    let mut weights = Vec::with_capacity(rows);
    let mut bias = Vec::with_capacity(rows);
    for row in 0..rows {
        let logits = params.get(&format!("logits{row:03}"))?.values().to_vec();
        match parametrization {
            StackingParametrization::SoftmaxConvex => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                weights.push(exps.into_iter().map(|v| v / sum).collect());
            }
            StackingParametrization::UnconstrainedSigmoid => {
                bias.push(params.get(&format!("bias{row:03}"))?.values()[0]);
                weights.push(logits);
            }
        }
    }
    Ok(StackingWeights {
        mode,
        parametrization,
        weights,
        bias: if parametrization == StackingParametrization::UnconstrainedSigmoid {
            Some(bias)
        } else {
            None
        },
    })
}

/// Combine member predictions under fitted stacking weights.
pub fn stacked_predict(
    member_preds: &[Vec<Vec<f64>>],
    weights: &StackingWeights,
) -> Result<Vec<Vec<f64>>> {
    weights.validate_convex(1e-9)?;
    let m = member_preds.len();
    if weights.weights[0].len() != m {
        return Err(CoreError::ShapeMismatch {
            op: "stacked_predict",
            lhs: vec![m],
            rhs: vec![weights.weights[0].len()],
        });
    }
    let n = member_preds[0].len();
    let t_len = member_preds[0][0].len();
    if weights.mode == StackingMode::Stepwise && weights.weights.len() != t_len {
        return Err(CoreError::ShapeMismatch {
            op: "stacked_predict steps",
            lhs: vec![t_len],
            rhs: vec![weights.weights.len()],
        });
    }
    let mut out = vec![vec![0.0; t_len]; n];
    for (i, row) in out.iter_mut().enumerate() {
        for (t, cell) in row.iter_mut().enumerate() {
            let w = weights.row_for_step(t);
            let combo: f64 = (0..m).map(|k| w[k] * member_preds[k][i][t]).sum();
            *cell = match weights.parametrization {
                StackingParametrization::SoftmaxConvex => combo,
                StackingParametrization::UnconstrainedSigmoid => {
                    let z = combo + weights.bias_for_step(t);
                    1.0 / (1.0 + (-z).exp())
                }
            };
        }
    }
    Ok(out)
}
