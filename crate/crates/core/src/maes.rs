//! The model-attentive ensemble: LSTM experts, an RNN context encoder,
//! per-expert encodings and an attention gate, assembled on one tape and
//! trained end to end.
//!
//! The prediction at step `t` is the gate-weighted combination of the
//! experts' probabilities. The default training objective maximizes the
//! likelihood at the expert level, so the gradient each expert receives is
//! proportional to its weight — well-aligned experts specialize on the
//! contexts they win.

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SequenceInstance};
use crate::diffcore::{
    derive_seed, glorot_uniform, AdamConfig, AdamState, NodeId, ParamBinding, ParamSet, Tape,
};
use crate::error::{CoreError, Result};
use crate::gate::{gate_select_hard, gate_weights, AttentionGate, AttentionKind, GateConfig, GateWeights};
use crate::metrics::stepwise_apr;
use crate::seqmodels::{ExpertSpec, LstmModel, RnnContext};
use crate::training::{
    batch_inputs, batch_labels, bce_sum, epoch_batches, train_lstm_bce_from, EpochRecord,
    SgdOptions, PROB_GUARD,
};

/// Architecture of the full ensemble.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub expert_specs: Vec<ExpertSpec>,
    pub context_hidden_dim: usize,
    pub encoding_dim: usize,
    pub attention_kind: AttentionKind,
    /// Hidden width of the neural scoring functions (ignored by dot/general).
    pub attention_dim: usize,
}

impl EnsembleSpec {
    pub fn n_experts(&self) -> usize {
        self.expert_specs.len()
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            kind: self.attention_kind,
            context_dim: self.context_hidden_dim,
            encoding_dim: self.encoding_dim,
            attention_dim: self.attention_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.expert_specs.is_empty() {
            return Err(CoreError::Config("an ensemble needs at least one expert".into()));
        }
        if self.expert_specs.iter().any(|s| s.output_dim != 1) {
            return Err(CoreError::Config(
                "experts must have output_dim = 1 (binary class-1 probability)".into(),
            ));
        }
        self.gate_config().validate()
    }
}

/// Which objective drives joint training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Expert-level likelihood: `-log sum_m alpha_m * lik_m` per step.
    #[default]
    Maes,
    /// Plain BCE on the gate-weighted ensemble probability.
    Bce,
}

/// Form of the importance regularizer on per-expert attention mass,
/// accumulated per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceKind {
    /// `-sum_m (sum_{n,t} alpha)^2`, the reference form used by the
    /// ablation grid. Note the sign: with the batch's total mass fixed,
    /// minimizing this term actually rewards concentrating mass on few
    /// experts; it is kept exactly as stated rather than silently fixed.
    #[default]
    SquaredTotals,
    /// Squared coefficient of variation of the per-expert totals; minimizing
    /// this provably evens the totals out, for when the balancing behaviour
    /// is what is wanted.
    CoefficientOfVariation,
}

/// Training schedule for the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the importance term in the total loss.
    pub w_imp: f64,
    /// Leading epochs in which experts are trained independently with BCE;
    /// the remaining `epochs - pretrain_epochs` train everything jointly.
    pub pretrain_epochs: usize,
    pub loss_kind: LossKind,
    pub importance_kind: ImportanceKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 100,
            learning_rate: 0.001,
            w_imp: 0.0,
            pretrain_epochs: 0,
            loss_kind: LossKind::Maes,
            importance_kind: ImportanceKind::SquaredTotals,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch_size must be positive".into()));
        }
        if self.pretrain_epochs > self.epochs {
            return Err(CoreError::Config(format!(
                "pretrain_epochs {} exceeds total epochs {}",
                self.pretrain_epochs, self.epochs
            )));
        }
        if self.w_imp < 0.0 || !self.w_imp.is_finite() {
            return Err(CoreError::Config(format!(
                "w_imp must be finite and >= 0, got {}",
                self.w_imp
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(CoreError::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Node handles produced by one forward pass over a batch.
pub struct MaesForward {
    /// Per step: `[batch, 1]` gate-weighted ensemble probability.
    pub ensemble: Vec<NodeId>,
    /// Per step: `[batch, M]` per-expert probabilities.
    pub per_expert: Vec<NodeId>,
    /// Per step: `[batch, M]` raw alignment scores.
    pub scores: Vec<NodeId>,
    /// Per step: `[batch, M]` simplex weights (softmax of the scores).
    pub alphas: Vec<NodeId>,
}

/// The assembled ensemble. Parameter names live under the prefixes
/// `expert{m}.`, `context.`, `encoding{m}.` and `gate.`.
pub struct MaesModel {
    pub input_dim: usize,
    pub spec: EnsembleSpec,
    experts: Vec<LstmModel>,
    context: RnnContext,
    gate: AttentionGate,
    encodings: Vec<String>,
}

impl MaesModel {
    pub fn new(input_dim: usize, spec: EnsembleSpec) -> Result<Self> {
        spec.validate()?;
        let experts = spec
            .expert_specs
            .iter()
            .enumerate()
            .map(|(m, es)| LstmModel::new(&format!("expert{m}"), input_dim, es.clone()))
            .collect();
        let context = RnnContext::new("context", input_dim, spec.context_hidden_dim);
        let gate = AttentionGate::new("gate", spec.gate_config());
        let encodings = (0..spec.n_experts())
            .map(|m| format!("encoding{m}.u"))
            .collect();
        Ok(Self {
            input_dim,
            spec,
            experts,
            context,
            gate,
            encodings,
        })
    }

    pub fn experts(&self) -> &[LstmModel] {
        &self.experts
    }

    pub fn expert_prefix(&self, m: usize) -> String {
        format!("expert{m}.")
    }

    /// Fresh parameters for every component, from one seed.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut params = ParamSet::new(seed);
        let mut rng = params.rng();
        for expert in &self.experts {
            expert.init_params(&mut params, &mut rng)?;
        }
        self.context.init_params(&mut params, &mut rng)?;
        self.gate.init_params(&mut params, &mut rng)?;
        for name in &self.encodings {
            params.insert(name, glorot_uniform(&[1, self.spec.encoding_dim], &mut rng))?;
        }
        Ok(params)
    }

    /// Run experts, context and gate over a batch; `xs` holds one
    /// `[batch, input_dim]` constant per step.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        xs: &[NodeId],
    ) -> Result<MaesForward> {
        let t_len = xs.len();
        let mut expert_series = Vec::with_capacity(self.experts.len());
        for expert in &self.experts {
            expert_series.push(expert.forward(tape, binding, xs)?);
        }
        let contexts = self.context.forward(tape, binding, xs)?;
        let encoding_ids: Vec<NodeId> = self
            .encodings
            .iter()
            .map(|n| binding.id(n))
            .collect::<Result<_>>()?;

        let mut per_expert = Vec::with_capacity(t_len);
        let mut scores = Vec::with_capacity(t_len);
        let mut alphas = Vec::with_capacity(t_len);
        let mut ensemble = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let cols: Vec<NodeId> = expert_series.iter().map(|s| s[t]).collect();
            let probs = tape.concat(&cols, 1)?;
            let score = self.gate.score_all(tape, binding, contexts[t], &encoding_ids)?;
            let alpha = gate_weights(tape, score);
            let weighted = tape.mul(alpha, probs)?;
            let combined = tape.sum_axis(weighted, 1)?;
            let batch = tape.shape(probs)[0];
            let combined = tape.reshape(combined, &[batch, 1])?;
            per_expert.push(probs);
            scores.push(score);
            alphas.push(alpha);
            ensemble.push(combined);
        }
        Ok(MaesForward {
            ensemble,
            per_expert,
            scores,
            alphas,
        })
    }
}

// ── Losses ───────────────────────────────────────────────────────────

/// Expert-level likelihood loss on the tape, summed over batch and steps:
/// `-sum log sum_m exp(log alpha_m + y log p_m + (1-y) log(1-p_m))`.
///
/// `per_expert` and `scores` hold one `[batch, M]` node per step, `labels`
/// the matching `[batch, M]` tiles. Log-weights come from a stabilized
/// log-softmax of the scores; the product form of the inner likelihood
/// would underflow on long sequences.
pub fn maes_loss_on_tape(
    tape: &mut Tape,
    per_expert: &[NodeId],
    scores: &[NodeId],
    labels: &[NodeId],
) -> Result<NodeId> {
    let mut total = tape.constant_scalar(0.0);
    for t in 0..per_expert.len() {
        let log_alpha = tape.log_softmax(scores[t]);
        let p = tape.clamp(per_expert[t], PROB_GUARD, 1.0 - PROB_GUARD);
        let log_p = tape.log(p);
        let one_minus = tape.affine(p, -1.0, 1.0);
        let log_q = tape.log(one_minus);
        let y = labels[t];
        let pos = tape.mul(log_p, y)?;
        let flipped = tape.affine(y, -1.0, 1.0);
        let neg = tape.mul(log_q, flipped)?;
        let loglik = tape.add(pos, neg)?;
        let inner = tape.add(log_alpha, loglik)?;
        let lse = tape.logsumexp(inner);
        let step_sum = tape.sum(lse);
        let step_loss = tape.neg(step_sum);
        total = tape.add(total, step_loss)?;
    }
    Ok(total)
}

/// BCE of the gate-weighted ensemble output, summed over batch and steps.
pub fn ensemble_bce_on_tape(
    tape: &mut Tape,
    forward: &MaesForward,
    labels: &[NodeId],
) -> Result<NodeId> {
    let mut total = tape.constant_scalar(0.0);
    for (t, &p) in forward.ensemble.iter().enumerate() {
        let step = bce_sum(tape, p, labels[t])?;
        total = tape.add(total, step)?;
    }
    Ok(total)
}

/// Importance regularizer over a batch's gate weights.
pub fn importance_loss_on_tape(
    tape: &mut Tape,
    alphas: &[NodeId],
    kind: ImportanceKind,
) -> Result<NodeId> {
    let m = *tape.shape(alphas[0]).last().unwrap();
    let mut totals = tape.constant(vec![0.0; m], &[m])?;
    for &alpha in alphas {
        let col = tape.sum_axis(alpha, 0)?;
        totals = tape.add(totals, col)?;
    }
    match kind {
        ImportanceKind::SquaredTotals => {
            let sq = tape.mul(totals, totals)?;
            let sum = tape.sum(sq);
            Ok(tape.neg(sum))
        }
        ImportanceKind::CoefficientOfVariation => {
            let mean = tape.mean(totals);
            let dev = tape.sub(totals, mean)?;
            let sq = tape.mul(dev, dev)?;
            let var = tape.mean(sq);
            let mean_sq = tape.mul(mean, mean)?;
            tape.div(var, mean_sq)
        }
    }
}

/// Value-level expert-likelihood loss over a full prediction grid.
///
/// `per_expert[m][n][t]` are class-1 probabilities; weights must satisfy
/// the simplex invariant.
pub fn maes_loss(
    per_expert: &[Vec<Vec<f64>>],
    weights: &GateWeights,
    labels: &[Vec<u8>],
) -> Result<f64> {
    weights
        .validate_simplex(1e-6)
        .map_err(|e| CoreError::Usage(format!("maes_loss needs simplex weights: {e}")))?;
    let m_count = per_expert.len();
    if m_count != weights.m || labels.len() != weights.n {
        return Err(CoreError::ShapeMismatch {
            op: "maes_loss",
            lhs: vec![weights.n, weights.t, weights.m],
            rhs: vec![labels.len(), per_expert.len()],
        });
    }
    let mut total = 0.0;
    for n in 0..weights.n {
        for t in 0..weights.t {
            let alpha = weights.row(n, t);
            let mut terms = Vec::with_capacity(m_count);
            for m in 0..m_count {
                let p = per_expert[m][n][t].clamp(PROB_GUARD, 1.0 - PROB_GUARD);
                let loglik = if labels[n][t] == 1 { p.ln() } else { (1.0 - p).ln() };
                terms.push(alpha[m].ln() + loglik);
            }
            let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total -= lse;
        }
    }
    Ok(total)
}

/// Value-level importance loss: `-sum_m (total attention mass of m)^2`.
pub fn importance_loss(weights: &GateWeights) -> f64 {
    -weights.expert_totals().iter().map(|v| v * v).sum::<f64>()
}

// ── Prediction ───────────────────────────────────────────────────────

/// Ensemble, per-expert and gate outputs on a set of sequences.
#[derive(Debug, Clone)]
pub struct MaesPrediction {
    /// `[n][t]` gate-weighted probabilities.
    pub ensemble: Vec<Vec<f64>>,
    /// `[m][n][t]` per-expert probabilities.
    pub per_expert: Vec<Vec<Vec<f64>>>,
    pub gate: GateWeights,
}

impl MaesPrediction {
    /// Hard-selection variant: at every `(n, t)` the prediction of the
    /// heaviest expert (argmax, ties to the lowest index).
    pub fn hard_selection(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.ensemble.len());
        for n in 0..self.gate.n {
            let mut row = Vec::with_capacity(self.gate.t);
            for t in 0..self.gate.t {
                let m = gate_select_hard(self.gate.row(n, t));
                row.push(self.per_expert[m][n][t]);
            }
            out.push(row);
        }
        out
    }
}

/// Evaluate the ensemble without gradients, in batches.
pub fn maes_predict(
    model: &MaesModel,
    params: &ParamSet,
    instances: &[SequenceInstance],
    batch_size: usize,
) -> Result<MaesPrediction> {
    let n = instances.len();
    if n == 0 {
        return Err(CoreError::Usage("nothing to predict".into()));
    }
    let t_len = instances[0].y.len();
    let m_count = model.spec.n_experts();
    let mut ensemble = Vec::with_capacity(n);
    let mut per_expert = vec![Vec::with_capacity(n); m_count];
    let mut alpha = Vec::with_capacity(n * t_len * m_count);

    for chunk in instances.chunks(batch_size.max(1)) {
        let refs: Vec<&SequenceInstance> = chunk.iter().collect();
        let mut tape = Tape::new();
        let binding = ParamBinding::bind_frozen(&mut tape, params);
        let xs = batch_inputs(&mut tape, &refs, model.input_dim, t_len)?;
        let fwd = model.forward(&mut tape, &binding, &xs)?;

        let b = refs.len();
        let mut ens_rows = vec![Vec::with_capacity(t_len); b];
        let mut exp_rows = vec![vec![Vec::with_capacity(t_len); b]; m_count];
        let mut alpha_rows = vec![Vec::with_capacity(t_len * m_count); b];
        for t in 0..t_len {
            let ens = tape.value(fwd.ensemble[t]);
            let probs = tape.value(fwd.per_expert[t]);
            let alph = tape.value(fwd.alphas[t]);
            for i in 0..b {
                ens_rows[i].push(ens[i]);
                for m in 0..m_count {
                    exp_rows[m][i].push(probs[i * m_count + m]);
                }
                alpha_rows[i].extend_from_slice(&alph[i * m_count..(i + 1) * m_count]);
            }
        }
        ensemble.extend(ens_rows);
        for m in 0..m_count {
            per_expert[m].append(&mut exp_rows[m]);
        }
        for row in alpha_rows {
            alpha.extend(row);
        }
    }

    Ok(MaesPrediction {
        ensemble,
        per_expert,
        gate: GateWeights::new(alpha, n, t_len, m_count)?,
    })
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MaesTrainOutput {
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
    /// Index into `history` of the record whose parameters were kept.
    pub best_epoch: usize,
}

/// Train the ensemble on a dataset: optional per-expert BCE pretraining,
/// then joint training of experts, context, encodings and gate, keeping
/// the parameters of the best validation-APR joint epoch.
pub fn train_maes(
    model: &MaesModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<MaesTrainOutput> {
    cfg.validate()?;
    if dataset.train.is_empty() || dataset.validation.is_empty() {
        return Err(CoreError::Training(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let mut params = model.init_params(derive_seed(cfg.seed, 0))?;
    let mut history = Vec::with_capacity(cfg.epochs);

    // Phase 1: each expert alone, BCE, keeping final (not best) parameters.
    if cfg.pretrain_epochs > 0 {
        let mut per_expert_histories = Vec::with_capacity(model.experts.len());
        for (m, expert) in model.experts.iter().enumerate() {
            let sub = params.extract_prefix(&model.expert_prefix(m), derive_seed(cfg.seed, 300 + m as u64));
            let opts = SgdOptions {
                epochs: cfg.pretrain_epochs,
                batch_size: cfg.batch_size,
                learning_rate: cfg.learning_rate,
                seed: derive_seed(cfg.seed, 400 + m as u64),
                save_best: false,
            };
            let out = train_lstm_bce_from(expert, sub, &dataset.train, &dataset.validation, &opts)?;
            params.adopt_values(&out.params)?;
            per_expert_histories.push(out.history);
        }
        for e in 0..cfg.pretrain_epochs {
            let k = per_expert_histories.len() as f64;
            history.push(EpochRecord {
                epoch: e,
                phase: "pretrain".into(),
                train_loss: per_expert_histories.iter().map(|h| h[e].train_loss).sum::<f64>() / k,
                val_loss: per_expert_histories.iter().map(|h| h[e].val_loss).sum::<f64>() / k,
                val_apr: per_expert_histories.iter().map(|h| h[e].val_apr).sum::<f64>() / k,
            });
        }
    }

    // Phase 2: joint training on the total loss.
    let joint_epochs = cfg.epochs - cfg.pretrain_epochs;
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate));
    let mut shuffle_rng = StdRng::seed_from_u64(derive_seed(cfg.seed, 1));
    let t_len = dataset.train[0].y.len();
    let m_count = model.spec.n_experts();
    let mut best: Option<(usize, f64, ParamSet)> = None;

    for je in 0..joint_epochs {
        let epoch = cfg.pretrain_epochs + je;
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in epoch_batches(dataset.train.len(), cfg.batch_size, &mut shuffle_rng)
            .into_iter()
            .enumerate()
        {
            let refs: Vec<&SequenceInstance> = batch.iter().map(|&i| &dataset.train[i]).collect();
            let mut tape = Tape::new();
            let binding = ParamBinding::bind(&mut tape, &params);
            let xs = batch_inputs(&mut tape, &refs, model.input_dim, t_len)?;
            let fwd = model.forward(&mut tape, &binding, &xs)?;
            let loss = match cfg.loss_kind {
                LossKind::Maes => {
                    let ys = batch_labels(&mut tape, &refs, t_len, m_count)?;
                    maes_loss_on_tape(&mut tape, &fwd.per_expert, &fwd.scores, &ys)?
                }
                LossKind::Bce => {
                    let ys = batch_labels(&mut tape, &refs, t_len, 1)?;
                    ensemble_bce_on_tape(&mut tape, &fwd, &ys)?
                }
            };
            let loss = if cfg.w_imp > 0.0 {
                let imp = importance_loss_on_tape(&mut tape, &fwd.alphas, cfg.importance_kind)?;
                let scaled = tape.affine(imp, cfg.w_imp, 0.0);
                tape.add(loss, scaled)?
            } else {
                loss
            };
            let loss_value = tape.value_scalar(loss)?;
            if !loss_value.is_finite() {
                return Err(CoreError::Training(format!(
                    "non-finite loss {loss_value} at joint epoch {epoch}, batch {batch_no}"
                )));
            }
            epoch_loss += loss_value;
            params.zero_grads();
            tape.backward(loss)?;
            binding.accumulate_grads(&tape, &mut params)?;
            adam.step(&mut params)?;
        }

        let (val_loss, val_apr) = evaluate_split(model, &params, dataset, cfg)?;
        if best.as_ref().map(|(_, apr, _)| val_apr > *apr).unwrap_or(true) {
            best = Some((epoch, val_apr, params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            phase: "joint".into(),
            train_loss: epoch_loss / dataset.train.len() as f64,
            val_loss,
            val_apr,
        });
    }

    let (best_epoch, final_params) = match best {
        Some((e, _, p)) => (e, p),
        // Zero joint epochs: pretrained experts with the gate at its
        // initialization.
        None => (cfg.epochs.saturating_sub(1), params),
    };
    Ok(MaesTrainOutput {
        params: final_params,
        history,
        best_epoch,
    })
}

/// Validation loss (per sequence, under the configured objective) and
/// step-averaged APR of the ensemble output.
fn evaluate_split(
    model: &MaesModel,
    params: &ParamSet,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let pred = maes_predict(model, params, &dataset.validation, cfg.batch_size)?;
    let labels: Vec<Vec<u8>> = dataset.validation.iter().map(|i| i.y.clone()).collect();
    let apr = stepwise_apr(&pred.ensemble, &labels)?.mean_apr;
    let loss = match cfg.loss_kind {
        LossKind::Maes => maes_loss(&pred.per_expert, &pred.gate, &labels)?,
        LossKind::Bce => {
            let mut total = 0.0;
            for (p_row, y_row) in pred.ensemble.iter().zip(&labels) {
                for (&p, &y) in p_row.iter().zip(y_row) {
                    let p = p.clamp(PROB_GUARD, 1.0 - PROB_GUARD);
                    total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
                }
            }
            total
        }
    };
    Ok((loss / dataset.validation.len() as f64, apr))
}
