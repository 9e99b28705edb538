//! LSTM experts with time-distributed sigmoid heads, plus the single-layer
//! tanh RNN used as the gating context encoder.
//!
//! Models are descriptors: parameters live in a [`ParamSet`] under the
//! model's name prefix, and the forward pass records onto a caller-supplied
//! [`Tape`], one batch column per sequence.

use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{glorot_uniform, NodeId, ParamBinding, ParamSet, Tape, Tensor};
use crate::error::Result;

/// Which cell-state update the LSTM applies.
///
/// `Standard` is the usual `C_t = f ⊙ C_{t-1} + i ⊙ C̃_t`. `SigmaCell`
/// wraps that sum in an extra sigmoid, an alternative sometimes written for
/// this cell; it is selectable so both behaviours stay comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellVariant {
    #[default]
    Standard,
    SigmaCell,
}

/// Architecture descriptor for one LSTM expert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub hidden_dim: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub cell_variant: CellVariant,
}

impl ExpertSpec {
    pub fn binary(hidden_dim: usize) -> Self {
        Self {
            hidden_dim,
            output_dim: 1,
            cell_variant: CellVariant::Standard,
        }
    }
}

/// Recurrent state plus the gate activations of the step that produced it.
#[derive(Debug, Clone, Copy)]
pub struct LstmStep {
    pub h: NodeId,
    pub c: NodeId,
    pub input_gate: NodeId,
    pub forget_gate: NodeId,
    pub output_gate: NodeId,
    pub candidate: NodeId,
}

struct GateNames {
    wx: String,
    wh: String,
    b: String,
}

impl GateNames {
    fn new(prefix: &str, tag: &str) -> Self {
        Self {
            wx: format!("{prefix}.w_{tag}x"),
            wh: format!("{prefix}.w_{tag}h"),
            b: format!("{prefix}.b_{tag}"),
        }
    }
}

/// One LSTM with a time-distributed sigmoid output head.
pub struct LstmModel {
    pub input_dim: usize,
    pub spec: ExpertSpec,
    prefix: String,
    gates: [GateNames; 4], // input, forget, output, candidate
    head_w: String,
    head_b: String,
}

impl LstmModel {
    pub fn new(prefix: &str, input_dim: usize, spec: ExpertSpec) -> Self {
        Self {
            input_dim,
            spec,
            prefix: prefix.to_string(),
            gates: [
                GateNames::new(prefix, "i"),
                GateNames::new(prefix, "f"),
                GateNames::new(prefix, "o"),
                GateNames::new(prefix, "c"),
            ],
            head_w: format!("{prefix}.head_w"),
            head_b: format!("{prefix}.head_b"),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Create this model's tensors: Glorot-uniform weights, zero biases
    /// (including the forget gate).
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut StdRng) -> Result<()> {
        let h = self.spec.hidden_dim;
        let d = self.input_dim;
        for g in &self.gates {
            params.insert(&g.wx, glorot_uniform(&[h, d], rng))?;
            params.insert(&g.wh, glorot_uniform(&[h, h], rng))?;
            params.insert(&g.b, Tensor::zeros(&[h]))?;
        }
        params.insert(&self.head_w, glorot_uniform(&[self.spec.output_dim, h], rng))?;
        params.insert(&self.head_b, Tensor::zeros(&[self.spec.output_dim]))?;
        Ok(())
    }

    /// Zero initial state for a batch of `batch` sequences.
    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Result<(NodeId, NodeId)> {
        let h = tape.constant(vec![0.0; batch * self.spec.hidden_dim], &[batch, self.spec.hidden_dim])?;
        let c = tape.constant(vec![0.0; batch * self.spec.hidden_dim], &[batch, self.spec.hidden_dim])?;
        Ok((h, c))
    }

    fn gate_preact(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        names: &GateNames,
        x_t: NodeId,
        h_prev: NodeId,
    ) -> Result<NodeId> {
        let from_x = tape.linear(x_t, binding.id(&names.wx)?, Some(binding.id(&names.b)?))?;
        let from_h = tape.linear(h_prev, binding.id(&names.wh)?, None)?;
        tape.add(from_x, from_h)
    }

    /// One cell update for a `[batch, input_dim]` feature slice.
    pub fn step(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x_t: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<LstmStep> {
        let [gi, gf, go, gc] = &self.gates;
        let i_pre = self.gate_preact(tape, binding, gi, x_t, h_prev)?;
        let f_pre = self.gate_preact(tape, binding, gf, x_t, h_prev)?;
        let o_pre = self.gate_preact(tape, binding, go, x_t, h_prev)?;
        let c_pre = self.gate_preact(tape, binding, gc, x_t, h_prev)?;
        let input_gate = tape.sigmoid(i_pre);
        let forget_gate = tape.sigmoid(f_pre);
        let output_gate = tape.sigmoid(o_pre);
        let candidate = tape.tanh(c_pre);

        let keep = tape.mul(forget_gate, c_prev)?;
        let write = tape.mul(input_gate, candidate)?;
        let c_sum = tape.add(keep, write)?;
        let c = match self.spec.cell_variant {
            CellVariant::Standard => c_sum,
            CellVariant::SigmaCell => tape.sigmoid(c_sum),
        };
        let c_tanh = tape.tanh(c);
        let h = tape.mul(c_tanh, output_gate)?;
        Ok(LstmStep {
            h,
            c,
            input_gate,
            forget_gate,
            output_gate,
            candidate,
        })
    }

    /// Sigmoid head on a hidden state: `[batch, output_dim]` probabilities.
    pub fn head(&self, tape: &mut Tape, binding: &ParamBinding, h: NodeId) -> Result<NodeId> {
        let z = tape.linear(h, binding.id(&self.head_w)?, Some(binding.id(&self.head_b)?))?;
        Ok(tape.sigmoid(z))
    }

    /// Run the whole sequence; returns one `[batch, output_dim]` probability
    /// node per step. `xs` holds the `[batch, input_dim]` feature slice of
    /// each step, so outputs at step `t` depend only on features up to `t`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        xs: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let batch = tape.shape(xs[0])[0];
        let (mut h, mut c) = self.zero_state(tape, batch)?;
        let mut probs = Vec::with_capacity(xs.len());
        for &x_t in xs {
            let step = self.step(tape, binding, x_t, h, c)?;
            h = step.h;
            c = step.c;
            probs.push(self.head(tape, binding, h)?);
        }
        Ok(probs)
    }
}

/// Single-layer tanh RNN producing the per-step context encoding.
pub struct RnnContext {
    pub input_dim: usize,
    pub hidden_dim: usize,
    prefix: String,
    w_x: String,
    w_h: String,
    b: String,
}

impl RnnContext {
    pub fn new(prefix: &str, input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            prefix: prefix.to_string(),
            w_x: format!("{prefix}.w_x"),
            w_h: format!("{prefix}.w_h"),
            b: format!("{prefix}.b"),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut StdRng) -> Result<()> {
        params.insert(&self.w_x, glorot_uniform(&[self.hidden_dim, self.input_dim], rng))?;
        params.insert(&self.w_h, glorot_uniform(&[self.hidden_dim, self.hidden_dim], rng))?;
        params.insert(&self.b, Tensor::zeros(&[self.hidden_dim]))?;
        Ok(())
    }

    /// `h_t = tanh(W_x x_t + W_h h_{t-1} + b)`; returns the hidden series.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        xs: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let batch = tape.shape(xs[0])[0];
        let mut h = tape.constant(vec![0.0; batch * self.hidden_dim], &[batch, self.hidden_dim])?;
        let mut out = Vec::with_capacity(xs.len());
        for &x_t in xs {
            let from_x = tape.linear(x_t, binding.id(&self.w_x)?, Some(binding.id(&self.b)?))?;
            let from_h = tape.linear(h, binding.id(&self.w_h)?, None)?;
            let pre = tape.add(from_x, from_h)?;
            h = tape.tanh(pre);
            out.push(h);
        }
        Ok(out)
    }
}

/// Split a single `t x d` feature matrix into per-step `[1, d]` constants.
pub fn sequence_inputs(tape: &mut Tape, x: &[f64], d: usize) -> Result<Vec<NodeId>> {
    assert_eq!(x.len() % d, 0, "feature matrix not a multiple of d");
    x.chunks(d)
        .map(|row| tape.constant(row.to_vec(), &[1, d]))
        .collect()
}

/// Class-1 probability series for one sequence (evaluation mode).
pub fn expert_forward(model: &LstmModel, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let binding = ParamBinding::bind_frozen(&mut tape, params);
    let xs = sequence_inputs(&mut tape, x, model.input_dim)?;
    let probs = model.forward(&mut tape, &binding, &xs)?;
    probs.iter().map(|&p| tape.value_scalar(p)).collect()
}

/// Context series (`t` rows of `hidden_dim`) for one sequence.
pub fn context_forward(model: &RnnContext, params: &ParamSet, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let binding = ParamBinding::bind_frozen(&mut tape, params);
    let xs = sequence_inputs(&mut tape, x, model.input_dim)?;
    let ctx = model.forward(&mut tape, &binding, &xs)?;
    Ok(ctx.iter().map(|&c| tape.value(c).to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zero_params(model: &LstmModel) -> ParamSet {
        let mut ps = ParamSet::new(0);
        let mut rng = StdRng::seed_from_u64(0);
        model.init_params(&mut ps, &mut rng).unwrap();
        for (_, t) in ps.iter_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        ps
    }

    #[test]
    fn zero_everything_standard_cell() {
        let model = LstmModel::new("m", 2, ExpertSpec::binary(3));
        let ps = zero_params(&model);
        let mut tape = Tape::new();
        let binding = ParamBinding::bind_frozen(&mut tape, &ps);
        let x = tape.constant(vec![0.0, 0.0], &[1, 2]).unwrap();
        let (h0, c0) = model.zero_state(&mut tape, 1).unwrap();
        let step = model.step(&mut tape, &binding, x, h0, c0).unwrap();
        assert!(tape.value(step.input_gate).iter().all(|&v| v == 0.5));
        assert!(tape.value(step.forget_gate).iter().all(|&v| v == 0.5));
        assert!(tape.value(step.output_gate).iter().all(|&v| v == 0.5));
        assert!(tape.value(step.candidate).iter().all(|&v| v == 0.0));
        assert!(tape.value(step.c).iter().all(|&v| v == 0.0));
        assert!(tape.value(step.h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_everything_sigma_cell() {
        let spec = ExpertSpec {
            hidden_dim: 3,
            output_dim: 1,
            cell_variant: CellVariant::SigmaCell,
        };
        let model = LstmModel::new("m", 2, spec);
        let ps = zero_params(&model);
        let mut tape = Tape::new();
        let binding = ParamBinding::bind_frozen(&mut tape, &ps);
        let x = tape.constant(vec![0.0, 0.0], &[1, 2]).unwrap();
        let (h0, c0) = model.zero_state(&mut tape, 1).unwrap();
        let step = model.step(&mut tape, &binding, x, h0, c0).unwrap();
        let expected_h = 0.5_f64.tanh() * 0.5;
        for &c in tape.value(step.c) {
            assert!((c - 0.5).abs() < 1e-15);
        }
        for &h in tape.value(step.h) {
            assert!((h - expected_h).abs() < 1e-15, "h = {h}");
        }
        assert!((expected_h - 0.231).abs() < 1e-3);
    }

    #[test]
    fn zero_params_predict_half_everywhere() {
        let model = LstmModel::new("m", 2, ExpertSpec::binary(4));
        let ps = zero_params(&model);
        let x = vec![0.3, -0.4, 1.0, 2.0, -1.0, 0.5]; // 3 steps x 2 dims
        let probs = expert_forward(&model, &ps, &x).unwrap();
        assert_eq!(probs.len(), 3);
        assert!(probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn outputs_are_causal() {
        let model = LstmModel::new("m", 2, ExpertSpec::binary(5));
        let mut ps = ParamSet::new(7);
        let mut rng = ps.rng();
        model.init_params(&mut ps, &mut rng).unwrap();

        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let base = expert_forward(&model, &ps, &x).unwrap();

        let mut poked = x.clone();
        let t0 = 3;
        poked[t0 * 2] += 5.0; // perturb step 3 onwards
        let changed = expert_forward(&model, &ps, &poked).unwrap();
        for t in 0..t0 {
            assert_eq!(base[t], changed[t], "step {t} saw the future");
        }
        assert_ne!(base[t0], changed[t0]);
    }

    #[test]
    fn gate_activations_stay_in_range() {
        let model = LstmModel::new("m", 3, ExpertSpec::binary(6));
        let mut ps = ParamSet::new(21);
        let mut rng = ps.rng();
        model.init_params(&mut ps, &mut rng).unwrap();
        let mut tape = Tape::new();
        let binding = ParamBinding::bind_frozen(&mut tape, &ps);
        let x: Vec<f64> = (0..9).map(|i| (i as f64) * 0.5 - 2.0).collect();
        let xs = sequence_inputs(&mut tape, &x, 3).unwrap();
        let (mut h, mut c) = model.zero_state(&mut tape, 1).unwrap();
        for &x_t in &xs {
            let step = model.step(&mut tape, &binding, x_t, h, c).unwrap();
            for gate in [step.input_gate, step.forget_gate, step.output_gate] {
                assert!(tape.value(gate).iter().all(|&v| v > 0.0 && v < 1.0));
            }
            assert!(tape
                .value(step.candidate)
                .iter()
                .all(|&v| v > -1.0 && v < 1.0));
            assert!(tape.value(step.h).iter().all(|&v| v > -1.0 && v < 1.0));
            h = step.h;
            c = step.c;
        }
    }

    #[test]
    fn same_seed_same_outputs() {
        let build = || {
            let model = LstmModel::new("m", 2, ExpertSpec::binary(4));
            let mut ps = ParamSet::new(99);
            let mut rng = ps.rng();
            model.init_params(&mut ps, &mut rng).unwrap();
            let x = vec![0.1, 0.2, 0.3, 0.4];
            expert_forward(&model, &ps, &x).unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn context_is_zero_for_zero_params_and_causal() {
        let rnn = RnnContext::new("ctx", 2, 3);
        let mut ps = ParamSet::new(0);
        let mut rng = ps.rng();
        rnn.init_params(&mut ps, &mut rng).unwrap();
        for (_, t) in ps.iter_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = vec![1.0, -1.0, 2.0, 0.5];
        let ctx = context_forward(&rnn, &ps, &x).unwrap();
        assert!(ctx.iter().flatten().all(|&v| v == 0.0));

        let mut ps = ParamSet::new(5);
        let mut rng = ps.rng();
        let rnn2 = RnnContext::new("ctx2", 2, 3);
        rnn2.init_params(&mut ps, &mut rng).unwrap();
        let base = context_forward(&rnn2, &ps, &x).unwrap();
        let mut poked = x.clone();
        poked[2] += 3.0; // step 1 onwards
        let changed = context_forward(&rnn2, &ps, &poked).unwrap();
        assert_eq!(base[0], changed[0]);
        assert_ne!(base[1], changed[1]);
    }
}
