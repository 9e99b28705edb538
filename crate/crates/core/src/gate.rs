//! Attention gating over experts.
//!
//! A trainable encoding vector represents each expert; a scoring function
//! aligns the per-step context with every encoding and a softmax turns the
//! scores into simplex weights. All four scoring functions are
//! content-based and therefore equivariant under re-ordering the experts.

use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{glorot_uniform, NodeId, ParamBinding, ParamSet, Tape};
use crate::error::{CoreError, Result};

/// The scoring function used to align contexts with expert encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// `v^T tanh(W1 c + W2 u)`
    Additive,
    /// `v^T tanh(W [c; u])`
    Concatenation,
    /// `c^T u` (parameter-free; requires matching dimensions)
    Dot,
    /// `c^T W u`
    General,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::Additive,
        AttentionKind::Concatenation,
        AttentionKind::Dot,
        AttentionKind::General,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttentionKind::Additive => "additive",
            AttentionKind::Concatenation => "concatenation",
            AttentionKind::Dot => "dot",
            AttentionKind::General => "general",
        }
    }
}

/// Dimensions of the gate. `attention_dim` is the hidden width of the
/// neural scoring functions and is ignored by `Dot`/`General`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    pub kind: AttentionKind,
    pub context_dim: usize,
    pub encoding_dim: usize,
    pub attention_dim: usize,
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_dim == 0 || self.encoding_dim == 0 {
            return Err(CoreError::Config(
                "context and encoding dimensions must be positive".into(),
            ));
        }
        match self.kind {
            AttentionKind::Dot if self.encoding_dim != self.context_dim => {
                Err(CoreError::Config(format!(
                    "dot attention needs encoding_dim == context_dim, \
                     got {} vs {}",
                    self.encoding_dim, self.context_dim
                )))
            }
            AttentionKind::Additive | AttentionKind::Concatenation
                if self.attention_dim == 0 =>
            {
                Err(CoreError::Config(
                    "neural scoring functions need attention_dim >= 1".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// The gate's trainable scoring parameters (the expert encodings live with
/// the ensemble, not here).
pub struct AttentionGate {
    pub config: GateConfig,
    prefix: String,
    w: String,
    w1: String,
    w2: String,
    v: String,
}

impl AttentionGate {
    pub fn new(prefix: &str, config: GateConfig) -> Self {
        Self {
            config,
            prefix: prefix.to_string(),
            w: format!("{prefix}.w"),
            w1: format!("{prefix}.w1"),
            w2: format!("{prefix}.w2"),
            v: format!("{prefix}.v"),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut StdRng) -> Result<()> {
        self.config.validate()?;
        let GateConfig {
            kind,
            context_dim,
            encoding_dim,
            attention_dim,
        } = self.config;
        match kind {
            AttentionKind::Additive => {
                params.insert(&self.w1, glorot_uniform(&[attention_dim, context_dim], rng))?;
                params.insert(&self.w2, glorot_uniform(&[attention_dim, encoding_dim], rng))?;
                params.insert(&self.v, glorot_uniform(&[1, attention_dim], rng))?;
            }
            AttentionKind::Concatenation => {
                params.insert(
                    &self.w,
                    glorot_uniform(&[attention_dim, context_dim + encoding_dim], rng),
                )?;
                params.insert(&self.v, glorot_uniform(&[1, attention_dim], rng))?;
            }
            AttentionKind::Dot => {}
            AttentionKind::General => {
                params.insert(&self.w, glorot_uniform(&[context_dim, encoding_dim], rng))?;
            }
        }
        Ok(())
    }

    /// Alignment of one expert encoding (`[1, encoding_dim]`) with a batch
    /// of contexts (`[batch, context_dim]`): a `[batch, 1]` score column.
    pub fn score(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        context: NodeId,
        encoding: NodeId,
    ) -> Result<NodeId> {
        let batch = tape.shape(context)[0];
        match self.config.kind {
            AttentionKind::Additive => {
                let c_proj = tape.linear(context, binding.id(&self.w1)?, None)?;
                let u_proj = tape.linear(encoding, binding.id(&self.w2)?, None)?;
                let pre = tape.add(c_proj, u_proj)?;
                let act = tape.tanh(pre);
                tape.linear(act, binding.id(&self.v)?, None)
            }
            AttentionKind::Concatenation => {
                let u_rows = tape.broadcast_rows(encoding, batch)?;
                let joined = tape.concat(&[context, u_rows], 1)?;
                let pre = tape.linear(joined, binding.id(&self.w)?, None)?;
                let act = tape.tanh(pre);
                tape.linear(act, binding.id(&self.v)?, None)
            }
            AttentionKind::Dot => {
                let prod = tape.mul(context, encoding)?;
                let summed = tape.sum_axis(prod, 1)?;
                tape.reshape(summed, &[batch, 1])
            }
            AttentionKind::General => {
                let projected = tape.matmul(context, binding.id(&self.w)?)?;
                let prod = tape.mul(projected, encoding)?;
                let summed = tape.sum_axis(prod, 1)?;
                tape.reshape(summed, &[batch, 1])
            }
        }
    }

    /// Score a batch of contexts against every encoding: `[batch, M]`.
    pub fn score_all(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        context: NodeId,
        encodings: &[NodeId],
    ) -> Result<NodeId> {
        let cols: Vec<NodeId> = encodings
            .iter()
            .map(|&u| self.score(tape, binding, context, u))
            .collect::<Result<_>>()?;
        tape.concat(&cols, 1)
    }
}

/// Normalize scores into simplex weights (stabilized softmax over experts).
pub fn gate_weights(tape: &mut Tape, scores: NodeId) -> NodeId {
    tape.softmax(scores)
}

/// Hard selection: index of the heaviest expert, ties to the lowest index.
pub fn gate_select_hard(weights: &[f64]) -> usize {
    let mut best = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > weights[best] {
            best = i;
        }
    }
    best
}

/// Per-instance, per-step expert weights: an `n x t x m` simplex field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateWeights {
    alpha: Vec<f64>,
    pub n: usize,
    pub t: usize,
    pub m: usize,
}

impl GateWeights {
    pub fn new(alpha: Vec<f64>, n: usize, t: usize, m: usize) -> Result<Self> {
        if alpha.len() != n * t * m {
            return Err(CoreError::ShapeMismatch {
                op: "gate_weights",
                lhs: vec![n, t, m],
                rhs: vec![alpha.len()],
            });
        }
        Ok(Self { alpha, n, t, m })
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha
    }

    /// The weight row for instance `n` at step `t`.
    pub fn row(&self, n: usize, t: usize) -> &[f64] {
        let base = (n * self.t + t) * self.m;
        &self.alpha[base..base + self.m]
    }

    /// Check every row is nonnegative and sums to one within `tol`.
    pub fn validate_simplex(&self, tol: f64) -> Result<()> {
        for n in 0..self.n {
            for t in 0..self.t {
                let row = self.row(n, t);
                if row.iter().any(|&v| v < 0.0) {
                    return Err(CoreError::Usage(format!(
                        "negative gate weight at (n={n}, t={t})"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > tol {
                    return Err(CoreError::Usage(format!(
                        "gate weights at (n={n}, t={t}) sum to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total attention mass per expert (summed over instances and steps).
    pub fn expert_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.m];
        for chunk in self.alpha.chunks(self.m) {
            for (t, v) in totals.iter_mut().zip(chunk) {
                *t += v;
            }
        }
        totals
    }
}
