//! Finite-difference oracle for the reverse-mode engine.
//!
//! Every analytic gradient is compared against central differences
//! (h = 1e-5) on randomized small tensors. The numeric side only ever calls
//! the forward pass, so it stays independent of the backward code it checks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use maes_core::datagen::SequenceInstance;
use maes_core::diffcore::{NodeId, ParamBinding, ParamSet, Tape, Tensor};
use maes_core::gate::{AttentionGate, AttentionKind, GateConfig};
use maes_core::maes::{
    importance_loss_on_tape, maes_loss_on_tape, EnsembleSpec, ImportanceKind, MaesModel,
};
use maes_core::seqmodels::{CellVariant, ExpertSpec, LstmModel, RnnContext};
use maes_core::training::{batch_inputs, batch_labels, bce_series_sum};

const H: f64 = 1e-5;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-7;

fn loss_value(params: &ParamSet, build: &dyn Fn(&mut Tape, &ParamBinding) -> NodeId) -> f64 {
    let mut tape = Tape::new();
    let binding = ParamBinding::bind_frozen(&mut tape, params);
    let loss = build(&mut tape, &binding);
    tape.value(loss)[0]
}

/// Analytic gradients via one backward pass, central differences by
/// perturbing every parameter entry, then an elementwise comparison.
fn gradcheck(
    label: &str,
    params: &ParamSet,
    build: &dyn Fn(&mut Tape, &ParamBinding) -> NodeId,
) {
    let mut analytic = params.clone();
    let mut tape = Tape::new();
    let binding = ParamBinding::bind(&mut tape, &analytic);
    let loss = build(&mut tape, &binding);
    assert_eq!(tape.value(loss).len(), 1, "{label}: loss must be scalar");
    tape.backward(loss).unwrap();
    analytic.zero_grads();
    binding.accumulate_grads(&tape, &mut analytic).unwrap();

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).unwrap().numel();
        for idx in 0..len {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().values_mut()[idx] += H;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().values_mut()[idx] -= H;
            let numeric = (loss_value(&plus, build) - loss_value(&minus, build)) / (2.0 * H);
            let exact = analytic.get(&name).unwrap().grad().unwrap()[idx];
            let err = (exact - numeric).abs();
            let bound = ATOL + RTOL * exact.abs().max(numeric.abs());
            assert!(
                err <= bound,
                "{label}: d/d{name}[{idx}] analytic {exact} vs numeric {numeric} \
                 (err {err:.3e} > {bound:.3e})"
            );
        }
    }
}

fn random_tensor(shape: &[usize], rng: &mut StdRng) -> Tensor {
    let numel = shape.iter().product();
    let values = (0..numel).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::from_values(shape, values).unwrap()
}

fn params_of(entries: &[(&str, Tensor)]) -> ParamSet {
    let mut ps = ParamSet::new(0);
    for (name, t) in entries {
        ps.insert(name, t.clone()).unwrap();
    }
    ps
}

/// Squared sum keeps the loss sensitive to every output entry.
fn squared_sum(tape: &mut Tape, x: NodeId) -> NodeId {
    let sq = tape.mul(x, x).unwrap();
    tape.sum(sq)
}

#[test]
fn elementwise_and_reduction_ops() {
    let mut rng = StdRng::seed_from_u64(11);
    for round in 0..10 {
        let rows = rng.gen_range(1..=5);
        let cols = rng.gen_range(1..=7);
        let a = random_tensor(&[rows, cols], &mut rng);
        let b = random_tensor(&[rows, cols], &mut rng);
        let bias = random_tensor(&[cols], &mut rng);
        let ps = params_of(&[("a", a), ("b", b), ("bias", bias)]);

        gradcheck(&format!("add {round}"), &ps, &|t, bind| {
            let x = t.add(bind.id("a").unwrap(), bind.id("b").unwrap()).unwrap();
            squared_sum(t, x)
        });
        gradcheck(&format!("add broadcast {round}"), &ps, &|t, bind| {
            let x = t.add(bind.id("a").unwrap(), bind.id("bias").unwrap()).unwrap();
            squared_sum(t, x)
        });
        gradcheck(&format!("sub {round}"), &ps, &|t, bind| {
            let x = t.sub(bind.id("a").unwrap(), bind.id("b").unwrap()).unwrap();
            squared_sum(t, x)
        });
        gradcheck(&format!("mul broadcast {round}"), &ps, &|t, bind| {
            let x = t.mul(bind.id("a").unwrap(), bind.id("bias").unwrap()).unwrap();
            squared_sum(t, x)
        });
        gradcheck(&format!("sigmoid/tanh/affine {round}"), &ps, &|t, bind| {
            let s = t.sigmoid(bind.id("a").unwrap());
            let u = t.tanh(s);
            let v = t.affine(u, 1.7, -0.3);
            squared_sum(t, v)
        });
        gradcheck(&format!("exp {round}"), &ps, &|t, bind| {
            let e = t.exp(bind.id("a").unwrap());
            t.sum(e)
        });
        gradcheck(&format!("mean {round}"), &ps, &|t, bind| {
            let m = t.mean(bind.id("a").unwrap());
            squared_sum(t, m)
        });
        gradcheck(&format!("sum_axis {round}"), &ps, &|t, bind| {
            let s0 = t.sum_axis(bind.id("a").unwrap(), 0).unwrap();
            let s1 = t.sum_axis(bind.id("a").unwrap(), 1).unwrap();
            let q0 = squared_sum(t, s0);
            let q1 = squared_sum(t, s1);
            t.add(q0, q1).unwrap()
        });
    }
}

#[test]
fn div_log_clamp_ops() {
    let mut rng = StdRng::seed_from_u64(13);
    for round in 0..10 {
        let cols = rng.gen_range(1..=6);
        // Positive, away from the clamp kinks, bounded away from zero.
        let pos = Tensor::from_values(
            &[cols],
            (0..cols).map(|_| rng.gen_range(0.2..2.0)).collect(),
        )
        .unwrap();
        let denom = Tensor::from_values(
            &[cols],
            (0..cols)
                .map(|_| rng.gen_range(0.5..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect(),
        )
        .unwrap();
        let ps = params_of(&[("p", pos), ("q", denom)]);

        gradcheck(&format!("log {round}"), &ps, &|t, bind| {
            let l = t.log(bind.id("p").unwrap());
            squared_sum(t, l)
        });
        gradcheck(&format!("div {round}"), &ps, &|t, bind| {
            let d = t.div(bind.id("p").unwrap(), bind.id("q").unwrap()).unwrap();
            squared_sum(t, d)
        });
        gradcheck(&format!("clamp interior {round}"), &ps, &|t, bind| {
            let c = t.clamp(bind.id("p").unwrap(), -5.0, 5.0);
            squared_sum(t, c)
        });
    }
}

#[test]
fn matmul_linear_softmax_ops() {
    let mut rng = StdRng::seed_from_u64(17);
    for round in 0..10 {
        let (m, k, n) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let ps = params_of(&[
            ("a", random_tensor(&[m, k], &mut rng)),
            ("b", random_tensor(&[k, n], &mut rng)),
            ("w", random_tensor(&[n, k], &mut rng)),
            ("bias", random_tensor(&[n], &mut rng)),
        ]);
        gradcheck(&format!("matmul {round}"), &ps, &|t, bind| {
            let c = t.matmul(bind.id("a").unwrap(), bind.id("b").unwrap()).unwrap();
            squared_sum(t, c)
        });
        gradcheck(&format!("linear {round}"), &ps, &|t, bind| {
            let y = t
                .linear(
                    bind.id("a").unwrap(),
                    bind.id("w").unwrap(),
                    Some(bind.id("bias").unwrap()),
                )
                .unwrap();
            squared_sum(t, y)
        });
        gradcheck(&format!("softmax {round}"), &ps, &|t, bind| {
            let s = t.softmax(bind.id("a").unwrap());
            squared_sum(t, s)
        });
        gradcheck(&format!("log_softmax {round}"), &ps, &|t, bind| {
            let s = t.log_softmax(bind.id("a").unwrap());
            squared_sum(t, s)
        });
        gradcheck(&format!("logsumexp {round}"), &ps, &|t, bind| {
            let s = t.logsumexp(bind.id("a").unwrap());
            squared_sum(t, s)
        });
    }
}

#[test]
fn shape_ops() {
    let mut rng = StdRng::seed_from_u64(19);
    for round in 0..10 {
        let rows = rng.gen_range(2..=5);
        let ps = params_of(&[
            ("a", random_tensor(&[rows, 3], &mut rng)),
            ("b", random_tensor(&[rows, 2], &mut rng)),
            ("u", random_tensor(&[1, 4], &mut rng)),
        ]);
        gradcheck(&format!("concat+slice {round}"), &ps, &|t, bind| {
            let c = t
                .concat(&[bind.id("a").unwrap(), bind.id("b").unwrap()], 1)
                .unwrap();
            let s = t.slice(c, 1, 1, 3).unwrap();
            squared_sum(t, s)
        });
        gradcheck(&format!("broadcast_rows {round}"), &ps, &|t, bind| {
            let r = t.broadcast_rows(bind.id("u").unwrap(), 3).unwrap();
            let sq = squared_sum(t, r);
            t.reshape(sq, &[1]).unwrap()
        });
    }
}

fn random_sequences(rng: &mut StdRng, n: usize, t_len: usize, d: usize) -> Vec<SequenceInstance> {
    (0..n)
        .map(|_| SequenceInstance {
            x: (0..t_len * d).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            y: (0..t_len).map(|_| u8::from(rng.gen::<bool>())).collect(),
            static_features: Vec::new(),
        })
        .collect()
}

#[test]
fn lstm_step_gradients_both_variants() {
    let mut rng = StdRng::seed_from_u64(23);
    for variant in [CellVariant::Standard, CellVariant::SigmaCell] {
        for round in 0..5 {
            let spec = ExpertSpec {
                hidden_dim: 3,
                output_dim: 1,
                cell_variant: variant,
            };
            let model = LstmModel::new("m", 2, spec);
            let mut ps = ParamSet::new(rng.gen());
            let mut init_rng = ps.rng();
            model.init_params(&mut ps, &mut init_rng).unwrap();
            let seqs = random_sequences(&mut rng, 2, 3, 2);
            gradcheck(&format!("lstm {variant:?} {round}"), &ps, &|t, bind| {
                let refs: Vec<&SequenceInstance> = seqs.iter().collect();
                let xs = batch_inputs(t, &refs, 2, 3).unwrap();
                let probs = model.forward(t, bind, &xs).unwrap();
                let last = *probs.last().unwrap();
                squared_sum(t, last)
            });
        }
    }
}

#[test]
fn rnn_context_gradients() {
    let mut rng = StdRng::seed_from_u64(29);
    for round in 0..5 {
        let model = RnnContext::new("ctx", 2, 3);
        let mut ps = ParamSet::new(rng.gen());
        let mut init_rng = ps.rng();
        model.init_params(&mut ps, &mut init_rng).unwrap();
        let seqs = random_sequences(&mut rng, 2, 3, 2);
        gradcheck(&format!("rnn {round}"), &ps, &|t, bind| {
            let refs: Vec<&SequenceInstance> = seqs.iter().collect();
            let xs = batch_inputs(t, &refs, 2, 3).unwrap();
            let ctx = model.forward(t, bind, &xs).unwrap();
            let last = *ctx.last().unwrap();
            squared_sum(t, last)
        });
    }
}

#[test]
fn attention_score_gradients_all_kinds() {
    let mut rng = StdRng::seed_from_u64(31);
    for kind in AttentionKind::ALL {
        for round in 0..5 {
            let config = GateConfig {
                kind,
                context_dim: 3,
                encoding_dim: 3,
                attention_dim: 2,
            };
            let gate = AttentionGate::new("g", config);
            let mut ps = ParamSet::new(rng.gen());
            let mut init_rng = ps.rng();
            gate.init_params(&mut ps, &mut init_rng).unwrap();
            ps.insert("u0", random_tensor(&[1, 3], &mut rng)).unwrap();
            ps.insert("u1", random_tensor(&[1, 3], &mut rng)).unwrap();
            ps.insert("ctx", random_tensor(&[2, 3], &mut rng)).unwrap();
            gradcheck(&format!("score {kind:?} {round}"), &ps, &|t, bind| {
                let c = bind.id("ctx").unwrap();
                let us = [bind.id("u0").unwrap(), bind.id("u1").unwrap()];
                let scores = gate.score_all(t, bind, c, &us).unwrap();
                let alpha = t.softmax(scores);
                squared_sum(t, alpha)
            });
        }
    }
}

#[test]
fn ensemble_loss_gradients_end_to_end() {
    let mut rng = StdRng::seed_from_u64(37);
    for round in 0..3 {
        let spec = EnsembleSpec {
            expert_specs: vec![ExpertSpec::binary(2), ExpertSpec::binary(3)],
            context_hidden_dim: 2,
            encoding_dim: 2,
            attention_kind: AttentionKind::Additive,
            attention_dim: 2,
        };
        let model = MaesModel::new(2, spec).unwrap();
        let ps = model.init_params(rng.gen()).unwrap();
        let seqs = random_sequences(&mut rng, 2, 3, 2);

        gradcheck(&format!("maes loss {round}"), &ps, &|t, bind| {
            let refs: Vec<&SequenceInstance> = seqs.iter().collect();
            let xs = batch_inputs(t, &refs, 2, 3).unwrap();
            let fwd = model.forward(t, bind, &xs).unwrap();
            let ys = batch_labels(t, &refs, 3, 2).unwrap();
            maes_loss_on_tape(t, &fwd.per_expert, &fwd.scores, &ys).unwrap()
        });

        gradcheck(&format!("importance squared {round}"), &ps, &|t, bind| {
            let refs: Vec<&SequenceInstance> = seqs.iter().collect();
            let xs = batch_inputs(t, &refs, 2, 3).unwrap();
            let fwd = model.forward(t, bind, &xs).unwrap();
            importance_loss_on_tape(t, &fwd.alphas, ImportanceKind::SquaredTotals).unwrap()
        });

        gradcheck(&format!("importance cv {round}"), &ps, &|t, bind| {
            let refs: Vec<&SequenceInstance> = seqs.iter().collect();
            let xs = batch_inputs(t, &refs, 2, 3).unwrap();
            let fwd = model.forward(t, bind, &xs).unwrap();
            importance_loss_on_tape(t, &fwd.alphas, ImportanceKind::CoefficientOfVariation)
                .unwrap()
        });
    }
}

#[test]
fn bce_gradients() {
    let mut rng = StdRng::seed_from_u64(41);
    for round in 0..5 {
        let model = LstmModel::new("m", 2, ExpertSpec::binary(3));
        let mut ps = ParamSet::new(rng.gen());
        let mut init_rng = ps.rng();
        model.init_params(&mut ps, &mut init_rng).unwrap();
        let seqs = random_sequences(&mut rng, 2, 3, 2);
        gradcheck(&format!("bce {round}"), &ps, &|t, bind| {
            let refs: Vec<&SequenceInstance> = seqs.iter().collect();
            let xs = batch_inputs(t, &refs, 2, 3).unwrap();
            let probs = model.forward(t, bind, &xs).unwrap();
            let ys = batch_labels(t, &refs, 3, 1).unwrap();
            bce_series_sum(t, &probs, &ys).unwrap()
        });
    }
}
