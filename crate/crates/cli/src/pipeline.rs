//! The per-`(delta, seed)` experiment pipeline: generate or load the
//! dataset, train the pool / stacking weights / ensemble with crash-safe
//! stage markers, evaluate the whole roster, and emit report data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use maes_core::baselines::{
    average_ensemble, fit_stacking, select_predict, stacked_predict, stepwise_select, ModelPool,
    PoolMember, StackingMode, StackingWeights,
};
use maes_core::datagen::{generate_dataset, Dataset};
use maes_core::diffcore::derive_seed;
use maes_core::maes::{maes_predict, train_maes, MaesModel, MaesPrediction};
use maes_core::metrics::{
    prediction_correlation, stepwise_apr, CorrelationMatrix, MetricsReport,
};
use maes_core::seqmodels::LstmModel;
use maes_core::training::predict_lstm;

use crate::artifacts::{
    self, ensure_dir, load_dataset, mark_stage_done, read_json, run_dir, save_dataset,
    save_history, stage_done, write_csv, write_json, write_jsonl, LstmCheckpoint, MaesCheckpoint,
    PoolManifest, PoolManifestEntry, Provenance,
};
use crate::config::{ExperimentConfig, ModelKind};

/// Resolved invocation: config plus the effective output directory.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub hash: String,
}

impl Workspace {
    pub fn new(config: ExperimentConfig, out_override: Option<PathBuf>) -> Self {
        let out = out_override.unwrap_or_else(|| config.output_dir.clone());
        let hash = config.hash();
        Self { config, out, hash }
    }

    /// Echo the resolved config into the output directory once.
    pub fn write_config_echo(&self) -> Result<()> {
        ensure_dir(&self.out)?;
        let path = self.out.join("config.json");
        let mut text = self.config.canonical_json();
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn provenance(&self, delta: f64, seed: u64) -> Provenance {
        Provenance {
            config_hash: self.hash.clone(),
            seed,
            delta,
        }
    }

    pub fn run_dir(&self, delta: f64, seed: u64) -> PathBuf {
        run_dir(&self.out, delta, seed)
    }
}

// ── Stage: dataset ───────────────────────────────────────────────────

/// Load the run's dataset, generating and saving it first if needed.
pub fn prepare_dataset(ws: &Workspace, delta: f64, seed: u64) -> Result<Dataset> {
    let dir = ws.run_dir(delta, seed).join("dataset");
    if stage_done(&dir, "dataset", &ws.hash) {
        return load_dataset(&dir);
    }
    let cfg = ws.config.data.shift_config(delta, seed);
    let dataset = generate_dataset(&cfg)?;
    save_dataset(&dir, &dataset, &ws.provenance(delta, seed))?;
    mark_stage_done(&dir, "dataset", &ws.hash)?;
    Ok(dataset)
}

// ── Stage: pool ──────────────────────────────────────────────────────

fn member_file(index: usize) -> String {
    format!("member_{index:02}.json")
}

pub fn train_pool_stage(
    ws: &Workspace,
    delta: f64,
    seed: u64,
    dataset: &Dataset,
) -> Result<ModelPool> {
    let dir = ws.run_dir(delta, seed).join("pool");
    if stage_done(&dir, "pool", &ws.hash) {
        return load_pool(ws, delta, seed, dataset);
    }
    let specs = ws.config.pool.sample_specs(seed);
    let t = &ws.config.train;
    let pool = maes_core::baselines::train_pool(
        &specs,
        dataset,
        t.epochs,
        t.batch_size,
        t.learning_rate,
        derive_seed(seed, 1),
    )?;
    ensure_dir(&dir)?;
    let provenance = ws.provenance(delta, seed);
    let mut entries = Vec::new();
    for (i, member) in pool.members.iter().enumerate() {
        let ckpt = LstmCheckpoint {
            provenance: provenance.clone(),
            spec: member.spec.clone(),
            input_dim: pool.input_dim,
            train_seed: member.seed,
            best_epoch: member.best_epoch,
            per_step_val_loss: member.per_step_val_loss.clone(),
            params: member.params.clone(),
        };
        write_json(&dir.join(member_file(i)), &ckpt)?;
        save_history(
            &dir.join(format!("member_{i:02}.history.jsonl")),
            &provenance,
            &member.history,
        )?;
        entries.push(PoolManifestEntry {
            file: member_file(i),
            spec: member.spec.clone(),
            train_seed: member.seed,
            best_epoch: member.best_epoch,
            val_mean_apr: member.val_mean_apr,
            per_step_val_loss: member.per_step_val_loss.clone(),
        });
    }
    write_json(
        &dir.join("manifest.json"),
        &PoolManifest {
            provenance,
            members: entries,
        },
    )?;
    mark_stage_done(&dir, "pool", &ws.hash)?;
    Ok(pool)
}

/// Rebuild a pool from its manifest; validation predictions are recomputed
/// from the stored parameters (deterministic).
pub fn load_pool(ws: &Workspace, delta: f64, seed: u64, dataset: &Dataset) -> Result<ModelPool> {
    let dir = ws.run_dir(delta, seed).join("pool");
    let manifest: PoolManifest = read_json(&dir.join("manifest.json"))?;
    let batch = ws.config.evaluation.prediction_batch;
    let mut members = Vec::with_capacity(manifest.members.len());
    for (i, entry) in manifest.members.iter().enumerate() {
        let ckpt: LstmCheckpoint = read_json(&dir.join(&entry.file))?;
        let model = LstmModel::new(
            &maes_core::baselines::member_prefix(i),
            ckpt.input_dim,
            ckpt.spec.clone(),
        );
        let val_predictions = predict_lstm(&model, &ckpt.params, &dataset.validation, batch)?;
        members.push(PoolMember {
            spec: ckpt.spec,
            params: ckpt.params,
            seed: ckpt.train_seed,
            per_step_val_loss: ckpt.per_step_val_loss,
            val_predictions,
            history: Vec::new(),
            best_epoch: ckpt.best_epoch,
            val_mean_apr: entry.val_mean_apr,
        });
    }
    Ok(ModelPool {
        input_dim: dataset.config.d,
        members,
    })
}

// ── Stage: stacking ──────────────────────────────────────────────────

pub fn fit_stacking_stage(
    ws: &Workspace,
    delta: f64,
    seed: u64,
    dataset: &Dataset,
    pool: &ModelPool,
) -> Result<(StackingWeights, StackingWeights)> {
    let dir = ws.run_dir(delta, seed).join("stacking");
    if stage_done(&dir, "stacking", &ws.hash) {
        let global: StackingWeights = read_json(&dir.join("global.json"))?;
        let stepwise: StackingWeights = read_json(&dir.join("stepwise.json"))?;
        return Ok((global, stepwise));
    }
    let s = &ws.config.stacking;
    let global = fit_stacking(
        pool,
        &dataset.validation,
        StackingMode::Global,
        s.parametrization,
        s.steps,
        s.learning_rate,
    )?;
    let stepwise = fit_stacking(
        pool,
        &dataset.validation,
        StackingMode::Stepwise,
        s.parametrization,
        s.steps,
        s.learning_rate,
    )?;
    write_json(&dir.join("global.json"), &global)?;
    write_json(&dir.join("stepwise.json"), &stepwise)?;
    mark_stage_done(&dir, "stacking", &ws.hash)?;
    Ok((global, stepwise))
}

// ── Stage: ensemble ──────────────────────────────────────────────────

pub fn train_maes_stage(
    ws: &Workspace,
    delta: f64,
    seed: u64,
    dataset: &Dataset,
) -> Result<MaesCheckpoint> {
    let dir = ws.run_dir(delta, seed).join("maes");
    if stage_done(&dir, "maes", &ws.hash) {
        return read_json(&dir.join("checkpoint.json"));
    }
    let pool_specs = ws.config.pool.sample_specs(seed);
    let spec = ws.config.ensemble.ensemble_spec(&pool_specs);
    let model = MaesModel::new(dataset.config.d, spec.clone())?;
    let train_config = ws.config.ensemble_train_settings().train_config(derive_seed(seed, 2));
    let out = train_maes(&model, dataset, &train_config)?;
    let provenance = ws.provenance(delta, seed);
    let ckpt = MaesCheckpoint {
        provenance: provenance.clone(),
        spec,
        input_dim: dataset.config.d,
        train_config,
        best_epoch: out.best_epoch,
        params: out.params,
    };
    write_json(&dir.join("checkpoint.json"), &ckpt)?;
    save_history(&dir.join("history.jsonl"), &provenance, &out.history)?;
    mark_stage_done(&dir, "maes", &ws.hash)?;
    Ok(ckpt)
}

pub fn load_maes(ws: &Workspace, delta: f64, seed: u64) -> Result<(MaesModel, MaesCheckpoint)> {
    let dir = ws.run_dir(delta, seed).join("maes");
    let ckpt: MaesCheckpoint = read_json(&dir.join("checkpoint.json"))?;
    let model = MaesModel::new(ckpt.input_dim, ckpt.spec.clone())?;
    Ok((model, ckpt))
}

// ── Stage: evaluation ────────────────────────────────────────────────

/// Metric report of every roster model on the test split, plus the raw
/// artifacts reports build on.
pub struct RunEvaluation {
    pub delta: f64,
    pub seed: u64,
    /// Roster model name -> report on the test split.
    pub reports: BTreeMap<String, MetricsReport>,
    /// Every pool member's report (`member_00`, ...).
    pub member_reports: Vec<MetricsReport>,
    pub member_predictions: Vec<Vec<Vec<f64>>>,
    pub maes_prediction: Option<MaesPrediction>,
    pub pool_correlation: CorrelationMatrix,
    pub maes_correlation: Option<CorrelationMatrix>,
    pub test_labels: Vec<Vec<u8>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct MetricsRecord {
    model: String,
    mean_apr: f64,
    std_apr: f64,
    per_step_apr: Vec<Option<f64>>,
    skipped_steps: Vec<usize>,
    warnings: Vec<String>,
}

fn record_of(model: &str, report: &MetricsReport) -> MetricsRecord {
    MetricsRecord {
        model: model.to_string(),
        mean_apr: report.mean_apr,
        std_apr: report.std_apr,
        per_step_apr: report.per_step_apr.clone(),
        skipped_steps: report.skipped_steps.clone(),
        warnings: report.warnings.clone(),
    }
}

/// Evaluate the configured roster from persisted artifacts and write the
/// run's metric files.
pub fn evaluate_run(ws: &Workspace, delta: f64, seed: u64) -> Result<RunEvaluation> {
    let dataset = prepare_dataset(ws, delta, seed)?;
    let pool = load_pool(ws, delta, seed, &dataset)
        .context("pool not trained yet (run `train` or `sweep-delta` first)")?;
    let batch = ws.config.evaluation.prediction_batch;
    let test_labels: Vec<Vec<u8>> = dataset.test.iter().map(|i| i.y.clone()).collect();
    let member_predictions = pool.predict_all(&dataset.test, batch)?;
    let member_reports: Vec<MetricsReport> = member_predictions
        .iter()
        .map(|p| stepwise_apr(p, &test_labels))
        .collect::<maes_core::Result<_>>()?;

    let roster = &ws.config.models;
    let mut reports: BTreeMap<String, MetricsReport> = BTreeMap::new();
    let mut maes_prediction = None;
    let mut maes_correlation = None;

    for kind in roster {
        let report = match kind {
            ModelKind::BestIndividual => {
                member_reports[pool.best_by_global_validation()].clone()
            }
            ModelKind::StepwiseSelection => {
                let grid = select_predict(&member_predictions, &stepwise_select(&pool));
                stepwise_apr(&grid, &test_labels)?
            }
            ModelKind::AverageEnsemble => {
                let grid = average_ensemble(&member_predictions);
                stepwise_apr(&grid, &test_labels)?
            }
            ModelKind::GlobalStacking | ModelKind::StepwiseStacking => {
                let (global, stepwise) = fit_stacking_stage(ws, delta, seed, &dataset, &pool)?;
                let weights = if *kind == ModelKind::GlobalStacking {
                    global
                } else {
                    stepwise
                };
                let grid = stacked_predict(&member_predictions, &weights)?;
                stepwise_apr(&grid, &test_labels)?
            }
            ModelKind::Maes => {
                let (model, ckpt) = load_maes(ws, delta, seed)
                    .context("ensemble not trained yet (run `train` first)")?;
                let pred = maes_predict(&model, &ckpt.params, &dataset.test, batch)?;
                let report = stepwise_apr(&pred.ensemble, &test_labels)?;
                maes_correlation = Some(prediction_correlation(&pred.per_expert)?);
                maes_prediction = Some(pred);
                report
            }
        };
        reports.insert(kind.name().to_string(), report);
    }

    let pool_correlation = prediction_correlation(&member_predictions)?;

    // Persist the run's metric files.
    let dir = ws.run_dir(delta, seed).join("eval");
    let provenance = ws.provenance(delta, seed);
    let mut records: Vec<MetricsRecord> = reports
        .iter()
        .map(|(name, r)| record_of(name, r))
        .collect();
    for (i, r) in member_reports.iter().enumerate() {
        records.push(record_of(&format!("member_{i:02}"), r));
    }
    write_jsonl(&dir.join("metrics.jsonl"), &provenance, &records)?;

    let t_len = test_labels[0].len();
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut row = vec![t.to_string()];
        for record in &records {
            row.push(match record.per_step_apr[t] {
                Some(v) => artifacts::fmt_f64(v),
                None => "".to_string(),
            });
        }
        rows.push(row);
    }
    let mut header = vec!["step"];
    let names: Vec<String> = records.iter().map(|r| r.model.clone()).collect();
    header.extend(names.iter().map(String::as_str));
    write_csv(&dir.join("per_step_apr.csv"), &provenance, &header, &rows)?;
    mark_stage_done(&dir, "eval", &ws.hash)?;

    Ok(RunEvaluation {
        delta,
        seed,
        reports,
        member_reports,
        member_predictions,
        maes_prediction,
        pool_correlation,
        maes_correlation,
        test_labels,
    })
}

/// Train all stages of one `(delta, seed)` cell (resumable).
pub fn train_run(ws: &Workspace, delta: f64, seed: u64) -> Result<()> {
    let dataset = prepare_dataset(ws, delta, seed)?;
    let pool = train_pool_stage(ws, delta, seed, &dataset)?;
    let needs_stacking = ws
        .config
        .models
        .iter()
        .any(|m| matches!(m, ModelKind::GlobalStacking | ModelKind::StepwiseStacking));
    if needs_stacking {
        fit_stacking_stage(ws, delta, seed, &dataset, &pool)?;
    }
    if ws.config.models.contains(&ModelKind::Maes) {
        train_maes_stage(ws, delta, seed, &dataset)?;
    }
    Ok(())
}

// ── Reports (figure data) ────────────────────────────────────────────

/// Emit attention heatmap data, correlation matrices and sample prediction
/// traces for one run, regenerated deterministically from checkpoints.
pub fn emit_reports(ws: &Workspace, delta: f64, seed: u64) -> Result<()> {
    let evaluation = evaluate_run(ws, delta, seed)?;
    let dir = ws.run_dir(delta, seed).join("report");
    let provenance = ws.provenance(delta, seed);

    if let Some(pred) = &evaluation.maes_prediction {
        // Gate weights for every (sequence, step): the heatmap data.
        let gw = &pred.gate;
        let mut rows = Vec::with_capacity(gw.n * gw.t);
        for n in 0..gw.n {
            for t in 0..gw.t {
                let mut row = vec![n.to_string(), t.to_string()];
                row.extend(gw.row(n, t).iter().map(|v| artifacts::fmt_f64(*v)));
                rows.push(row);
            }
        }
        let mut header = vec!["sequence".to_string(), "step".to_string()];
        for m in 0..gw.m {
            header.push(format!("alpha_{m}"));
        }
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&dir.join("attention.csv"), &provenance, &header_refs, &rows)?;

        if let Some(corr) = &evaluation.maes_correlation {
            write_correlation(&dir.join("correlation_maes.csv"), &provenance, corr)?;
        }

        // Sample prediction traces: label, ensemble and per-expert outputs.
        let k = ws.config.evaluation.trace_sequences.min(gw.n);
        let mut rows = Vec::new();
        for n in 0..k {
            for t in 0..gw.t {
                let mut row = vec![
                    n.to_string(),
                    t.to_string(),
                    evaluation.test_labels[n][t].to_string(),
                    artifacts::fmt_f64(pred.ensemble[n][t]),
                ];
                for m in 0..pred.per_expert.len() {
                    row.push(artifacts::fmt_f64(pred.per_expert[m][n][t]));
                }
                rows.push(row);
            }
        }
        let mut header = vec![
            "sequence".to_string(),
            "step".to_string(),
            "label".to_string(),
            "ensemble".to_string(),
        ];
        for m in 0..pred.per_expert.len() {
            header.push(format!("expert_{m}"));
        }
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&dir.join("traces.csv"), &provenance, &header_refs, &rows)?;
    }

    write_correlation(
        &dir.join("correlation_pool.csv"),
        &provenance,
        &evaluation.pool_correlation,
    )?;
    Ok(())
}

fn write_correlation(path: &Path, provenance: &Provenance, corr: &CorrelationMatrix) -> Result<()> {
    let mut rows = Vec::with_capacity(corr.m);
    for i in 0..corr.m {
        let mut row = vec![format!("model_{i}")];
        for j in 0..corr.m {
            row.push(artifacts::fmt_f64(corr.get(i, j)));
        }
        rows.push(row);
    }
    let mut header = vec!["model".to_string()];
    for j in 0..corr.m {
        header.push(format!("model_{j}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, provenance, &header_refs, &rows)
}
