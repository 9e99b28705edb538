//! The delta sweep: every `(delta, seed)` sub-run trained and evaluated
//! (in parallel, resumable), then one summary table and the significance
//! tests of the ensemble against the strongest baseline per delta.

use std::collections::BTreeMap;

use anyhow::Result;
use rayon::prelude::*;

use maes_core::diffcore::derive_seed;
use maes_core::metrics::permutation_test;

use crate::artifacts::{fmt_f64, write_csv, write_jsonl, Provenance};
use crate::config::ModelKind;
use crate::pipeline::{evaluate_run, train_run, RunEvaluation, Workspace};

pub struct SweepOutcome {
    pub failures: Vec<String>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SummaryRecord {
    model: String,
    delta: f64,
    seed: Option<u64>,
    mean_apr: f64,
    std_apr: f64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SignificanceRecord {
    delta: f64,
    model_a: String,
    model_b: String,
    mean_apr_a: f64,
    mean_apr_b: f64,
    p_value: f64,
    n_perm: usize,
}

/// Run the whole grid. Sub-run failures are recorded and the sweep keeps
/// going; the summary covers the successful cells.
pub fn run_delta_sweep(ws: &Workspace) -> Result<SweepOutcome> {
    ws.write_config_echo()?;
    let mut cells = Vec::new();
    for &delta in &ws.config.data.deltas {
        for &seed in &ws.config.seeds {
            cells.push((delta, seed));
        }
    }

    let results: Vec<(f64, u64, Result<RunEvaluation>)> = cells
        .par_iter()
        .map(|&(delta, seed)| {
            let run = train_run(ws, delta, seed).and_then(|()| evaluate_run(ws, delta, seed));
            (delta, seed, run)
        })
        .collect();

    let mut failures = Vec::new();
    let mut evaluations: Vec<RunEvaluation> = Vec::new();
    for (delta, seed, result) in results {
        match result {
            Ok(ev) => evaluations.push(ev),
            Err(e) => failures.push(format!("delta={delta} seed={seed}: {e:#}")),
        }
    }

    write_summary(ws, &evaluations)?;
    Ok(SweepOutcome { failures })
}

/// Per-seed rows, pooled rows, and permutation p-values of the ensemble
/// against the best-performing baseline at each delta.
pub fn write_summary(ws: &Workspace, evaluations: &[RunEvaluation]) -> Result<()> {
    // Summary files span all deltas and seeds; the stamp uses sentinels.
    let provenance = Provenance {
        config_hash: ws.hash.clone(),
        seed: 0,
        delta: -1.0,
    };

    let mut records: Vec<SummaryRecord> = Vec::new();
    // (model, delta) -> per-seed mean APRs, in seed order.
    let mut pooled: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut sorted: Vec<&RunEvaluation> = evaluations.iter().collect();
    sorted.sort_by(|a, b| {
        a.delta
            .partial_cmp(&b.delta)
            .unwrap()
            .then(a.seed.cmp(&b.seed))
    });
    for ev in &sorted {
        for (model, report) in &ev.reports {
            records.push(SummaryRecord {
                model: model.clone(),
                delta: ev.delta,
                seed: Some(ev.seed),
                mean_apr: report.mean_apr,
                std_apr: report.std_apr,
            });
            pooled
                .entry((model.clone(), fmt_f64(ev.delta)))
                .or_default()
                .push(report.mean_apr);
        }
    }
    for ((model, delta), values) in &pooled {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / values.len() as f64;
        records.push(SummaryRecord {
            model: model.clone(),
            delta: delta.parse().unwrap(),
            seed: None,
            mean_apr: mean,
            std_apr: var.sqrt(),
        });
    }

    let dir = ws.out.join("summary");
    write_jsonl(&dir.join("sweep_summary.jsonl"), &provenance, &records)?;
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                fmt_f64(r.delta),
                r.seed.map(|s| s.to_string()).unwrap_or_else(|| "pooled".into()),
                fmt_f64(r.mean_apr),
                fmt_f64(r.std_apr),
            ]
        })
        .collect();
    write_csv(
        &dir.join("sweep_summary.csv"),
        &provenance,
        &["model", "delta", "seed", "mean_apr", "std_apr"],
        &rows,
    )?;

    // Significance: the ensemble against the strongest baseline per delta,
    // pairing the per-step APR series concatenated across seeds.
    let mut significance: Vec<SignificanceRecord> = Vec::new();
    let mut deltas: Vec<f64> = evaluations.iter().map(|e| e.delta).collect();
    deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    deltas.dedup();
    for delta in deltas {
        let at_delta: Vec<&&RunEvaluation> =
            sorted.iter().filter(|e| e.delta == delta).collect();
        if at_delta.is_empty() || !ws.config.models.contains(&ModelKind::Maes) {
            continue;
        }
        let series_of = |model: &str| -> Vec<f64> {
            at_delta
                .iter()
                .flat_map(|e| e.reports.get(model).map(|r| r.apr_series()).unwrap_or_default())
                .collect()
        };
        let mean_of = |model: &str| -> f64 {
            let vals: Vec<f64> = at_delta
                .iter()
                .filter_map(|e| e.reports.get(model).map(|r| r.mean_apr))
                .collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        };
        let mut best_baseline: Option<(String, f64)> = None;
        for kind in &ws.config.models {
            if *kind == ModelKind::Maes {
                continue;
            }
            let mean = mean_of(kind.name());
            if best_baseline
                .as_ref()
                .map(|(_, best)| mean > *best)
                .unwrap_or(true)
            {
                best_baseline = Some((kind.name().to_string(), mean));
            }
        }
        let Some((baseline, baseline_mean)) = best_baseline else {
            continue;
        };
        let maes_series = series_of("maes");
        let baseline_series = series_of(&baseline);
        if maes_series.len() != baseline_series.len() || maes_series.is_empty() {
            continue;
        }
        let p_value = permutation_test(
            &maes_series,
            &baseline_series,
            ws.config.evaluation.n_perm,
            derive_seed(ws.config.seeds[0], 777),
        )?;
        significance.push(SignificanceRecord {
            delta,
            model_a: "maes".into(),
            model_b: baseline,
            mean_apr_a: mean_of("maes"),
            mean_apr_b: baseline_mean,
            p_value,
            n_perm: ws.config.evaluation.n_perm,
        });
    }
    write_jsonl(&dir.join("significance.jsonl"), &provenance, &significance)?;
    let rows: Vec<Vec<String>> = significance
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.delta),
                r.model_a.clone(),
                r.model_b.clone(),
                fmt_f64(r.mean_apr_a),
                fmt_f64(r.mean_apr_b),
                fmt_f64(r.p_value),
                r.n_perm.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("significance.csv"),
        &provenance,
        &[
            "delta",
            "model_a",
            "model_b",
            "mean_apr_a",
            "mean_apr_b",
            "p_value",
            "n_perm",
        ],
        &rows,
    )?;
    Ok(())
}
