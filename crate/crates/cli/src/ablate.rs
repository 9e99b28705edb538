//! Ablation grids over the ensemble, all evaluated on validation data of
//! one fixed-delta dataset: importance weight, pretraining epochs,
//! attention kind and expert count.

use anyhow::Result;
use rayon::prelude::*;

use maes_core::diffcore::derive_seed;
use maes_core::maes::{maes_predict, train_maes, MaesModel, TrainConfig};
use maes_core::metrics::stepwise_apr;

use crate::artifacts::{fmt_f64, write_csv, write_jsonl, Provenance};
use crate::pipeline::{prepare_dataset, Workspace};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationRecord {
    pub grid: String,
    pub setting: String,
    pub val_mean_apr: f64,
    pub val_std_apr: f64,
}

fn evaluate_setting(
    ws: &Workspace,
    dataset: &maes_core::datagen::Dataset,
    spec: maes_core::maes::EnsembleSpec,
    cfg: TrainConfig,
) -> Result<(f64, f64)> {
    let model = MaesModel::new(dataset.config.d, spec)?;
    let out = train_maes(&model, dataset, &cfg)?;
    let pred = maes_predict(
        &model,
        &out.params,
        &dataset.validation,
        ws.config.evaluation.prediction_batch,
    )?;
    let labels: Vec<Vec<u8>> = dataset.validation.iter().map(|i| i.y.clone()).collect();
    let report = stepwise_apr(&pred.ensemble, &labels)?;
    Ok((report.mean_apr, report.std_apr))
}

/// Run all four grids at `ablations.delta` with the first configured seed.
pub fn run_ablations(ws: &Workspace) -> Result<Vec<AblationRecord>> {
    ws.write_config_echo()?;
    let seed = ws.config.seeds[0];
    let delta = ws.config.ablations.delta;
    let dataset = prepare_dataset(ws, delta, seed)?;
    let pool_specs = ws.config.pool.sample_specs(seed);
    let base_spec = ws.config.ensemble.ensemble_spec(&pool_specs);
    let base_cfg = ws.config.ensemble_train_settings().train_config(derive_seed(seed, 2));

    // (grid, setting, spec, train config)
    let mut settings: Vec<(String, String, maes_core::maes::EnsembleSpec, TrainConfig)> =
        Vec::new();
    for &w_imp in &ws.config.ablations.w_imp_grid {
        let cfg = TrainConfig {
            w_imp,
            ..base_cfg.clone()
        };
        settings.push(("w_imp".into(), fmt_f64(w_imp), base_spec.clone(), cfg));
    }
    for &pre in &ws.config.ablations.pretrain_grid {
        if pre > base_cfg.epochs {
            continue;
        }
        let cfg = TrainConfig {
            pretrain_epochs: pre,
            ..base_cfg.clone()
        };
        settings.push(("pretrain_epochs".into(), pre.to_string(), base_spec.clone(), cfg));
    }
    for &kind in &ws.config.ablations.attention_kinds {
        let mut spec = base_spec.clone();
        spec.attention_kind = kind;
        if kind == maes_core::gate::AttentionKind::Dot {
            spec.encoding_dim = spec.context_hidden_dim;
        }
        settings.push((
            "attention_kind".into(),
            kind.name().to_string(),
            spec,
            base_cfg.clone(),
        ));
    }
    for &m in &ws.config.ablations.expert_counts {
        if m == 0 || m > pool_specs.len() {
            continue;
        }
        let mut spec = base_spec.clone();
        spec.expert_specs = pool_specs[..m].to_vec();
        settings.push(("expert_count".into(), m.to_string(), spec, base_cfg.clone()));
    }

    let results: Vec<Result<AblationRecord>> = settings
        .par_iter()
        .map(|(grid, setting, spec, cfg)| {
            let (mean, std) = evaluate_setting(ws, &dataset, spec.clone(), cfg.clone())?;
            Ok(AblationRecord {
                grid: grid.clone(),
                setting: setting.clone(),
                val_mean_apr: mean,
                val_std_apr: std,
            })
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }

    let provenance = Provenance {
        config_hash: ws.hash.clone(),
        seed,
        delta,
    };
    let dir = ws.out.join("ablations");
    write_jsonl(&dir.join("ablations.jsonl"), &provenance, &records)?;
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.grid.clone(),
                r.setting.clone(),
                fmt_f64(r.val_mean_apr),
                fmt_f64(r.val_std_apr),
            ]
        })
        .collect();
    write_csv(
        &dir.join("ablations.csv"),
        &provenance,
        &["grid", "setting", "val_mean_apr", "val_std_apr"],
        &rows,
    )?;
    Ok(records)
}
