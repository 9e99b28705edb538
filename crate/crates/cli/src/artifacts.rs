//! On-disk layout of everything a run produces: datasets, checkpoints,
//! histories, weights, metric reports and figure-data files.
//!
//! Every file embeds the producing config's hash and seed, no file embeds
//! wall-clock state, and all writers are deterministic, so re-running a
//! command with the same config reproduces byte-identical outputs.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use maes_core::datagen::{Dataset, SequenceInstance, ShiftConfig};
use maes_core::diffcore::ParamSet;
use maes_core::maes::{EnsembleSpec, TrainConfig};
use maes_core::seqmodels::ExpertSpec;
use maes_core::training::EpochRecord;

/// Stamped into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub delta: f64,
}

/// Directory of one `(delta, seed)` sub-run.
pub fn run_dir(out: &Path, delta: f64, seed: u64) -> PathBuf {
    out.join(format!("delta_{delta:.3}")).join(format!("seed_{seed:04}"))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

// ── Generic JSON / JSONL helpers ─────────────────────────────────────

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_dir(path.parent().unwrap_or(Path::new(".")))?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Line-delimited records with a provenance object on the first line.
pub fn write_jsonl<T: Serialize>(path: &Path, provenance: &Provenance, items: &[T]) -> Result<()> {
    ensure_dir(path.parent().unwrap_or(Path::new(".")))?;
    let mut out = String::new();
    out.push_str(&serde_json::to_string(provenance)?);
    out.push('\n');
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Provenance, Vec<T>)> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let head = lines
        .next()
        .ok_or_else(|| anyhow::anyhow!("{} is empty", path.display()))??;
    let provenance: Provenance = serde_json::from_str(&head)?;
    let mut items = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok((provenance, items))
}

/// CSV with a `# provenance` comment line, then a header row.
pub fn write_csv(
    path: &Path,
    provenance: &Provenance,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    ensure_dir(path.parent().unwrap_or(Path::new(".")))?;
    let mut out = String::new();
    out.push_str(&format!(
        "# config_hash={} seed={} delta={}\n",
        provenance.config_hash, provenance.seed, provenance.delta
    ));
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ── Datasets ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub provenance: Provenance,
    pub config: ShiftConfig,
    pub n_classes: usize,
    pub split_sizes: [usize; 3],
}

/// One file per split plus a header echoing the generator config.
pub fn save_dataset(dir: &Path, dataset: &Dataset, provenance: &Provenance) -> Result<()> {
    ensure_dir(dir)?;
    let header = DatasetHeader {
        provenance: provenance.clone(),
        config: dataset.config.clone(),
        n_classes: dataset.n_classes,
        split_sizes: [
            dataset.train.len(),
            dataset.validation.len(),
            dataset.test.len(),
        ],
    };
    write_json(&dir.join("header.json"), &header)?;
    for (name, split) in [
        ("train", &dataset.train),
        ("validation", &dataset.validation),
        ("test", &dataset.test),
    ] {
        write_jsonl(&dir.join(format!("{name}.jsonl")), provenance, split)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let header: DatasetHeader = read_json(&dir.join("header.json"))?;
    let mut splits: Vec<Vec<SequenceInstance>> = Vec::new();
    for name in ["train", "validation", "test"] {
        let (_, items) = read_jsonl(&dir.join(format!("{name}.jsonl")))?;
        splits.push(items);
    }
    let test = splits.pop().unwrap();
    let validation = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset {
        train,
        validation,
        test,
        config: header.config,
        n_classes: header.n_classes,
    })
}

// ── Checkpoints ──────────────────────────────────────────────────────

/// Named-tensor archive with an architecture header.
#[derive(Debug, Serialize, Deserialize)]
pub struct LstmCheckpoint {
    pub provenance: Provenance,
    pub spec: ExpertSpec,
    pub input_dim: usize,
    pub train_seed: u64,
    pub best_epoch: usize,
    pub per_step_val_loss: Vec<f64>,
    pub params: ParamSet,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaesCheckpoint {
    pub provenance: Provenance,
    pub spec: EnsembleSpec,
    pub input_dim: usize,
    pub train_config: TrainConfig,
    pub best_epoch: usize,
    pub params: ParamSet,
}

/// Manifest over the pool: member files, specs, seeds and step losses.
#[derive(Debug, Serialize, Deserialize)]
pub struct PoolManifest {
    pub provenance: Provenance,
    pub members: Vec<PoolManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PoolManifestEntry {
    pub file: String,
    pub spec: ExpertSpec,
    pub train_seed: u64,
    pub best_epoch: usize,
    pub val_mean_apr: f64,
    pub per_step_val_loss: Vec<f64>,
}

/// Training history as line-delimited records.
pub fn save_history(path: &Path, provenance: &Provenance, history: &[EpochRecord]) -> Result<()> {
    write_jsonl(path, provenance, history)
}

/// Marker written after a pipeline stage completes; a matching marker means
/// the stage is skipped on resume.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct DoneMarker {
    pub stage: String,
    pub config_hash: String,
}

pub fn stage_done(dir: &Path, stage: &str, config_hash: &str) -> bool {
    let path = dir.join(format!("{stage}.done.json"));
    match read_json::<DoneMarker>(&path) {
        Ok(marker) => marker.stage == stage && marker.config_hash == config_hash,
        Err(_) => false,
    }
}

pub fn mark_stage_done(dir: &Path, stage: &str, config_hash: &str) -> Result<()> {
    write_json(
        &dir.join(format!("{stage}.done.json")),
        &DoneMarker {
            stage: stage.into(),
            config_hash: config_hash.into(),
        },
    )
}

/// Format a float for CSV: full shortest-roundtrip precision.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
