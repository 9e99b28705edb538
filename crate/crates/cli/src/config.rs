//! Declarative experiment configuration (JSON on disk).
//!
//! Every field has a default, so config files only state what they change.
//! Serialization is field-order stable and configs round-trip exactly; the
//! FNV-1a hash of the canonical JSON form is embedded in every output file
//! as provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use maes_core::datagen::ShiftConfig;
use maes_core::gate::AttentionKind;
use maes_core::maes::{EnsembleSpec, ImportanceKind, LossKind, TrainConfig};
use maes_core::seqmodels::{CellVariant, ExpertSpec};

/// Everything a run needs: data grid, model roster, architectures,
/// training schedule, sweep definitions, output directory and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub pool: PoolConfig,
    pub ensemble: EnsembleConfig,
    pub train: TrainSettings,
    /// Overrides `train` for the attentive ensemble when set (the pool and
    /// the ensemble often want different schedules at small scale).
    pub ensemble_train: Option<TrainSettings>,
    pub stacking: StackingSettings,
    pub evaluation: EvalSettings,
    pub models: Vec<ModelKind>,
    pub ablations: AblationSettings,
    pub search: SearchSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            output_dir: PathBuf::from("out"),
            seeds: vec![1, 2, 3],
            data: DataConfig::default(),
            pool: PoolConfig::default(),
            ensemble: EnsembleConfig::default(),
            train: TrainSettings::default(),
            ensemble_train: None,
            stacking: StackingSettings::default(),
            evaluation: EvalSettings::default(),
            models: ModelKind::ALL.to_vec(),
            ablations: AblationSettings::default(),
            search: SearchSettings::default(),
        }
    }
}

/// Data-generator grid: one dataset per `(delta, seed)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub deltas: Vec<f64>,
    pub d: usize,
    pub l: usize,
    pub t: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub r: f64,
    pub sparsity: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            deltas: vec![0.0, 0.01, 0.025, 0.05, 0.075, 0.1, 0.2, 0.3, 0.4],
            d: 3,
            l: 10,
            t: 48,
            n_train: 5000,
            n_test: 1000,
            r: 0.25,
            sparsity: 0.5,
        }
    }
}

impl DataConfig {
    pub fn shift_config(&self, delta: f64, seed: u64) -> ShiftConfig {
        ShiftConfig {
            delta,
            d: self.d,
            l: self.l,
            t: self.t,
            n_train: self.n_train,
            n_test: self.n_test,
            r: self.r,
            sparsity: self.sparsity,
            seed,
        }
    }
}

/// Base-learner pool: `size` LSTMs with hidden dims sampled uniformly from
/// `[hidden_min, hidden_max]` per experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub size: usize,
    pub hidden_min: usize,
    pub hidden_max: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            size: 20,
            hidden_min: 100,
            hidden_max: 1100,
        }
    }
}

impl PoolConfig {
    /// The pool architectures for one experiment seed.
    pub fn sample_specs(&self, seed: u64) -> Vec<ExpertSpec> {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(
            maes_core::diffcore::derive_seed(seed, 900),
        );
        (0..self.size)
            .map(|_| ExpertSpec {
                hidden_dim: rng.gen_range(self.hidden_min..=self.hidden_max),
                output_dim: 1,
                cell_variant: CellVariant::Standard,
            })
            .collect()
    }
}

/// Ensemble architecture; experts reuse the first `n_experts` pool specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub n_experts: usize,
    pub context_hidden_dim: usize,
    pub encoding_dim: usize,
    pub attention_kind: AttentionKind,
    pub attention_dim: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_experts: 5,
            context_hidden_dim: 64,
            encoding_dim: 64,
            attention_kind: AttentionKind::Additive,
            attention_dim: 64,
        }
    }
}

impl EnsembleConfig {
    pub fn ensemble_spec(&self, pool_specs: &[ExpertSpec]) -> EnsembleSpec {
        let n = self.n_experts.min(pool_specs.len()).max(1);
        EnsembleSpec {
            expert_specs: pool_specs[..n].to_vec(),
            context_hidden_dim: self.context_hidden_dim,
            encoding_dim: self.encoding_dim,
            attention_kind: self.attention_kind,
            attention_dim: self.attention_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub w_imp: f64,
    pub pretrain_epochs: usize,
    pub loss_kind: LossKind,
    pub importance_kind: ImportanceKind,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 100,
            learning_rate: 0.001,
            w_imp: 0.0,
            pretrain_epochs: 0,
            loss_kind: LossKind::Maes,
            importance_kind: ImportanceKind::SquaredTotals,
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            w_imp: self.w_imp,
            pretrain_epochs: self.pretrain_epochs,
            loss_kind: self.loss_kind,
            importance_kind: self.importance_kind,
            seed,
        }
    }
}

/// Meta-learner fit: gradient steps on the validation predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackingSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub parametrization: maes_core::baselines::StackingParametrization,
}

impl Default for StackingSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 0.01,
            parametrization: maes_core::baselines::StackingParametrization::SoftmaxConvex,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Monte Carlo permutations for significance tests.
    pub n_perm: usize,
    /// Sequences per forward batch during evaluation.
    pub prediction_batch: usize,
    /// Sample sequences exported in prediction-trace reports.
    pub trace_sequences: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_perm: 10_000,
            prediction_batch: 100,
            trace_sequences: 4,
        }
    }
}

/// The model roster evaluated by `train`/`evaluate`/`sweep-delta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Best pool member by mean validation APR.
    BestIndividual,
    StepwiseSelection,
    AverageEnsemble,
    GlobalStacking,
    StepwiseStacking,
    Maes,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::BestIndividual,
        ModelKind::StepwiseSelection,
        ModelKind::AverageEnsemble,
        ModelKind::GlobalStacking,
        ModelKind::StepwiseStacking,
        ModelKind::Maes,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::BestIndividual => "best_individual",
            ModelKind::StepwiseSelection => "stepwise_selection",
            ModelKind::AverageEnsemble => "average_ensemble",
            ModelKind::GlobalStacking => "global_stacking",
            ModelKind::StepwiseStacking => "stepwise_stacking",
            ModelKind::Maes => "maes",
        }
    }
}

/// Ablation grids, all evaluated on validation data at one `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub delta: f64,
    pub w_imp_grid: Vec<f64>,
    pub pretrain_grid: Vec<usize>,
    pub attention_kinds: Vec<AttentionKind>,
    pub expert_counts: Vec<usize>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            delta: 0.2,
            w_imp_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            pretrain_grid: (0..=15).collect(),
            attention_kinds: AttentionKind::ALL.to_vec(),
            expert_counts: vec![1, 2, 3, 5, 7, 10],
        }
    }
}

/// Random search over gate dimensions, drawn from the arithmetic grid
/// `{start, start+step, ...} ∩ [start, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSettings {
    pub n_samples: usize,
    pub grid_start: usize,
    pub grid_step: usize,
    pub grid_max: usize,
    pub attention_kind: AttentionKind,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            n_samples: 20,
            grid_start: 10,
            grid_step: 20,
            grid_max: 1100,
            attention_kind: AttentionKind::Additive,
        }
    }
}

impl SearchSettings {
    pub fn grid_values(&self) -> Vec<usize> {
        (self.grid_start..=self.grid_max)
            .step_by(self.grid_step.max(1))
            .collect()
    }

    pub fn contains(&self, v: usize) -> bool {
        v >= self.grid_start
            && v <= self.grid_max
            && (v - self.grid_start).is_multiple_of(self.grid_step.max(1))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("cannot parse config {}: {e}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            anyhow::bail!("config needs at least one seed");
        }
        if self.models.is_empty() {
            anyhow::bail!("config needs at least one model in the roster");
        }
        if self.pool.size == 0 || self.pool.hidden_min == 0 || self.pool.hidden_min > self.pool.hidden_max {
            anyhow::bail!(
                "invalid pool: size {} hidden range [{}, {}]",
                self.pool.size,
                self.pool.hidden_min,
                self.pool.hidden_max
            );
        }
        if self.ensemble.n_experts == 0 {
            anyhow::bail!("ensemble needs at least one expert");
        }
        for &delta in &self.data.deltas {
            self.data.shift_config(delta, 1).validate()?;
        }
        self.train.train_config(1).validate()?;
        self.ensemble_train_settings().train_config(1).validate()?;
        // Architectures must assemble (e.g. dot attention dimension rule).
        let pool_specs = self.pool.sample_specs(self.seeds[0]);
        self.ensemble
            .ensemble_spec(&pool_specs)
            .validate()?;
        Ok(())
    }

    /// Training settings for the attentive ensemble.
    pub fn ensemble_train_settings(&self) -> TrainSettings {
        self.ensemble_train.clone().unwrap_or_else(|| self.train.clone())
    }

    /// Canonical JSON used for hashing and for echoing into the output dir.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a hash of the canonical JSON, as fixed-width hex.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical_json().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}
