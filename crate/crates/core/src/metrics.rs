//! Step-wise evaluation: average precision per prediction step, paired
//! permutation significance tests, and prediction-correlation analysis.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Step-interpolated average precision (area under the precision-recall
/// curve).
///
/// Items are ranked by descending score; ties keep their original order
/// (stable sort). `AP = sum_i (R_i - R_{i-1}) * P_i`, which accumulates
/// `precision@rank / n_pos` at every positive.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::ShapeMismatch {
            op: "average_precision",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(CoreError::MetricUndefined(
            "average precision needs at least one positive label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable: equal scores keep ascending original indices.
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must not be NaN")
    });
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// Step-wise APR summary for one model over a set of sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// APR per prediction step; `None` where the step had no positive
    /// labels and was skipped.
    pub per_step_apr: Vec<Option<f64>>,
    /// Arithmetic mean over the evaluated steps.
    pub mean_apr: f64,
    /// Population standard deviation over the evaluated steps.
    pub std_apr: f64,
    pub skipped_steps: Vec<usize>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    /// The evaluated per-step values, in step order.
    pub fn apr_series(&self) -> Vec<f64> {
        self.per_step_apr.iter().filter_map(|v| *v).collect()
    }
}

/// Compute APR at every step across sequences, then average over steps.
///
/// `predictions` and `labels` are `[n_sequences][t_steps]`. Steps without
/// positives are skipped with a warning rather than failing the report.
pub fn stepwise_apr(predictions: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(CoreError::ShapeMismatch {
            op: "stepwise_apr",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    let t_len = predictions[0].len();
    let mut per_step = Vec::with_capacity(t_len);
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    let mut kept = Vec::new();
    for t in 0..t_len {
        let scores: Vec<f64> = predictions.iter().map(|p| p[t]).collect();
        let labs: Vec<u8> = labels.iter().map(|l| l[t]).collect();
        match average_precision(&scores, &labs) {
            Ok(ap) => {
                kept.push(ap);
                per_step.push(Some(ap));
            }
            Err(CoreError::MetricUndefined(_)) => {
                warnings.push(format!("step {t}: no positive labels, APR skipped"));
                skipped.push(t);
                per_step.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(CoreError::MetricUndefined(
            "no step had a positive label".into(),
        ));
    }
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = kept.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / kept.len() as f64;
    Ok(MetricsReport {
        per_step_apr: per_step,
        mean_apr: mean,
        std_apr: var.sqrt(),
        skipped_steps: skipped,
        warnings,
    })
}

/// Two-sided Monte Carlo permutation test over paired per-step values.
///
/// Signs of the step-wise differences are flipped uniformly; the statistic
/// is the mean difference and the p-value uses the add-one estimator
/// `(1 + #{|perm| >= |observed|}) / (1 + n_perm)`.
pub fn permutation_test(
    series_a: &[f64],
    series_b: &[f64],
    n_perm: usize,
    seed: u64,
) -> Result<f64> {
    if series_a.len() != series_b.len() || series_a.is_empty() {
        return Err(CoreError::ShapeMismatch {
            op: "permutation_test",
            lhs: vec![series_a.len()],
            rhs: vec![series_b.len()],
        });
    }
    if n_perm == 0 {
        return Err(CoreError::Usage("permutation test needs n_perm >= 1".into()));
    }
    let diffs: Vec<f64> = series_a
        .iter()
        .zip(series_b)
        .map(|(a, b)| a - b)
        .collect();
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut at_least = 0usize;
    for _ in 0..n_perm {
        let stat: f64 = diffs
            .iter()
            .map(|d| if rng.gen::<bool>() { *d } else { -*d })
            .sum::<f64>()
            / n;
        if stat.abs() >= observed {
            at_least += 1;
        }
    }
    Ok((1 + at_least) as f64 / (1 + n_perm) as f64)
}

/// Pairwise Pearson correlations between models' flattened predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub m: usize,
    /// Row-major `m x m` coefficients; flagged entries are reported as 0.
    pub values: Vec<f64>,
    /// Pairs whose correlation was undefined (a constant-prediction model).
    pub flagged: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    /// Mean of the off-diagonal upper triangle over non-flagged pairs.
    pub fn mean_offdiagonal(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..self.m {
            for j in (i + 1)..self.m {
                if !self.flagged.contains(&(i, j)) {
                    sum += self.get(i, j);
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va.sqrt() * vb.sqrt()))
    }
}

/// Pearson correlation over all `(sequence, step)` predictions per model
/// pair. The diagonal is 1 by definition; a pair involving a
/// constant-prediction model is flagged and reported as 0 with a warning.
pub fn prediction_correlation(models: &[Vec<Vec<f64>>]) -> Result<CorrelationMatrix> {
    let m = models.len();
    if m == 0 {
        return Err(CoreError::Usage("correlation needs at least one model".into()));
    }
    let flat: Vec<Vec<f64>> = models
        .iter()
        .map(|rows| rows.iter().flatten().copied().collect())
        .collect();
    let len = flat[0].len();
    if flat.iter().any(|f| f.len() != len) || len == 0 {
        return Err(CoreError::Usage(
            "models must share the same non-empty prediction grid".into(),
        ));
    }
    let mut values = vec![0.0; m * m];
    let mut flagged = Vec::new();
    let mut warnings = Vec::new();
    for i in 0..m {
        values[i * m + i] = 1.0;
        for j in (i + 1)..m {
            match pearson(&flat[i], &flat[j]) {
                Some(r) => {
                    values[i * m + j] = r;
                    values[j * m + i] = r;
                }
                None => {
                    flagged.push((i, j));
                    warnings.push(format!(
                        "correlation between models {i} and {j} undefined \
                         (constant predictions); reported as 0"
                    ));
                }
            }
        }
    }
    Ok(CorrelationMatrix {
        m,
        values,
        flagged,
        warnings,
    })
}
