//! Weights for the overall score.
//!
//! The challenge leaderboard reports an "overall" column without publishing
//! its formula. Weights are therefore configuration. The default comes from
//! fitting published leaderboard rows by least squares on the probability
//! simplex (non-negative weights summing to one); it is an approximation,
//! with the fit error recorded in [`DEFAULT_FIT_RMSE`].

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Metric columns, in the order used by [`PUBLISHED_ROWS`].
pub const METRIC_NAMES: [&str; 5] = ["mAP", "MRR", "R@1", "R@5", "R@10"];

/// Published leaderboard rows: label, `[mAP, MRR, R@1, R@5, R@10]`, overall.
pub const PUBLISHED_ROWS: &[(&str, [f64; 5], f64)] = &[
    // public test leaderboard
    (
        "Sharingan Retrievers",
        [0.559, 0.559, 0.454, 0.702, 0.760],
        0.5727,
    ),
    (
        "23trinitrotolue",
        [0.539, 0.539, 0.448, 0.666, 0.704],
        0.5516,
    ),
    (
        "Qwen3-8B pipeline",
        [0.525, 0.525, 0.426, 0.657, 0.720],
        0.5378,
    ),
    (
        "Qwen3-4B pipeline",
        [0.507, 0.507, 0.410, 0.639, 0.696],
        0.5200,
    ),
    (
        "Re: Zero Slavery",
        [0.489, 0.489, 0.380, 0.643, 0.697],
        0.5005,
    ),
    ("chisboiz111", [0.489, 0.489, 0.380, 0.643, 0.697], 0.5005),
    (
        "BGE-m3 pipeline",
        [0.420, 0.420, 0.331, 0.533, 0.610],
        0.4311,
    ),
    // private test leaderboard
    ("RRF ensemble", [0.563, 0.563, 0.469, 0.690, 0.744], 0.5766),
    (
        "23trinitrotolue (private)",
        [0.558, 0.558, 0.456, 0.698, 0.762],
        0.5722,
    ),
    (
        "Qwen3-8B pipeline (private)",
        [0.552, 0.552, 0.445, 0.675, 0.733],
        0.5712,
    ),
    (
        "Qwen3-4B pipeline (private)",
        [0.546, 0.546, 0.438, 0.669, 0.728],
        0.5672,
    ),
    ("LastSong", [0.549, 0.549, 0.449, 0.695, 0.738], 0.5635),
];

/// Simplex least-squares fit of [`PUBLISHED_ROWS`], `METRIC_NAMES` order.
pub const DEFAULT_WEIGHTS: [f64; 5] = [
    0.927_017_180_209_239,
    0.0,
    0.0,
    0.0,
    0.072_982_819_790_761_82,
];

/// Root-mean-square residual of [`DEFAULT_WEIGHTS`] over the published rows.
pub const DEFAULT_FIT_RMSE: f64 = 0.003_395_635_398_748_383;

/// Metric name to weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OverallWeights(BTreeMap<String, f64>);

impl OverallWeights {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        Self(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    /// Equal weight on each of the five leaderboard metrics.
    pub fn uniform() -> Self {
        Self::from_pairs(METRIC_NAMES.iter().map(|&n| (n, 0.2)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let sum: f64 = self.0.values().sum();
        if self.0.values().any(|w| w.is_nan() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(MetricsError::InvalidWeights(sum));
        }
        Ok(())
    }

    /// Weighted sum over a row of `METRIC_NAMES`-ordered values.
    pub fn apply(&self, values: &[f64; 5]) -> Result<f64, MetricsError> {
        self.validate()?;
        self.iter()
            .map(|(name, w)| {
                METRIC_NAMES
                    .iter()
                    .position(|n| *n == name)
                    .map(|i| w * values[i])
                    .ok_or_else(|| MetricsError::UnknownMetric(name.to_string()))
            })
            .sum()
    }
}

impl Default for OverallWeights {
    fn default() -> Self {
        Self::from_pairs(
            METRIC_NAMES
                .iter()
                .zip(DEFAULT_WEIGHTS)
                .filter(|(_, w)| *w > 0.0)
                .map(|(n, w)| (*n, w)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    /// `METRIC_NAMES` order.
    pub weights: [f64; 5],
    /// Predicted minus published overall, per row.
    pub residuals: Vec<f64>,
    pub rmse: f64,
}

impl WeightFit {
    pub fn to_weights(&self) -> OverallWeights {
        OverallWeights::from_pairs(
            METRIC_NAMES
                .iter()
                .zip(self.weights)
                .filter(|(_, w)| *w > 0.0)
                .map(|(n, w)| (*n, w)),
        )
    }
}

/// Least squares over the simplex `{w >= 0, Σw = 1}`.
///
/// The optimum lies on some face of the simplex, and on that face it is the
/// equality-constrained least-squares solution. Every face is tried (31 for
/// five metrics); among feasible solutions the smallest residual wins, the
/// smallest face on ties. Collinear columns (mAP and MRR) are handled with a
/// pseudo-inverse.
pub fn fit_overall_weights(rows: &[([f64; 5], f64)]) -> WeightFit {
    let n = METRIC_NAMES.len();
    let mut best: Option<([f64; 5], f64)> = None;
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by_key(|s| (s.len(), s.clone()));
    for subset in subsets {
        let Some(w) = solve_on_face(rows, &subset) else {
            continue;
        };
        let sse = sum_squared_error(rows, &w);
        if best.is_none_or(|(_, b)| sse < b - 1e-15) {
            best = Some((w, sse));
        }
    }
    let (weights, sse) = best.expect("single-metric faces are always feasible");
    let residuals = rows
        .iter()
        .map(|(x, y)| dot5(&weights, x) - y)
        .collect::<Vec<_>>();
    WeightFit {
        weights,
        residuals,
        rmse: (sse / rows.len().max(1) as f64).sqrt(),
    }
}

pub fn published_rows() -> Vec<([f64; 5], f64)> {
    PUBLISHED_ROWS.iter().map(|(_, x, y)| (*x, *y)).collect()
}

fn dot5(w: &[f64; 5], x: &[f64; 5]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn sum_squared_error(rows: &[([f64; 5], f64)], w: &[f64; 5]) -> f64 {
    rows.iter().map(|(x, y)| (dot5(w, x) - y).powi(2)).sum()
}

/// Minimizes `|A_S w - y|²` subject to `Σw = 1` on the columns in `subset`
/// via the KKT system; `None` when the solution leaves the simplex.
fn solve_on_face(rows: &[([f64; 5], f64)], subset: &[usize]) -> Option<[f64; 5]> {
    let m = subset.len();
    let a = DMatrix::from_fn(rows.len(), m, |r, c| rows[r].0[subset[c]]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let ata = a.transpose() * &a;
    let aty = a.transpose() * y;
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    kkt.view_mut((0, 0), (m, m)).copy_from(&(ata * 2.0));
    for i in 0..m {
        kkt[(i, m)] = 1.0;
        kkt[(m, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(m + 1);
    rhs.rows_mut(0, m).copy_from(&(aty * 2.0));
    rhs[m] = 1.0;
    let sol = kkt.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let mut w = [0.0; 5];
    for (c, &col) in subset.iter().enumerate() {
        if sol[c] < -1e-12 {
            return None;
        }
        w[col] = sol[c].max(0.0);
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return None;
    }
    Some(w)
}
