//! Retrieval metrics over submissions.
//!
//! Every query has exactly one relevant article and one relevant image.
//! Ranks count non-pad entries only, and a relevant id missing from a row
//! contributes zero. With one relevant item, average precision for a query
//! is `1 / rank`, so mAP and MRR coincide; both are still computed along
//! their own definitions.

pub mod weights;

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::submission::SubmissionTable;

pub use weights::{fit_overall_weights, OverallWeights, WeightFit, PUBLISHED_ROWS};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("query {0:?} has no ground truth")]
    MissingTruth(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("weights must be non-negative and sum to 1 (sum = {0})")]
    InvalidWeights(f64),
    #[error("duplicate ground-truth query {0:?}")]
    DuplicateQuery(String),
    #[error("ground truth line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub article_id: String,
    pub image_id: String,
}

/// Which relevant id a submission is judged against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Article,
    Image,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    entries: HashMap<String, TruthEntry>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        query_id: impl Into<String>,
        article_id: impl Into<String>,
        image_id: impl Into<String>,
    ) -> Result<(), MetricsError> {
        let query_id = query_id.into();
        if self.entries.contains_key(&query_id) {
            return Err(MetricsError::DuplicateQuery(query_id));
        }
        self.entries.insert(
            query_id,
            TruthEntry {
                article_id: article_id.into(),
                image_id: image_id.into(),
            },
        );
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&TruthEntry> {
        self.entries.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn relevant(&self, query_id: &str, task: Task) -> Result<&str, MetricsError> {
        let e = self
            .get(query_id)
            .ok_or_else(|| MetricsError::MissingTruth(query_id.to_string()))?;
        Ok(match task {
            Task::Article => &e.article_id,
            Task::Image => &e.image_id,
        })
    }

    /// CSV `query_id,article_id,image_id`; a header row with those names is
    /// optional.
    pub fn read_csv(input: impl Read) -> Result<Self, MetricsError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(input);
        let mut gt = Self::new();
        for (idx, rec) in r.records().enumerate() {
            let line = idx + 1;
            let rec = rec.map_err(|e| MetricsError::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.len() != 3 {
                return Err(MetricsError::Parse {
                    line,
                    message: format!("expected 3 columns, found {}", rec.len()),
                });
            }
            if line == 1 && &rec[0] == "query_id" {
                continue;
            }
            gt.insert(&rec[0], &rec[1], &rec[2])?;
        }
        Ok(gt)
    }

    /// Writes CSV with a header row, queries sorted by id.
    pub fn write_csv(&self, out: impl std::io::Write) -> std::io::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["query_id", "article_id", "image_id"])?;
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        for k in keys {
            let e = &self.entries[k];
            w.write_record([k.as_str(), &e.article_id, &e.image_id])?;
        }
        w.flush()
    }
}

/// 1-based position of the relevant id, if present.
fn relevant_rank(row: &[String], relevant: &str) -> Option<usize> {
    row.iter().position(|id| id == relevant).map(|p| p + 1)
}

fn mean_over_queries(
    sub: &SubmissionTable,
    truth: &GroundTruth,
    task: Task,
    per_query: impl Fn(&[String], &str) -> f64,
) -> Result<f64, MetricsError> {
    if sub.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for row in sub.rows() {
        let rel = truth.relevant(&row.query_id, task)?;
        total += per_query(&row.ids, rel);
    }
    Ok(total / sub.len() as f64)
}

/// Fraction of queries whose relevant id is within the top `k`.
pub fn recall_at_k(
    sub: &SubmissionTable,
    truth: &GroundTruth,
    task: Task,
    k: usize,
) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    mean_over_queries(sub, truth, task, |row, rel| {
        if row.iter().take(k).any(|id| id == rel) {
            1.0
        } else {
            0.0
        }
    })
}

pub fn mrr(sub: &SubmissionTable, truth: &GroundTruth, task: Task) -> Result<f64, MetricsError> {
    mean_over_queries(sub, truth, task, |row, rel| {
        relevant_rank(row, rel).map_or(0.0, |r| 1.0 / r as f64)
    })
}

/// Mean average precision with one relevant item per query: precision is
/// accumulated at each relevant position and divided by the number of
/// relevant items.
pub fn map_single_relevant(
    sub: &SubmissionTable,
    truth: &GroundTruth,
    task: Task,
) -> Result<f64, MetricsError> {
    mean_over_queries(sub, truth, task, |row, rel| {
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (i, id) in row.iter().enumerate() {
            if id == rel {
                hits += 1;
                precision_sum += hits as f64 / (i + 1) as f64;
            }
        }
        let relevant_count = 1.0;
        precision_sum / relevant_count
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub map_score: f64,
    pub mrr: f64,
    pub overall: Option<f64>,
    pub queries: usize,
}

impl MetricReport {
    /// Value of a named metric: `mAP`, `MRR` or `R@k`.
    pub fn metric(&self, name: &str) -> Result<f64, MetricsError> {
        match name {
            "mAP" => Ok(self.map_score),
            "MRR" => Ok(self.mrr),
            _ => name
                .strip_prefix("R@")
                .and_then(|k| k.parse::<usize>().ok())
                .and_then(|k| self.recall_at.get(&k).copied())
                .ok_or_else(|| MetricsError::UnknownMetric(name.to_string())),
        }
    }

    /// Plain-text table.
    pub fn to_table(&self) -> String {
        let mut header = vec!["mAP".to_string(), "MRR".to_string()];
        let mut values = vec![self.map_score, self.mrr];
        for (k, v) in &self.recall_at {
            header.push(format!("R@{k}"));
            values.push(*v);
        }
        if let Some(o) = self.overall {
            header.push("Overall".into());
            values.push(o);
        }
        let cells: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
        let widths: Vec<usize> = header
            .iter()
            .zip(&cells)
            .map(|(h, c)| h.len().max(c.len()))
            .collect();
        let line = |items: &[String]| {
            items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        format!(
            "{}\n{}\n{}\nqueries: {}\n",
            line(&header),
            widths
                .iter()
                .map(|w| "-".repeat(*w))
                .collect::<Vec<_>>()
                .join("-+-"),
            line(&cells),
            self.queries
        )
    }
}

/// Weighted sum of named metrics.
pub fn overall_score(report: &MetricReport, weights: &OverallWeights) -> Result<f64, MetricsError> {
    weights.validate()?;
    weights
        .iter()
        .map(|(name, w)| report.metric(name).map(|v| w * v))
        .sum()
}

pub const DEFAULT_RECALL_KS: [usize; 3] = [1, 5, 10];

/// Computes every metric; `overall` is filled when weights are given.
pub fn evaluate(
    sub: &SubmissionTable,
    truth: &GroundTruth,
    task: Task,
    ks: &[usize],
    weights: Option<&OverallWeights>,
) -> Result<MetricReport, MetricsError> {
    let mut recall_at = BTreeMap::new();
    for &k in ks {
        recall_at.insert(k, recall_at_k(sub, truth, task, k)?);
    }
    let mut report = MetricReport {
        recall_at,
        map_score: map_single_relevant(sub, truth, task)?,
        mrr: mrr(sub, truth, task)?,
        overall: None,
        queries: sub.len(),
    };
    if let Some(w) = weights {
        report.overall = Some(overall_score(&report, w)?);
    }
    Ok(report)
}
