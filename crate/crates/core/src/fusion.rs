//! Reciprocal Rank Fusion over submission runs.
//!
//! Each id scores `Σ 1 / (k + rank)` over the runs that contain it, with
//! 1-based ranks. Fused lists are sorted by score descending with ascending
//! id as the tie-break, truncated and padded to the output length.
//!
//! ```
//! use event_retriever::fusion::rrf_scores_for_lists;
//!
//! let a = vec!["x".to_string(), "g".to_string()];
//! let b = vec!["y".to_string(), "g".to_string()];
//! let fused = rrf_scores_for_lists(&[&a[..], &b[..]], 60.0).unwrap();
//! assert_eq!(fused[0].0, "g"); // 2/62 beats 1/61
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};

use thiserror::Error;

use crate::submission::{SubmissionError, SubmissionTable};

pub const DEFAULT_RRF_K: f64 = 60.0;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no runs to fuse")]
    NoRuns,
    #[error("rrf_k must be positive and finite, got {0}")]
    InvalidK(f64),
    #[error("query {query_id:?} is missing from run {run}")]
    MissingQuery { query_id: String, run: usize },
    #[error("run {run} lists {id:?} twice for query {query_id:?}")]
    DuplicateId {
        run: usize,
        query_id: String,
        id: String,
    },
    #[error(transparent)]
    Submission(#[from] SubmissionError),
}

/// Runs to fuse plus the smoothing constant.
#[derive(Debug, Clone)]
pub struct RunSet {
    runs: Vec<SubmissionTable>,
    rrf_k: f64,
}

impl RunSet {
    /// Every run must cover the same query ids.
    pub fn new(runs: Vec<SubmissionTable>, rrf_k: f64) -> Result<Self, FusionError> {
        if !(rrf_k > 0.0 && rrf_k.is_finite()) {
            return Err(FusionError::InvalidK(rrf_k));
        }
        let Some(first) = runs.first() else {
            return Err(FusionError::NoRuns);
        };
        let first_ids: BTreeSet<&str> = first.query_ids().collect();
        for (run, table) in runs.iter().enumerate().skip(1) {
            let ids: BTreeSet<&str> = table.query_ids().collect();
            if let Some(q) = first_ids.difference(&ids).next() {
                return Err(FusionError::MissingQuery {
                    query_id: q.to_string(),
                    run,
                });
            }
            if let Some(q) = ids.difference(&first_ids).next() {
                return Err(FusionError::MissingQuery {
                    query_id: q.to_string(),
                    run: 0,
                });
            }
        }
        Ok(Self { runs, rrf_k })
    }

    pub fn rrf_k(&self) -> f64 {
        self.rrf_k
    }

    pub fn runs(&self) -> &[SubmissionTable] {
        &self.runs
    }

    /// Fused `(id, score)` pairs for one query, best first.
    pub fn scores(&self, query_id: &str) -> Result<Vec<(String, f64)>, FusionError> {
        let mut lists = Vec::with_capacity(self.runs.len());
        for (run, table) in self.runs.iter().enumerate() {
            let row = table
                .row(query_id)
                .ok_or_else(|| FusionError::MissingQuery {
                    query_id: query_id.to_string(),
                    run,
                })?;
            lists.push(row);
        }
        rrf_scores_for_lists(&lists, self.rrf_k).map_err(|(run, id)| FusionError::DuplicateId {
            run,
            query_id: query_id.to_string(),
            id,
        })
    }
}

/// RRF over plain ranked lists. Errors with `(list index, id)` when a list
/// repeats an id.
///
/// Each id's reciprocal ranks are summed smallest rank first, so the result
/// does not depend on list order.
pub fn rrf_scores_for_lists(
    lists: &[&[String]],
    rrf_k: f64,
) -> Result<Vec<(String, f64)>, (usize, String)> {
    let mut ranks: HashMap<&str, Vec<usize>> = HashMap::new();
    for (li, list) in lists.iter().enumerate() {
        let mut seen = HashSet::with_capacity(list.len());
        for (pos, id) in list.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err((li, id.clone()));
            }
            ranks.entry(id.as_str()).or_default().push(pos + 1);
        }
    }
    let mut scored: Vec<(String, f64)> = ranks
        .into_iter()
        .map(|(id, mut rs)| {
            rs.sort_unstable();
            let score = rs.iter().map(|&r| 1.0 / (rrf_k + r as f64)).sum();
            (id.to_string(), score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}

/// Fused ids for one query, padded to `output_len`.
pub fn rrf_fuse(
    runset: &RunSet,
    query_id: &str,
    output_len: usize,
    pad_token: &str,
) -> Result<Vec<String>, FusionError> {
    let mut ids: Vec<String> = runset
        .scores(query_id)?
        .into_iter()
        .take(output_len)
        .map(|(id, _)| id)
        .collect();
    ids.resize(output_len, pad_token.to_string());
    Ok(ids)
}

/// Fuses whole submissions. Rows come out sorted by query id; the pad token
/// is taken from the first run.
pub fn fuse_submissions(
    runs: Vec<SubmissionTable>,
    rrf_k: f64,
    output_len: usize,
) -> Result<SubmissionTable, FusionError> {
    let pad = runs
        .first()
        .map(|r| r.pad_token().to_string())
        .ok_or(FusionError::NoRuns)?;
    let runset = RunSet::new(runs, rrf_k)?;
    let mut query_ids: Vec<&str> = runset.runs[0].query_ids().collect();
    query_ids.sort_unstable();
    let mut out = SubmissionTable::new(output_len, pad.clone())?;
    for q in query_ids {
        let ids = rrf_fuse(&runset, q, output_len, &pad)?;
        out.push_row(q, ids)?;
    }
    Ok(out)
}
