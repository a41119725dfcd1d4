//! Ranked lists, the currency passed between stages.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// One scored item in a ranked list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub score: f32,
}

impl ScoredItem {
    pub fn new(id: impl Into<String>, score: f32) -> Self {
        Self {
            id: id.into(),
            score,
        }
    }
}

/// Descending score, then ascending id.
pub fn score_desc_id_asc(a_score: f32, a_id: &str, b_score: f32, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// Ordered, duplicate-free list of scored items for one query.
///
/// Construction does not re-sort: stages that define their own tie-break
/// (reranking preserves the previous order) build the list in final order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<ScoredItem>,
}

impl RankedList {
    pub fn new(query_id: impl Into<String>, entries: Vec<ScoredItem>) -> Self {
        Self {
            query_id: query_id.into(),
            entries,
        }
    }

    /// Builds a list sorted by score descending with ascending-id tie-break.
    pub fn sorted(query_id: impl Into<String>, mut entries: Vec<ScoredItem>) -> Self {
        entries.sort_by(|a, b| score_desc_id_asc(a.score, &a.id, b.score, &b.id));
        Self::new(query_id, entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    /// True when no id appears twice.
    pub fn is_duplicate_free(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.entries.len());
        self.entries.iter().all(|e| seen.insert(e.id.as_str()))
    }

    /// True when scores are non-increasing.
    pub fn is_score_sorted(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].score >= w[1].score)
    }
}
