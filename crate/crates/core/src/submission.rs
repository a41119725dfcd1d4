//! Submission tables and staged intermediate artifacts.
//!
//! A submission is CSV with no header, one row per query:
//! `query_id,id1,...,idN`, where `N` is the fixed output length and unused
//! trailing slots hold the pad token (`#` by default). In memory, rows keep
//! only the non-pad ids.
//!
//! Intermediate stage output is JSONL:
//! `{"query_id": "...", "stage": "articles"|"candidates", "items": [{"id": "...", "score": 0.9, "article_rank": 1}]}`.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_stage::{CandidateImage, DEFAULT_PAD_TOKEN};
use crate::ranked::{RankedList, ScoredItem};

#[derive(Debug, Error)]
pub enum SubmissionError {
    #[error("duplicate query id {0:?}")]
    DuplicateQuery(String),
    #[error("query {query_id:?} lists {id:?} more than once")]
    DuplicateId { query_id: String, id: String },
    #[error("query {0:?} has an id after a pad entry")]
    PadNotSuffix(String),
    #[error("query {query_id:?} has {got} ids, output length is {output_len}")]
    RowTooLong {
        query_id: String,
        got: usize,
        output_len: usize,
    },
    #[error("line {line}: expected {expected} columns, found {got}")]
    InconsistentWidth {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("output length must be at least 1")]
    ZeroLength,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmissionRow {
    pub query_id: String,
    /// Non-pad ids in rank order.
    pub ids: Vec<String>,
}

/// Per-query fixed-length ranked id lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmissionTable {
    output_len: usize,
    pad_token: String,
    rows: Vec<SubmissionRow>,
    index: HashMap<String, usize>,
}

impl SubmissionTable {
    pub fn new(output_len: usize, pad_token: impl Into<String>) -> Result<Self, SubmissionError> {
        if output_len == 0 {
            return Err(SubmissionError::ZeroLength);
        }
        Ok(Self {
            output_len,
            pad_token: pad_token.into(),
            rows: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn pad_token(&self) -> &str {
        &self.pad_token
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[SubmissionRow] {
        &self.rows
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|r| r.query_id.as_str())
    }

    pub fn row(&self, query_id: &str) -> Option<&[String]> {
        self.index
            .get(query_id)
            .map(|&i| self.rows[i].ids.as_slice())
    }

    /// Adds a row of ranked ids. Pad tokens are allowed only as a suffix and
    /// are dropped.
    pub fn push_row(
        &mut self,
        query_id: impl Into<String>,
        ids: Vec<String>,
    ) -> Result<(), SubmissionError> {
        let query_id = query_id.into();
        if self.index.contains_key(&query_id) {
            return Err(SubmissionError::DuplicateQuery(query_id));
        }
        let first_pad = ids.iter().position(|id| *id == self.pad_token);
        let mut ids = ids;
        if let Some(p) = first_pad {
            if ids[p..].iter().any(|id| *id != self.pad_token) {
                return Err(SubmissionError::PadNotSuffix(query_id));
            }
            ids.truncate(p);
        }
        if ids.len() > self.output_len {
            return Err(SubmissionError::RowTooLong {
                query_id,
                got: ids.len(),
                output_len: self.output_len,
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(SubmissionError::DuplicateId {
                query_id,
                id: dup.clone(),
            });
        }
        self.index.insert(query_id.clone(), self.rows.len());
        self.rows.push(SubmissionRow { query_id, ids });
        Ok(())
    }

    /// Row ids followed by pads up to `output_len`.
    pub fn padded(&self, query_id: &str) -> Option<Vec<String>> {
        self.row(query_id).map(|ids| {
            let mut out = ids.to_vec();
            out.resize(self.output_len, self.pad_token.clone());
            out
        })
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), SubmissionError> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        for row in &self.rows {
            let mut record = Vec::with_capacity(self.output_len + 1);
            record.push(row.query_id.as_str());
            record.extend(row.ids.iter().map(String::as_str));
            record.extend(std::iter::repeat_n(
                self.pad_token.as_str(),
                self.output_len - row.ids.len(),
            ));
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Parses a headerless submission CSV. The output length is the row
    /// width minus one, or `default_len` for an empty file.
    pub fn read_csv(
        input: impl Read,
        pad_token: &str,
        default_len: usize,
    ) -> Result<Self, SubmissionError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(input);
        let mut table: Option<Self> = None;
        for (idx, rec) in r.records().enumerate() {
            let line = idx + 1;
            let rec = rec.map_err(|e| SubmissionError::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.len() < 2 {
                return Err(SubmissionError::Parse {
                    line,
                    message: "row needs a query id and at least one slot".into(),
                });
            }
            let t = match &mut table {
                Some(t) => t,
                None => table.insert(Self::new(rec.len() - 1, pad_token)?),
            };
            if rec.len() != t.output_len + 1 {
                return Err(SubmissionError::InconsistentWidth {
                    line,
                    expected: t.output_len + 1,
                    got: rec.len(),
                });
            }
            let ids = rec.iter().skip(1).map(str::to_string).collect();
            t.push_row(&rec[0], ids)?;
        }
        match table {
            Some(t) => Ok(t),
            None => Self::new(default_len, pad_token),
        }
    }
}

impl Default for SubmissionTable {
    fn default() -> Self {
        Self::new(10, DEFAULT_PAD_TOKEN).expect("non-zero length")
    }
}

fn csv_err(e: csv::Error) -> SubmissionError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SubmissionError::Io(io),
        other => SubmissionError::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Articles,
    Candidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageItem {
    pub id: String,
    pub score: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub article_rank: Option<usize>,
}

/// One line of an intermediate JSONL artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub query_id: String,
    pub stage: Stage,
    pub items: Vec<StageItem>,
}

impl StageRecord {
    pub fn articles(list: &RankedList) -> Self {
        Self {
            query_id: list.query_id.clone(),
            stage: Stage::Articles,
            items: list
                .entries
                .iter()
                .map(|e| StageItem {
                    id: e.id.clone(),
                    score: e.score,
                    article_rank: None,
                })
                .collect(),
        }
    }

    pub fn candidates(query_id: &str, pool: &[CandidateImage]) -> Self {
        Self {
            query_id: query_id.to_string(),
            stage: Stage::Candidates,
            items: pool
                .iter()
                .map(|c| StageItem {
                    id: c.image_id.clone(),
                    score: c.score,
                    article_rank: Some(c.article_rank),
                })
                .collect(),
        }
    }

    pub fn to_ranked_list(&self) -> RankedList {
        RankedList::new(
            self.query_id.clone(),
            self.items
                .iter()
                .map(|i| ScoredItem::new(i.id.clone(), i.score))
                .collect(),
        )
    }
}

pub fn write_stage_records<'a>(
    records: impl IntoIterator<Item = &'a StageRecord>,
    mut out: impl Write,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_stage_records(input: impl BufRead) -> Result<Vec<StageRecord>, SubmissionError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| SubmissionError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn pads_are_stripped_and_restored() {
        let mut t = SubmissionTable::new(4, "#").unwrap();
        t.push_row("q1", s(&["a", "b", "#", "#"])).unwrap();
        assert_eq!(t.row("q1").unwrap(), ["a", "b"]);
        assert_eq!(t.padded("q1").unwrap(), ["a", "b", "#", "#"]);
        assert_eq!(t.to_csv_string(), "q1,a,b,#,#\n");
    }

    #[test]
    fn row_validation() {
        let mut t = SubmissionTable::new(3, "#").unwrap();
        assert!(matches!(
            t.push_row("q", s(&["a", "#", "b"])),
            Err(SubmissionError::PadNotSuffix(_))
        ));
        assert!(matches!(
            t.push_row("q", s(&["a", "a"])),
            Err(SubmissionError::DuplicateId { .. })
        ));
        assert!(matches!(
            t.push_row("q", s(&["a", "b", "c", "d"])),
            Err(SubmissionError::RowTooLong { .. })
        ));
        t.push_row("q", s(&["a"])).unwrap();
        assert!(matches!(
            t.push_row("q", s(&["b"])),
            Err(SubmissionError::DuplicateQuery(_))
        ));
    }

    #[test]
    fn read_rejects_ragged_rows() {
        let data = "q1,a,b,#\nq2,a,b\n";
        assert!(matches!(
            SubmissionTable::read_csv(data.as_bytes(), "#", 10),
            Err(SubmissionError::InconsistentWidth { line: 2, .. })
        ));
    }

    #[test]
    fn empty_csv_uses_default_len() {
        let t = SubmissionTable::read_csv("".as_bytes(), "#", 10).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.output_len(), 10);
    }

    #[test]
    fn stage_records_round_trip() {
        let rec = StageRecord::candidates(
            "q1",
            &[CandidateImage {
                image_id: "i".into(),
                source_article_id: "a".into(),
                article_rank: 2,
                score: 0.25,
            }],
        );
        let mut buf = Vec::new();
        write_stage_records([&rec], &mut buf).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            line,
            "{\"query_id\":\"q1\",\"stage\":\"candidates\",\"items\":[{\"id\":\"i\",\"score\":0.25,\"article_rank\":2}]}\n"
        );
        assert_eq!(read_stage_records(buf.as_slice()).unwrap(), [rec]);
    }

    proptest! {
        #[test]
        fn csv_round_trip(
            rows in prop::collection::btree_map("[a-z0-9,\" ]{1,6}", prop::collection::hash_set("[a-z0-9_,]{1,5}", 0..6), 0..6)
        ) {
            let mut t = SubmissionTable::new(6, "#").unwrap();
            for (q, ids) in &rows {
                t.push_row(q.clone(), ids.iter().cloned().collect()).unwrap();
            }
            let back = SubmissionTable::read_csv(t.to_csv_string().as_bytes(), "#", 6).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
