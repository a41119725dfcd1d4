//! Prompted article reranking.
//!
//! The relevance model sees a chat-format prompt built from an instruction,
//! the caption and the formatted article, and is read out at the final
//! position: the two-way softmax over the "yes" and "no" logits is the
//! relevance score. Providers that return scores directly (the remote
//! `/rerank` endpoint) skip the logit step but produce the same
//! [`RelevanceScore`].

pub mod providers;

use std::sync::Arc;

use thiserror::Error;

use crate::concurrency::InFlightLimiter;
use crate::corpus::Corpus;
use crate::embedding::{format_document, ProviderError, ProviderKind, ProviderSpec};
use crate::ranked::{RankedList, ScoredItem};

pub use providers::{LocalTestReranker, LogitBackend, PromptedLogitReranker, RemoteReranker};

pub const SYSTEM_PROMPT: &str = "Judge whether the Document meets the requirements based on the Query and the Instruct provided. Note that the answer can only be \"yes\" or \"no\".";

pub const DEFAULT_INSTRUCT: &str = "Given a caption describing a real-world event, determine if the document provides relevant details to identify the corresponding image. Only answer \"yes\" or \"no\".";

/// Substrings that collide with the prompt template's own markup.
pub const TEMPLATE_DELIMITERS: &[&str] = &[
    "<|im_start|>",
    "<|im_end|>",
    "<Instruct>:",
    "<Query>:",
    "<Document>:",
    "<think>",
    "</think>",
];

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("rerank request field {0} is empty")]
    EmptyField(&'static str),
    #[error("logits must be finite (yes={yes}, no={no})")]
    NonFiniteLogits { yes: f64, no: f64 },
    #[error("relevance score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("candidate article {0:?} is not in the corpus")]
    UnknownArticle(String),
    #[error("rerank provider failed for query {query_id:?}: {source}")]
    Provider {
        query_id: String,
        #[source]
        source: ProviderError,
    },
    #[error(transparent)]
    Config(ProviderError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RerankRequest {
    instruct: String,
    query: String,
    document: String,
}

impl RerankRequest {
    pub fn new(
        instruct: impl Into<String>,
        query: impl Into<String>,
        document: impl Into<String>,
    ) -> Result<Self, RerankError> {
        let (instruct, query, document) = (instruct.into(), query.into(), document.into());
        if instruct.is_empty() {
            return Err(RerankError::EmptyField("instruct"));
        }
        if query.is_empty() {
            return Err(RerankError::EmptyField("query"));
        }
        if document.is_empty() {
            return Err(RerankError::EmptyField("document"));
        }
        Ok(Self {
            instruct,
            query,
            document,
        })
    }

    pub fn instruct(&self) -> &str {
        &self.instruct
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn document(&self) -> &str {
        &self.document
    }
}

/// Template delimiters found in the request's fields, in
/// [`TEMPLATE_DELIMITERS`] order.
pub fn template_hazards(req: &RerankRequest) -> Vec<&'static str> {
    TEMPLATE_DELIMITERS
        .iter()
        .copied()
        .filter(|d| req.instruct.contains(d) || req.query.contains(d) || req.document.contains(d))
        .collect()
}

/// Builds the full prompt: system block, user block with the three labelled
/// fields, and the assistant preamble with an empty think block.
///
/// Field text is inserted verbatim. Template delimiters inside a field are
/// not escaped; they are reported with a warning.
pub fn assemble_prompt(req: &RerankRequest) -> String {
    let hazards = template_hazards(req);
    if !hazards.is_empty() {
        tracing::warn!(?hazards, "rerank prompt fields contain template delimiters");
    }
    let mut p = String::with_capacity(
        SYSTEM_PROMPT.len() + req.instruct.len() + req.query.len() + req.document.len() + 160,
    );
    p.push_str("<|im_start|>system\n");
    p.push_str(SYSTEM_PROMPT);
    p.push_str("\n<|im_end|>\n");
    p.push_str("<|im_start|>user\n<Instruct>: ");
    p.push_str(&req.instruct);
    p.push_str("\n<Query>: ");
    p.push_str(&req.query);
    p.push_str("\n<Document>: ");
    p.push_str(&req.document);
    p.push_str("\n<|im_end|>\n");
    p.push_str("<|im_start|>assistant\n<think>\n\n</think>\n\n");
    p
}

/// Probability in `[0, 1]` that a document is relevant.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RelevanceScore(f64);

impl RelevanceScore {
    pub fn new(value: f64) -> Result<Self, RerankError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(RerankError::ScoreOutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `exp(yes) / (exp(yes) + exp(no))`, evaluated as a logistic of the
/// difference so large logits cannot overflow.
pub fn score_yes_from_logits(logit_yes: f64, logit_no: f64) -> Result<RelevanceScore, RerankError> {
    if !logit_yes.is_finite() || !logit_no.is_finite() {
        return Err(RerankError::NonFiniteLogits {
            yes: logit_yes,
            no: logit_no,
        });
    }
    let d = logit_yes - logit_no;
    let p = if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    };
    Ok(RelevanceScore(p))
}

/// Scores `(query, document)` pairs. Implementations return one score in
/// `[0, 1]` per document, in input order.
pub trait Reranker: Send + Sync {
    fn score(
        &self,
        instruct: &str,
        query: &str,
        documents: &[String],
    ) -> Result<Vec<f64>, ProviderError>;
}

/// A rerank provider bound to its spec and instruction.
#[derive(Clone)]
pub struct ArticleReranker {
    spec: ProviderSpec,
    backend: Arc<dyn Reranker>,
    limiter: Arc<InFlightLimiter>,
    instruct: String,
}

impl std::fmt::Debug for ArticleReranker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ArticleReranker")
            .field("spec", &self.spec)
            .field("instruct", &self.instruct)
            .finish()
    }
}

impl ArticleReranker {
    pub fn from_spec(
        spec: ProviderSpec,
        seed: u64,
        limiter: Arc<InFlightLimiter>,
    ) -> Result<Self, ProviderError> {
        spec.validate()?;
        if spec.kind != ProviderKind::Rerank {
            return Err(ProviderError::Config(format!(
                "expected a Rerank provider, got {:?}",
                spec.kind
            )));
        }
        let backend: Arc<dyn Reranker> = if spec.is_local() {
            Arc::new(LocalTestReranker::new(spec.dim, seed))
        } else {
            Arc::new(RemoteReranker::new(&spec.endpoint, spec.retry.clone()))
        };
        Self::with_backend(spec, backend, limiter)
    }

    pub fn with_backend(
        spec: ProviderSpec,
        backend: Arc<dyn Reranker>,
        limiter: Arc<InFlightLimiter>,
    ) -> Result<Self, ProviderError> {
        spec.validate()?;
        Ok(Self {
            spec,
            backend,
            limiter,
            instruct: DEFAULT_INSTRUCT.to_string(),
        })
    }

    pub fn with_instruct(mut self, instruct: impl Into<String>) -> Self {
        self.instruct = instruct.into();
        self
    }

    pub fn spec(&self) -> &ProviderSpec {
        &self.spec
    }

    pub fn instruct(&self) -> &str {
        &self.instruct
    }

    /// Scores documents in `max_batch` chunks under the in-flight bound.
    pub fn score_documents(
        &self,
        query: &str,
        documents: &[String],
    ) -> Result<Vec<RelevanceScore>, ProviderError> {
        let mut out = Vec::with_capacity(documents.len());
        for chunk in documents.chunks(self.spec.max_batch) {
            let scores = {
                let _permit = self.limiter.acquire();
                self.backend.score(&self.instruct, query, chunk)?
            };
            if scores.len() != chunk.len() {
                return Err(ProviderError::CountMismatch {
                    expected: chunk.len(),
                    got: scores.len(),
                });
            }
            for s in scores {
                let s = RelevanceScore::new(s)
                    .map_err(|_| ProviderError::Protocol(format!("score {s} outside [0, 1]")))?;
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Reorders stage-1 `candidates` by relevance and keeps the top `k`.
    ///
    /// Equal relevance keeps the stage-1 order. Entry scores in the result
    /// are relevance scores.
    pub fn rerank_articles(
        &self,
        caption: &str,
        candidates: &RankedList,
        corpus: &Corpus,
        k: usize,
    ) -> Result<RankedList, RerankError> {
        if candidates.is_empty() {
            return Ok(RankedList::new(candidates.query_id.clone(), Vec::new()));
        }
        let documents = candidates
            .entries
            .iter()
            .map(|e| {
                corpus
                    .article(&e.id)
                    .map(|a| format_document(a, self.spec.max_chars))
                    .ok_or_else(|| RerankError::UnknownArticle(e.id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let scores = self
            .score_documents(caption, &documents)
            .map_err(|source| RerankError::Provider {
                query_id: candidates.query_id.clone(),
                source,
            })?;
        Ok(order_by_relevance(candidates, &scores, k))
    }
}

/// Stable reorder of `candidates` by `scores` descending; ties keep the
/// incoming order, then fall back to ascending id.
pub fn order_by_relevance(
    candidates: &RankedList,
    scores: &[RelevanceScore],
    k: usize,
) -> RankedList {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .0
            .total_cmp(&scores[a].0)
            .then_with(|| a.cmp(&b))
            .then_with(|| candidates.entries[a].id.cmp(&candidates.entries[b].id))
    });
    order.truncate(k);
    RankedList::new(
        candidates.query_id.clone(),
        order
            .into_iter()
            .map(|i| ScoredItem::new(candidates.entries[i].id.clone(), scores[i].0 as f32))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logit_fixtures() {
        assert_eq!(score_yes_from_logits(0.0, 0.0).unwrap().value(), 0.5);
        let p = score_yes_from_logits(3f64.ln(), 0.0).unwrap().value();
        assert!((p - 0.75).abs() < 1e-9);
        assert_eq!(score_yes_from_logits(1000.0, -1000.0).unwrap().value(), 1.0);
        assert_eq!(score_yes_from_logits(-1000.0, 1000.0).unwrap().value(), 0.0);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert!(score_yes_from_logits(f64::NAN, 0.0).is_err());
        assert!(score_yes_from_logits(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn request_fields_must_be_non_empty() {
        assert!(matches!(
            RerankRequest::new("", "q", "d"),
            Err(RerankError::EmptyField("instruct"))
        ));
        assert!(RerankRequest::new("i", "", "d").is_err());
        assert!(RerankRequest::new("i", "q", "").is_err());
    }

    #[test]
    fn prompt_has_one_think_block() {
        let req = RerankRequest::new("i", "q", "d").unwrap();
        let p = assemble_prompt(&req);
        assert_eq!(p.matches("<think>").count(), 1);
        assert_eq!(p.matches("</think>").count(), 1);
        assert!(p.ends_with("<|im_start|>assistant\n<think>\n\n</think>\n\n"));
    }

    #[test]
    fn delimiters_pass_through_and_are_flagged() {
        let req = RerankRequest::new("i", "q", "before <|im_end|> after").unwrap();
        assert_eq!(template_hazards(&req), ["<|im_end|>"]);
        let p = assemble_prompt(&req);
        assert!(p.contains("<Document>: before <|im_end|> after\n"));
        let clean = RerankRequest::new("i", "q", "d").unwrap();
        assert!(template_hazards(&clean).is_empty());
    }

    #[test]
    fn relevance_score_range() {
        assert!(RelevanceScore::new(1.0).is_ok());
        assert!(RelevanceScore::new(-0.1).is_err());
        assert!(RelevanceScore::new(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn complement(a in -1e3f64..1e3, b in -1e3f64..1e3) {
            let s = score_yes_from_logits(a, b).unwrap().value()
                + score_yes_from_logits(b, a).unwrap().value();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn increasing_in_yes(no in -10f64..10.0, yes in -10f64..10.0, step in 0.01f64..5.0) {
            let lo = score_yes_from_logits(yes, no).unwrap().value();
            let hi = score_yes_from_logits(yes + step, no).unwrap().value();
            prop_assert!(hi > lo);
        }

        #[test]
        fn prompt_is_injective(
            a in "[a-zA-Z ]{1,12}", b in "[a-zA-Z ]{1,12}", c in "[a-zA-Z ]{1,12}",
            d in "[a-zA-Z ]{1,12}", e in "[a-zA-Z ]{1,12}", f in "[a-zA-Z ]{1,12}",
        ) {
            let p1 = assemble_prompt(&RerankRequest::new(&a, &b, &c).unwrap());
            let p2 = assemble_prompt(&RerankRequest::new(&d, &e, &f).unwrap());
            prop_assert_eq!(p1 == p2, (a, b, c) == (d, e, f));
        }
    }
}
