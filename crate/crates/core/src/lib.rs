//! Event-centric image retrieval.
//!
//! Given a free-form caption describing a real-world event, the engine finds
//! the news images that depict it in four stages:
//!
//! 1. **Dense article retrieval.** Articles are formatted into a single
//!    document string, embedded, and searched by cosine similarity
//!    ([`index::VectorIndex`]).
//! 2. **Article reranking.** Each candidate is scored by a prompted relevance
//!    provider that answers "yes" or "no" ([`rerank`]).
//! 3. **Image collection and selection.** Images are gathered from the
//!    top-ranked articles with early stopping, scored against the caption
//!    with a cross-modal embedder, then chosen with a per-article cap that
//!    favours higher-ranked articles ([`image_stage`]).
//! 4. **Rank fusion.** Several runs are combined with Reciprocal Rank Fusion
//!    ([`fusion`]).
//!
//! [`metrics`] evaluates submissions (Recall@k, mAP, MRR and a weighted
//! overall score) and [`pipeline`] wires the stages together.
//!
//! Providers are reached through small traits. Every provider has a
//! deterministic `local-test` implementation so the whole pipeline runs
//! without any model server.

pub mod concurrency;
pub mod corpus;
pub mod embedding;
pub mod fusion;
pub mod image_stage;
pub mod index;
pub mod metrics;
pub mod pipeline;
pub mod ranked;
pub mod rerank;
pub mod submission;
pub mod synthetic;

pub use corpus::{Article, Corpus, CorpusError, ImageRecord, QueryCaption};
pub use embedding::{EmbeddingVector, ProviderError, ProviderKind, ProviderSpec};
pub use fusion::{fuse_submissions, rrf_fuse, RunSet, DEFAULT_RRF_K};
pub use image_stage::{CandidateImage, StageConfig};
pub use index::{IndexBackend, VectorIndex};
pub use metrics::{GroundTruth, MetricReport};
pub use pipeline::{Pipeline, PipelineConfig};
pub use ranked::{RankedList, ScoredItem};
pub use rerank::{assemble_prompt, score_yes_from_logits, RelevanceScore, RerankRequest};
pub use submission::SubmissionTable;

// The guide under `book/` is compiled here so its snippets stay in sync with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/dense-retrieval.md")]
    mod dense_retrieval {}
    #[doc = include_str!("../../../book/src/reranking.md")]
    mod reranking {}
    #[doc = include_str!("../../../book/src/image-selection.md")]
    mod image_selection {}
    #[doc = include_str!("../../../book/src/rank-fusion.md")]
    mod rank_fusion {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
