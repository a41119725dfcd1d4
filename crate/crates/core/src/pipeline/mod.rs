//! End-to-end orchestration.
//!
//! [`Pipeline`] owns the corpus, the article index and the providers, all
//! immutable once built, so one instance serves concurrent queries. Each
//! stage is also exposed on its own so intermediate artifacts can be
//! recomputed independently.

mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    Fallback, PipelineConfig, ProvidersConfig, DEFAULT_IN_FLIGHT, DEFAULT_STAGE1_POOL, ENV_PREFIX,
};

use crate::concurrency::InFlightLimiter;
use crate::corpus::{Corpus, CorpusError, QueryCaption};
use crate::embedding::remote::HttpClient;
use crate::embedding::{
    format_document, EmbeddingVector, ImageEmbedder, ProviderError, ProviderSpec, TextEmbedder,
    VectorError,
};
use crate::image_stage::{
    collect_candidates, score_candidates, select_candidates, CandidateImage, StageError,
};
use crate::index::{IndexEntry, IndexError, VectorIndex};
use crate::ranked::RankedList;
use crate::rerank::{ArticleReranker, RerankError};
use crate::submission::{StageRecord, SubmissionError, SubmissionTable};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("index dimension {index} differs from text provider dimension {provider}")]
    IndexDimension { index: usize, provider: usize },
    #[error("index lists article {0:?}, which is not in the corpus")]
    UnknownIndexedArticle(String),
    #[error("provider configuration: {0}")]
    ProviderConfig(#[source] ProviderError),
    #[error("query {query_id:?}, {stage}: {source}")]
    Query {
        query_id: String,
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("duplicate query id {0:?}")]
    DuplicateQuery(String),
    #[error("embeddings line {line}: {message}")]
    Embeddings { line: usize, message: String },
    #[error(transparent)]
    Submission(#[from] SubmissionError),
}

impl PipelineError {
    fn query(
        query_id: &str,
        stage: &'static str,
        source: impl std::error::Error + Send + Sync + 'static,
    ) -> Self {
        Self::Query {
            query_id: query_id.to_string(),
            stage,
            source: Box::new(source),
        }
    }
}

/// Wall-clock milliseconds spent per stage for one query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub dense_ms: f64,
    pub rerank_ms: f64,
    pub images_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    fn add(&mut self, other: &StageTimings) {
        self.dense_ms += other.dense_ms;
        self.rerank_ms += other.rerank_ms;
        self.images_ms += other.images_ms;
        self.total_ms += other.total_ms;
    }
}

/// Why a query's result was degraded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Degradation {
    /// The caption could not be embedded; the row is all pads.
    CaptionEmbedding,
    /// Reranking failed; the dense order was used.
    Rerank,
    /// Image scoring failed; candidates kept a zero score.
    ImageScoring,
}

/// One selected image and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageProvenance {
    pub image_id: String,
    pub source_article_id: String,
    /// 1-based rank of the source article after reranking.
    pub article_rank: usize,
    /// Reranker relevance of the source article.
    pub article_score: f32,
    /// Dense-retrieval cosine of the source article.
    pub dense_score: f32,
    /// Caption/image cosine.
    pub image_score: f32,
}

/// Output of [`Pipeline::image_stage`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSelection {
    /// Selected ids padded to `output_len`.
    pub image_ids: Vec<String>,
    pub provenance: Vec<ImageProvenance>,
    /// The scored pool the selection was made from.
    pub candidates: Vec<CandidateImage>,
    pub degraded: Option<Degradation>,
}

/// Everything the pipeline produced for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    /// Exactly `output_len` ids, pad-suffixed.
    pub image_ids: Vec<String>,
    /// Selected images, in output order.
    pub provenance: Vec<ImageProvenance>,
    /// Dense-retrieval pool.
    pub dense: RankedList,
    /// Top-K articles after reranking.
    pub articles: RankedList,
    /// Collected and scored candidates, in collection order.
    pub candidates: Vec<CandidateImage>,
    pub degraded: Vec<Degradation>,
    pub timings: StageTimings,
}

/// Outcomes of a batch, in query order.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub outcomes: Vec<QueryOutcome>,
    output_len: usize,
    pad_token: String,
}

impl RetrievalRun {
    /// The image submission.
    pub fn submission(&self) -> Result<SubmissionTable, PipelineError> {
        let mut t = SubmissionTable::new(self.output_len, self.pad_token.clone())?;
        for o in &self.outcomes {
            t.push_row(&o.query_id, o.image_ids.clone())?;
        }
        Ok(t)
    }

    /// Reranked articles as a submission, for article-level evaluation.
    pub fn article_submission(&self) -> Result<SubmissionTable, PipelineError> {
        let mut t = SubmissionTable::new(self.output_len, self.pad_token.clone())?;
        for o in &self.outcomes {
            t.push_row(
                &o.query_id,
                o.articles
                    .ids()
                    .take(self.output_len)
                    .map(str::to_string)
                    .collect(),
            )?;
        }
        Ok(t)
    }

    pub fn article_records(&self) -> Vec<StageRecord> {
        self.outcomes
            .iter()
            .map(|o| StageRecord::articles(&o.articles))
            .collect()
    }

    pub fn dense_records(&self) -> Vec<StageRecord> {
        self.outcomes
            .iter()
            .map(|o| StageRecord::articles(&o.dense))
            .collect()
    }

    pub fn candidate_records(&self) -> Vec<StageRecord> {
        self.outcomes
            .iter()
            .map(|o| StageRecord::candidates(&o.query_id, &o.candidates))
            .collect()
    }

    pub fn total_timings(&self) -> StageTimings {
        let mut t = StageTimings::default();
        for o in &self.outcomes {
            t.add(&o.timings);
        }
        t
    }
}

/// Reachability of one configured provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderStatus {
    pub name: String,
    pub endpoint: String,
    pub healthy: bool,
}

/// Ready-to-query pipeline state.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: Arc<PipelineConfig>,
    corpus: Arc<Corpus>,
    index: Arc<VectorIndex>,
    text: TextEmbedder,
    caption_image: TextEmbedder,
    image: ImageEmbedder,
    reranker: ArticleReranker,
}

impl Pipeline {
    /// Ingests the corpus and loads the saved index named by `config`.
    pub fn open(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        config.check_paths()?;
        let corpus = Corpus::ingest(&config.corpus)?;
        let index = VectorIndex::load(&config.index_dir)?.with_backend(config.index.clone());
        Self::from_parts(config, Arc::new(corpus), Arc::new(index))
    }

    pub fn from_parts(
        config: PipelineConfig,
        corpus: Arc<Corpus>,
        index: Arc<VectorIndex>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let limiter = Arc::new(InFlightLimiter::new(config.in_flight));
        let p = &config.providers;
        let text = TextEmbedder::from_spec(p.text.clone(), config.seed, limiter.clone())
            .map_err(PipelineError::ProviderConfig)?;
        let caption_image =
            TextEmbedder::from_spec(p.caption_image_space(), config.seed, limiter.clone())
                .map_err(PipelineError::ProviderConfig)?;
        let image = ImageEmbedder::from_spec(p.image.clone(), config.seed, limiter.clone())
            .map_err(PipelineError::ProviderConfig)?;
        let reranker = ArticleReranker::from_spec(p.rerank.clone(), config.seed, limiter)
            .map_err(PipelineError::ProviderConfig)?
            .with_instruct(config.instruct.clone());
        if !index.is_empty() && index.dim() != text.dim() {
            return Err(PipelineError::IndexDimension {
                index: index.dim(),
                provider: text.dim(),
            });
        }
        if let Some(id) = index.ids().iter().find(|id| corpus.article(id).is_none()) {
            return Err(PipelineError::UnknownIndexedArticle(id.clone()));
        }
        Ok(Self {
            config: Arc::new(config),
            corpus,
            index,
            text,
            caption_image,
            image,
            reranker,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    /// Probes remote providers' `/health`; local-test providers are always
    /// healthy.
    pub fn provider_status(&self) -> Vec<ProviderStatus> {
        let p = &self.config.providers;
        let specs: [(&str, ProviderSpec); 4] = [
            ("text", p.text.clone()),
            ("image", p.image.clone()),
            ("image_text", p.caption_image_space()),
            ("rerank", p.rerank.clone()),
        ];
        specs
            .into_iter()
            .map(|(name, spec)| ProviderStatus {
                name: name.to_string(),
                healthy: spec.is_local()
                    || HttpClient::new(&spec.endpoint, spec.retry.clone()).is_healthy(),
                endpoint: spec.endpoint,
            })
            .collect()
    }

    /// Dense retrieval: the `stage1_pool` nearest articles to `caption`.
    pub fn dense_stage(&self, query: &QueryCaption) -> Result<RankedList, PipelineError> {
        let v = self
            .text
            .embed_one(&query.caption)
            .map_err(|e| PipelineError::query(&query.query_id, "caption embedding", e))?;
        self.dense_from_vector(&query.query_id, &v)
    }

    fn dense_from_vector(
        &self,
        query_id: &str,
        v: &EmbeddingVector,
    ) -> Result<RankedList, PipelineError> {
        let k = self.config.stage1_pool.min(self.index.len());
        if k == 0 {
            return Ok(RankedList::new(query_id, Vec::new()));
        }
        let hits = self.index.top_k_vector(v, k)?;
        Ok(RankedList::new(query_id, hits))
    }

    /// Reranks a dense pool to the top `stage.k`. Provider failures fall back
    /// to the dense order unless the configuration says fail-hard.
    pub fn rerank_stage(
        &self,
        query: &QueryCaption,
        dense: &RankedList,
    ) -> Result<(RankedList, Option<Degradation>), PipelineError> {
        let k = self.config.stage.k;
        match self
            .reranker
            .rerank_articles(&query.caption, dense, &self.corpus, k)
        {
            Ok(list) => Ok((list, None)),
            Err(RerankError::Provider { source, .. })
                if self.config.fallback == Fallback::Stage1 =>
            {
                tracing::warn!(query_id = %query.query_id, error = %source, "rerank failed, using dense order");
                let mut list = dense.clone();
                list.truncate(k);
                Ok((list, Some(Degradation::Rerank)))
            }
            Err(e) => Err(PipelineError::query(&query.query_id, "rerank", e)),
        }
    }

    /// Collects, scores and selects images from reranked `articles`.
    pub fn image_stage(
        &self,
        query: &QueryCaption,
        articles: &RankedList,
        dense: &RankedList,
    ) -> Result<ImageSelection, PipelineError> {
        let cfg = &self.config.stage;
        let collected = collect_candidates(articles, self.corpus.as_ref(), cfg);
        let mut degraded = None;
        let scored = match score_candidates(
            &query.caption,
            collected.clone(),
            &self.corpus,
            &self.caption_image,
            &self.image,
        ) {
            Ok(s) => s,
            Err(StageError::Provider(e)) if self.config.fallback == Fallback::Stage1 => {
                tracing::warn!(query_id = %query.query_id, error = %e, "image scoring failed, using zero scores");
                degraded = Some(Degradation::ImageScoring);
                collected
            }
            Err(e) => return Err(PipelineError::query(&query.query_id, "image scoring", e)),
        };
        let selected = select_candidates(&scored, cfg);
        let provenance: Vec<ImageProvenance> = selected
            .iter()
            .map(|c| ImageProvenance {
                image_id: c.image_id.clone(),
                source_article_id: c.source_article_id.clone(),
                article_rank: c.article_rank,
                article_score: articles.entries[c.article_rank - 1].score,
                dense_score: dense
                    .entries
                    .iter()
                    .find(|e| e.id == c.source_article_id)
                    .map_or(0.0, |e| e.score),
                image_score: c.score,
            })
            .collect();
        let mut ids: Vec<String> = provenance.iter().map(|p| p.image_id.clone()).collect();
        ids.resize(cfg.output_len, cfg.pad_token.clone());
        Ok(ImageSelection {
            image_ids: ids,
            provenance,
            candidates: scored,
            degraded,
        })
    }

    /// Runs all stages for one caption.
    pub fn retrieve_one(&self, query: &QueryCaption) -> Result<QueryOutcome, PipelineError> {
        let t0 = Instant::now();
        let mut timings = StageTimings::default();
        let mut degraded = Vec::new();
        let dense = match self.text.embed_one(&query.caption) {
            Ok(v) => self.dense_from_vector(&query.query_id, &v)?,
            Err(e) if self.config.fallback == Fallback::Stage1 => {
                tracing::warn!(query_id = %query.query_id, error = %e, "caption embedding failed, emitting pads");
                let cfg = &self.config.stage;
                return Ok(QueryOutcome {
                    query_id: query.query_id.clone(),
                    image_ids: vec![cfg.pad_token.clone(); cfg.output_len],
                    provenance: Vec::new(),
                    dense: RankedList::new(&query.query_id, Vec::new()),
                    articles: RankedList::new(&query.query_id, Vec::new()),
                    candidates: Vec::new(),
                    degraded: vec![Degradation::CaptionEmbedding],
                    timings: StageTimings {
                        total_ms: ms(t0),
                        ..timings
                    },
                });
            }
            Err(e) => {
                return Err(PipelineError::query(
                    &query.query_id,
                    "caption embedding",
                    e,
                ))
            }
        };
        timings.dense_ms = ms(t0);

        let t1 = Instant::now();
        let (articles, d) = self.rerank_stage(query, &dense)?;
        degraded.extend(d);
        timings.rerank_ms = ms(t1);

        let t2 = Instant::now();
        let ImageSelection {
            image_ids,
            provenance,
            candidates,
            degraded: d,
        } = self.image_stage(query, &articles, &dense)?;
        degraded.extend(d);
        timings.images_ms = ms(t2);
        timings.total_ms = ms(t0);

        tracing::debug!(
            query_id = %query.query_id,
            dense_ms = timings.dense_ms,
            rerank_ms = timings.rerank_ms,
            images_ms = timings.images_ms,
            candidates = candidates.len(),
            "query done"
        );
        Ok(QueryOutcome {
            query_id: query.query_id.clone(),
            image_ids,
            provenance,
            dense,
            articles,
            candidates,
            degraded,
            timings,
        })
    }

    /// Runs every query in parallel; outcomes keep the input order.
    pub fn run_retrieval(&self, queries: &[QueryCaption]) -> Result<RetrievalRun, PipelineError> {
        check_unique(queries)?;
        let t0 = Instant::now();
        let outcomes = queries
            .par_iter()
            .map(|q| self.retrieve_one(q))
            .collect::<Result<Vec<_>, _>>()?;
        let run = RetrievalRun {
            outcomes,
            output_len: self.config.stage.output_len,
            pad_token: self.config.stage.pad_token.clone(),
        };
        log_summary(&run, t0);
        Ok(run)
    }

    /// Reranks saved dense pools and continues through image selection.
    /// `pools` must hold one dense list per query.
    pub fn run_from_dense(
        &self,
        queries: &[QueryCaption],
        pools: &[RankedList],
    ) -> Result<RetrievalRun, PipelineError> {
        check_unique(queries)?;
        let by_id: std::collections::HashMap<&str, &RankedList> =
            pools.iter().map(|p| (p.query_id.as_str(), p)).collect();
        let t0 = Instant::now();
        let outcomes = queries
            .par_iter()
            .map(|q| {
                let dense = by_id.get(q.query_id.as_str()).ok_or_else(|| {
                    PipelineError::Config(format!("no dense pool for query {:?}", q.query_id))
                })?;
                let t = Instant::now();
                let (articles, d1) = self.rerank_stage(q, dense)?;
                let rerank_ms = ms(t);
                let t = Instant::now();
                let ImageSelection {
                    image_ids,
                    provenance,
                    candidates,
                    degraded: d2,
                } = self.image_stage(q, &articles, dense)?;
                let images_ms = ms(t);
                Ok(QueryOutcome {
                    query_id: q.query_id.clone(),
                    image_ids,
                    provenance,
                    dense: (*dense).clone(),
                    articles,
                    candidates,
                    degraded: d1.into_iter().chain(d2).collect(),
                    timings: StageTimings {
                        dense_ms: 0.0,
                        rerank_ms,
                        images_ms,
                        total_ms: rerank_ms + images_ms,
                    },
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let run = RetrievalRun {
            outcomes,
            output_len: self.config.stage.output_len,
            pad_token: self.config.stage.pad_token.clone(),
        };
        log_summary(&run, t0);
        Ok(run)
    }
}

fn check_unique(queries: &[QueryCaption]) -> Result<(), PipelineError> {
    let mut seen = std::collections::HashSet::new();
    for q in queries {
        if !seen.insert(q.query_id.as_str()) {
            return Err(PipelineError::DuplicateQuery(q.query_id.clone()));
        }
    }
    Ok(())
}

fn log_summary(run: &RetrievalRun, t0: Instant) {
    let t = run.total_timings();
    let degraded = run
        .outcomes
        .iter()
        .filter(|o| !o.degraded.is_empty())
        .count();
    tracing::info!(
        queries = run.outcomes.len(),
        degraded,
        wall_ms = ms(t0),
        dense_ms = t.dense_ms,
        rerank_ms = t.rerank_ms,
        images_ms = t.images_ms,
        "retrieval finished"
    );
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Embeds every article's formatted document, in corpus order.
pub fn embed_corpus(
    corpus: &Corpus,
    embedder: &TextEmbedder,
) -> Result<Vec<IndexEntry>, PipelineError> {
    let docs: Vec<String> = corpus
        .articles()
        .iter()
        .map(|a| format_document(a, embedder.spec().max_chars))
        .collect();
    if docs.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = embedder.spec().max_batch.max(1) * 4;
    let vectors = docs
        .par_chunks(chunk)
        .map(|c| embedder.embed_texts(c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(PipelineError::ProviderConfig)?;
    Ok(corpus
        .articles()
        .iter()
        .zip(vectors.into_iter().flatten())
        .map(|(a, v)| IndexEntry::new(a.article_id.clone(), v))
        .collect())
}

/// Builds the article index described by `config` from `corpus`.
pub fn build_index(config: &PipelineConfig, corpus: &Corpus) -> Result<VectorIndex, PipelineError> {
    let limiter = Arc::new(InFlightLimiter::new(config.in_flight));
    let embedder = TextEmbedder::from_spec(config.providers.text.clone(), config.seed, limiter)
        .map_err(PipelineError::ProviderConfig)?;
    let t0 = Instant::now();
    let entries = embed_corpus(corpus, &embedder)?;
    let embed_ms = ms(t0);
    let t1 = Instant::now();
    let index = VectorIndex::build(entries, config.index.clone())?;
    tracing::info!(
        articles = index.len(),
        dim = index.dim(),
        backend = config.index.name(),
        embed_ms,
        build_ms = ms(t1),
        "index built"
    );
    Ok(index)
}

/// One line of an embeddings file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

pub fn write_embeddings(entries: &[IndexEntry], path: &Path) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for e in entries {
        let rec = EmbeddingRecord {
            id: e.item_id.clone(),
            vector: e.vector.as_slice().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads an embeddings file; vectors are renormalized.
pub fn read_embeddings(path: &Path) -> Result<Vec<IndexEntry>, PipelineError> {
    let file = File::open(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| PipelineError::Embeddings {
            line: idx + 1,
            message,
        };
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let v =
            EmbeddingVector::normalized(rec.vector).map_err(|e: VectorError| bad(e.to_string()))?;
        out.push(IndexEntry::new(rec.id, v));
    }
    Ok(out)
}
