//! Embedding providers for captions, documents and images.
//!
//! A provider is described by a [`ProviderSpec`]. The endpoint `local-test`
//! selects the deterministic in-process embedders in [`local`]; any other
//! endpoint is treated as the base URL of a remote service speaking the JSON
//! protocol in [`remote`].
//!
//! [`TextEmbedder`] and [`ImageEmbedder`] wrap a backend and take care of
//! truncation, batching, the in-flight bound, dimension checks and
//! normalization, so every vector leaving this module is unit length.

pub mod local;
pub mod remote;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concurrency::InFlightLimiter;
use crate::corpus::{Article, ImageRecord};

pub const LOCAL_TEST_ENDPOINT: &str = "local-test";
pub const DEFAULT_MAX_CHARS: usize = 8192;
pub const DEFAULT_MAX_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider unreachable after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider rejected the request (status {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed provider response: {0}")]
    Protocol(String),
    #[error("provider returned dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider returned {got} result(s) for {expected} input(s)")]
    CountMismatch { expected: usize, got: usize },
    #[error("input {index} is empty after truncation")]
    EmptyInput { index: usize },
    #[error("invalid vector: {0}")]
    InvalidVector(#[from] VectorError),
    #[error("provider configuration: {0}")]
    Config(String),
}

impl ProviderError {
    /// Transport failures may succeed on a later attempt; everything else is
    /// a configuration or protocol problem.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VectorError {
    #[error("vector has no components")]
    Empty,
    #[error("component {0} is not finite")]
    NonFinite(usize),
    #[error("vector has zero norm")]
    ZeroNorm,
}

/// Unit-length dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// L2-normalizes `values`. NaN, infinities and the zero vector are rejected.
    pub fn normalized(mut values: Vec<f32>) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VectorError::NonFinite(i));
        }
        let norm = values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(VectorError::ZeroNorm);
        }
        for v in &mut values {
            *v = (f64::from(*v) / norm) as f32;
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f32 {
        self.values.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    /// Cosine similarity (both operands are unit length).
    pub fn cosine(&self, other: &Self) -> f32 {
        dot(&self.values, &other.values)
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    TextEmbed,
    ImageEmbed,
    Rerank,
}

/// Retry behaviour for remote providers: bounded exponential backoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 200,
            max_delay_ms: 5_000,
            timeout_ms: 60_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, where `attempt` starts at 1.
    pub fn backoff(&self, attempt: u32) -> std::time::Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        std::time::Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    /// Base URL, or `local-test`.
    pub endpoint: String,
    pub dim: usize,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    #[serde(default = "default_max_chars")]
    pub max_chars: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_max_batch() -> usize {
    DEFAULT_MAX_BATCH
}

fn default_max_chars() -> usize {
    DEFAULT_MAX_CHARS
}

impl ProviderSpec {
    pub fn local(kind: ProviderKind, dim: usize) -> Self {
        Self {
            kind,
            endpoint: LOCAL_TEST_ENDPOINT.to_string(),
            dim,
            max_batch: DEFAULT_MAX_BATCH,
            max_chars: DEFAULT_MAX_CHARS,
            retry: RetryPolicy::default(),
        }
    }

    pub fn is_local(&self) -> bool {
        self.endpoint == LOCAL_TEST_ENDPOINT
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.dim == 0 {
            return Err(ProviderError::Config("dim must be positive".into()));
        }
        if self.max_batch == 0 {
            return Err(ProviderError::Config("max_batch must be at least 1".into()));
        }
        if self.kind != ProviderKind::ImageEmbed && self.max_chars == 0 {
            return Err(ProviderError::Config("max_chars must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(ProviderError::Config(
                "retry.max_attempts must be at least 1".into(),
            ));
        }
        if self.endpoint.is_empty() {
            return Err(ProviderError::Config("endpoint must not be empty".into()));
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ProviderKind) -> Result<(), ProviderError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(ProviderError::Config(format!(
                "expected a {kind:?} provider, got {:?}",
                self.kind
            )))
        }
    }
}

/// Longest prefix of `text` holding at most `max_chars` characters.
pub fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((byte, _)) => &text[..byte],
        None => text,
    }
}

/// Document string for an article: labelled title, date and content lines,
/// truncated to `max_chars` characters.
pub fn format_document(article: &Article, max_chars: usize) -> String {
    let mut doc = String::with_capacity(
        article.title.len() + article.pub_date.len() + article.content.len() + 24,
    );
    doc.push_str("Title: ");
    doc.push_str(&article.title);
    doc.push_str("\nDate: ");
    doc.push_str(&article.pub_date);
    doc.push_str("\nContent: ");
    doc.push_str(&article.content);
    let keep = truncate_chars(&doc, max_chars).len();
    doc.truncate(keep);
    doc
}

/// Raw text embedding backend. Returned vectors need not be normalized.
pub trait TextEmbedBackend: Send + Sync {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

/// Raw image embedding backend.
pub trait ImageEmbedBackend: Send + Sync {
    fn embed_batch(&self, images: &[ImageRecord]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

/// Splits `items` into `max_batch` chunks, calls `call` under the in-flight
/// bound and reassembles normalized vectors in input order.
fn embed_in_batches<T>(
    items: &[T],
    max_batch: usize,
    dim: usize,
    limiter: &InFlightLimiter,
    call: impl Fn(&[T]) -> Result<Vec<Vec<f32>>, ProviderError>,
) -> Result<Vec<EmbeddingVector>, ProviderError> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(max_batch) {
        let raw = {
            let _permit = limiter.acquire();
            call(chunk)?
        };
        if raw.len() != chunk.len() {
            return Err(ProviderError::CountMismatch {
                expected: chunk.len(),
                got: raw.len(),
            });
        }
        for v in raw {
            if v.len() != dim {
                return Err(ProviderError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            out.push(EmbeddingVector::normalized(v)?);
        }
    }
    Ok(out)
}

/// Text embedding provider bound to its spec.
#[derive(Clone)]
pub struct TextEmbedder {
    spec: ProviderSpec,
    backend: Arc<dyn TextEmbedBackend>,
    limiter: Arc<InFlightLimiter>,
}

impl std::fmt::Debug for TextEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TextEmbedder")
            .field("spec", &self.spec)
            .finish()
    }
}

impl TextEmbedder {
    /// Local-test or remote backend, chosen by `spec.endpoint`.
    pub fn from_spec(
        spec: ProviderSpec,
        seed: u64,
        limiter: Arc<InFlightLimiter>,
    ) -> Result<Self, ProviderError> {
        spec.validate()?;
        spec.expect_kind(ProviderKind::TextEmbed)?;
        let backend: Arc<dyn TextEmbedBackend> = if spec.is_local() {
            Arc::new(local::LocalTextEmbedder::new(spec.dim, seed))
        } else {
            Arc::new(remote::RemoteTextEmbedder::new(
                &spec.endpoint,
                spec.retry.clone(),
            ))
        };
        Ok(Self {
            spec,
            backend,
            limiter,
        })
    }

    pub fn with_backend(
        spec: ProviderSpec,
        backend: Arc<dyn TextEmbedBackend>,
        limiter: Arc<InFlightLimiter>,
    ) -> Result<Self, ProviderError> {
        spec.validate()?;
        Ok(Self {
            spec,
            backend,
            limiter,
        })
    }

    pub fn spec(&self) -> &ProviderSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// One unit vector per text, in input order. Texts are truncated to
    /// `max_chars` first.
    pub fn embed_texts<S: AsRef<str>>(
        &self,
        texts: &[S],
    ) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyInput { index: 0 });
        }
        let mut prepared = Vec::with_capacity(texts.len());
        for (index, t) in texts.iter().enumerate() {
            let t = truncate_chars(t.as_ref(), self.spec.max_chars);
            if t.is_empty() {
                return Err(ProviderError::EmptyInput { index });
            }
            prepared.push(t.to_string());
        }
        embed_in_batches(
            &prepared,
            self.spec.max_batch,
            self.spec.dim,
            &self.limiter,
            |chunk| self.backend.embed_batch(chunk),
        )
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        let mut v = self.embed_texts(&[text])?;
        Ok(v.remove(0))
    }
}

/// Image embedding provider bound to its spec.
#[derive(Clone)]
pub struct ImageEmbedder {
    spec: ProviderSpec,
    backend: Arc<dyn ImageEmbedBackend>,
    limiter: Arc<InFlightLimiter>,
}

impl std::fmt::Debug for ImageEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageEmbedder")
            .field("spec", &self.spec)
            .finish()
    }
}

impl ImageEmbedder {
    pub fn from_spec(
        spec: ProviderSpec,
        seed: u64,
        limiter: Arc<InFlightLimiter>,
    ) -> Result<Self, ProviderError> {
        spec.validate()?;
        spec.expect_kind(ProviderKind::ImageEmbed)?;
        let backend: Arc<dyn ImageEmbedBackend> = if spec.is_local() {
            Arc::new(local::LocalImageEmbedder::new(spec.dim, seed))
        } else {
            Arc::new(remote::RemoteImageEmbedder::new(
                &spec.endpoint,
                spec.retry.clone(),
            ))
        };
        Ok(Self {
            spec,
            backend,
            limiter,
        })
    }

    pub fn with_backend(
        spec: ProviderSpec,
        backend: Arc<dyn ImageEmbedBackend>,
        limiter: Arc<InFlightLimiter>,
    ) -> Result<Self, ProviderError> {
        spec.validate()?;
        Ok(Self {
            spec,
            backend,
            limiter,
        })
    }

    pub fn spec(&self) -> &ProviderSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn embed_images(
        &self,
        images: &[ImageRecord],
    ) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if images.is_empty() {
            return Err(ProviderError::EmptyInput { index: 0 });
        }
        embed_in_batches(
            images,
            self.spec.max_batch,
            self.spec.dim,
            &self.limiter,
            |chunk| self.backend.embed_batch(chunk),
        )
    }
}
