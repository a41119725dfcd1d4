use serde::{Deserialize, Serialize};

use super::{assemble_prompt, score_yes_from_logits, template_hazards, RerankRequest, Reranker};
use crate::embedding::local::LocalTextEmbedder;
use crate::embedding::remote::HttpClient;
use crate::embedding::{dot, EmbeddingVector, ProviderError, RetryPolicy};

/// Deterministic stand-in for a relevance model.
///
/// Query and document are embedded with the local-test text embedder; their
/// cosine `c` becomes the logit pair `(s·c, −s·c)` and goes through
/// [`score_yes_from_logits`], so relevance is monotone in lexical overlap.
#[derive(Debug, Clone)]
pub struct LocalTestReranker {
    embedder: LocalTextEmbedder,
    sharpness: f64,
}

impl LocalTestReranker {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            embedder: LocalTextEmbedder::new(dim, seed),
            sharpness: 8.0,
        }
    }

    fn unit(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        Ok(EmbeddingVector::normalized(self.embedder.embed(text))?)
    }
}

impl Reranker for LocalTestReranker {
    fn score(
        &self,
        _instruct: &str,
        query: &str,
        documents: &[String],
    ) -> Result<Vec<f64>, ProviderError> {
        let q = self.unit(query)?;
        documents
            .iter()
            .map(|d| {
                let c = f64::from(dot(q.as_slice(), self.unit(d)?.as_slice()));
                score_yes_from_logits(self.sharpness * c, -self.sharpness * c)
                    .map(|s| s.value())
                    .map_err(|e| ProviderError::Protocol(e.to_string()))
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RerankWireRequest {
    pub instruct: String,
    pub query: String,
    pub documents: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RerankWireResponse {
    pub scores: Vec<f64>,
}

/// Client for `POST /rerank`.
#[derive(Debug, Clone)]
pub struct RemoteReranker {
    client: HttpClient,
}

impl RemoteReranker {
    pub fn new(endpoint: &str, retry: RetryPolicy) -> Self {
        Self {
            client: HttpClient::new(endpoint, retry),
        }
    }

    pub fn client(&self) -> &HttpClient {
        &self.client
    }
}

impl Reranker for RemoteReranker {
    fn score(
        &self,
        instruct: &str,
        query: &str,
        documents: &[String],
    ) -> Result<Vec<f64>, ProviderError> {
        for d in documents {
            if let Ok(req) = RerankRequest::new(instruct, query, d.as_str()) {
                let hazards = template_hazards(&req);
                if !hazards.is_empty() {
                    tracing::warn!(?hazards, "rerank document contains template delimiters");
                }
            }
        }
        let req = RerankWireRequest {
            instruct: instruct.to_string(),
            query: query.to_string(),
            documents: documents.to_vec(),
        };
        let resp: RerankWireResponse = self.client.post_json("rerank", &req)?;
        Ok(resp.scores)
    }
}

/// A provider that exposes raw next-token logits for full prompts.
pub trait LogitBackend: Send + Sync {
    /// `(logit_yes, logit_no)` at the final position of each prompt.
    fn yes_no_logits(&self, prompts: &[String]) -> Result<Vec<(f64, f64)>, ProviderError>;
}

/// Adapts a [`LogitBackend`] into a [`Reranker`] by assembling the chat
/// prompt for each document and converting its logits.
#[derive(Debug, Clone)]
pub struct PromptedLogitReranker<B> {
    backend: B,
}

impl<B: LogitBackend> PromptedLogitReranker<B> {
    pub fn new(backend: B) -> Self {
        Self { backend }
    }
}

impl<B: LogitBackend> Reranker for PromptedLogitReranker<B> {
    fn score(
        &self,
        instruct: &str,
        query: &str,
        documents: &[String],
    ) -> Result<Vec<f64>, ProviderError> {
        let prompts = documents
            .iter()
            .map(|d| {
                RerankRequest::new(instruct, query, d.as_str())
                    .map(|r| assemble_prompt(&r))
                    .map_err(|e| ProviderError::Config(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let logits = self.backend.yes_no_logits(&prompts)?;
        if logits.len() != prompts.len() {
            return Err(ProviderError::CountMismatch {
                expected: prompts.len(),
                got: logits.len(),
            });
        }
        logits
            .into_iter()
            .map(|(y, n)| {
                score_yes_from_logits(y, n)
                    .map(|s| s.value())
                    .map_err(|e| ProviderError::Protocol(e.to_string()))
            })
            .collect()
    }
}
