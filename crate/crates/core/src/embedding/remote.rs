//! HTTP providers.
//!
//! Wire protocol (JSON over HTTP):
//!
//! | Request | Response |
//! |---------|----------|
//! | `POST /embed_text {"texts": [...]}` | `{"vectors": [[f32, ...], ...]}` |
//! | `POST /embed_image {"uris": [...]}` | `{"vectors": [[f32, ...], ...]}` |
//! | `POST /rerank {"instruct", "query", "documents": [...]}` | `{"scores": [f32, ...]}` |
//!
//! Transport errors, timeouts, 429 and 5xx responses are retried with
//! exponential backoff up to `RetryPolicy::max_attempts`. Other statuses
//! fail immediately.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ImageEmbedBackend, ProviderError, RetryPolicy, TextEmbedBackend};
use crate::corpus::ImageRecord;

#[derive(Debug, Clone)]
pub struct HttpClient {
    base: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fatal(ProviderError),
}

impl HttpClient {
    pub fn new(base: &str, retry: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(retry.timeout_ms.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent,
            retry,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base, path.trim_start_matches('/'))
    }

    fn attempt<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        url: &str,
        body: &Req,
    ) -> Attempt<Resp> {
        let mut resp = match self.agent.post(url).send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        if status == 429 || (500..600).contains(&status) {
            return Attempt::Retry(format!("status {status}"));
        }
        if !(200..300).contains(&status) {
            let message = resp.body_mut().read_to_string().unwrap_or_default();
            return Attempt::Fatal(ProviderError::Rejected { status, message });
        }
        match resp.body_mut().read_json::<Resp>() {
            Ok(v) => Attempt::Done(v),
            Err(ureq::Error::Timeout(t)) => Attempt::Retry(format!("timeout: {t}")),
            Err(ureq::Error::Io(e)) => Attempt::Retry(e.to_string()),
            Err(e) => Attempt::Fatal(ProviderError::Protocol(e.to_string())),
        }
    }

    /// POSTs `body` as JSON to `path` and decodes the JSON reply, retrying
    /// transient failures.
    pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ProviderError> {
        let url = self.url(path);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&url, body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(message) => {
                    tracing::warn!(%url, attempts, %message, "provider request failed");
                    if attempts >= self.retry.max_attempts {
                        return Err(ProviderError::Transport { attempts, message });
                    }
                    std::thread::sleep(self.retry.backoff(attempts));
                }
            }
        }
    }

    /// `GET /health` with a short timeout, no retries.
    pub fn is_healthy(&self) -> bool {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(2)))
            .http_status_as_error(false)
            .build()
            .into();
        matches!(
            agent.get(&self.url("health")).call(),
            Ok(r) if r.status().is_success()
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub uris: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct RemoteTextEmbedder {
    client: HttpClient,
}

impl RemoteTextEmbedder {
    pub fn new(endpoint: &str, retry: RetryPolicy) -> Self {
        Self {
            client: HttpClient::new(endpoint, retry),
        }
    }

    pub fn client(&self) -> &HttpClient {
        &self.client
    }
}

impl TextEmbedBackend for RemoteTextEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let req = EmbedTextRequest {
            texts: texts.to_vec(),
        };
        let resp: EmbedResponse = self.client.post_json("embed_text", &req)?;
        Ok(resp.vectors)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteImageEmbedder {
    client: HttpClient,
}

impl RemoteImageEmbedder {
    pub fn new(endpoint: &str, retry: RetryPolicy) -> Self {
        Self {
            client: HttpClient::new(endpoint, retry),
        }
    }

    pub fn client(&self) -> &HttpClient {
        &self.client
    }
}

impl ImageEmbedBackend for RemoteImageEmbedder {
    fn embed_batch(&self, images: &[ImageRecord]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let req = EmbedImageRequest {
            uris: images.iter().map(|i| i.uri.clone()).collect(),
        };
        let resp: EmbedResponse = self.client.post_json("embed_image", &req)?;
        Ok(resp.vectors)
    }
}
