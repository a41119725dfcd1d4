//! Declarative pipeline configuration.
//!
//! A single TOML document. Relative paths resolve against the directory of
//! the file. Environment variables may override provider endpoints and
//! nothing else:
//!
//! | variable | overrides |
//! |---|---|
//! | `EVENT_RETRIEVER_TEXT_ENDPOINT` | `providers.text.endpoint` |
//! | `EVENT_RETRIEVER_IMAGE_ENDPOINT` | `providers.image.endpoint` |
//! | `EVENT_RETRIEVER_IMAGE_TEXT_ENDPOINT` | `providers.image_text.endpoint` |
//! | `EVENT_RETRIEVER_RERANK_ENDPOINT` | `providers.rerank.endpoint` |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::embedding::{ProviderKind, ProviderSpec};
use crate::fusion::DEFAULT_RRF_K;
use crate::image_stage::StageConfig;
use crate::index::IndexBackend;
use crate::rerank::DEFAULT_INSTRUCT;

pub const DEFAULT_STAGE1_POOL: usize = 50;
pub const DEFAULT_IN_FLIGHT: usize = 8;
pub const ENV_PREFIX: &str = "EVENT_RETRIEVER_";

/// What to do when a provider fails for one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Degrade that query and keep going.
    #[default]
    Stage1,
    /// Abort the run, naming the query.
    FailHard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersConfig {
    /// Article and caption embedder for dense retrieval.
    pub text: ProviderSpec,
    /// Image embedder for candidate scoring.
    pub image: ProviderSpec,
    /// Caption embedder in the image space. Defaults to the text side of
    /// the `image` endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_text: Option<ProviderSpec>,
    pub rerank: ProviderSpec,
}

impl ProvidersConfig {
    /// All providers backed by the local-test implementations.
    pub fn local(text_dim: usize, image_dim: usize) -> Self {
        Self {
            text: ProviderSpec::local(ProviderKind::TextEmbed, text_dim),
            image: ProviderSpec::local(ProviderKind::ImageEmbed, image_dim),
            image_text: None,
            rerank: ProviderSpec::local(ProviderKind::Rerank, text_dim),
        }
    }

    pub fn caption_image_space(&self) -> ProviderSpec {
        self.image_text.clone().unwrap_or_else(|| ProviderSpec {
            kind: ProviderKind::TextEmbed,
            ..self.image.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Corpus JSONL.
    pub corpus: PathBuf,
    /// Directory holding the saved article index.
    pub index_dir: PathBuf,
    /// Dense-retrieval candidates handed to the reranker.
    #[serde(default = "default_stage1_pool")]
    pub stage1_pool: usize,
    #[serde(default = "default_rrf_k")]
    pub rrf_k: f64,
    /// Bound on concurrent provider requests, shared by all providers.
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
    /// Seed for the local-test providers.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fallback: Fallback,
    #[serde(default = "default_instruct")]
    pub instruct: String,
    #[serde(default)]
    pub stage: StageConfig,
    #[serde(default)]
    pub index: IndexBackend,
    pub providers: ProvidersConfig,
}

fn default_stage1_pool() -> usize {
    DEFAULT_STAGE1_POOL
}

fn default_rrf_k() -> f64 {
    DEFAULT_RRF_K
}

fn default_in_flight() -> usize {
    DEFAULT_IN_FLIGHT
}

fn default_instruct() -> String {
    DEFAULT_INSTRUCT.to_string()
}

impl PipelineConfig {
    /// Defaults everywhere, local-test providers.
    pub fn local(corpus: impl Into<PathBuf>, index_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus: corpus.into(),
            index_dir: index_dir.into(),
            stage1_pool: DEFAULT_STAGE1_POOL,
            rrf_k: DEFAULT_RRF_K,
            in_flight: DEFAULT_IN_FLIGHT,
            seed: 0,
            fallback: Fallback::default(),
            instruct: default_instruct(),
            stage: StageConfig::default(),
            index: IndexBackend::default(),
            providers: ProvidersConfig::local(128, 64),
        }
    }

    /// Reads, resolves paths, applies endpoint overrides from the process
    /// environment and validates, including that the corpus exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_toml_str(&text, base)?;
        cfg.apply_env_overrides(|k| std::env::var(k).ok());
        cfg.validate()?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Parses TOML and resolves relative paths against `base`. No
    /// validation.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Self =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.corpus = resolve(base, &cfg.corpus);
        cfg.index_dir = resolve(base, &cfg.index_dir);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Applies `EVENT_RETRIEVER_*_ENDPOINT` overrides looked up with `var`.
    pub fn apply_env_overrides(&mut self, var: impl Fn(&str) -> Option<String>) {
        let p = &mut self.providers;
        let set = |name: &str, spec: &mut ProviderSpec| {
            if let Some(v) = var(&format!("{ENV_PREFIX}{name}_ENDPOINT")) {
                tracing::info!(provider = name, endpoint = %v, "endpoint overridden from environment");
                spec.endpoint = v;
            }
        };
        set("TEXT", &mut p.text);
        set("IMAGE", &mut p.image);
        set("RERANK", &mut p.rerank);
        if let Some(spec) = p.image_text.as_mut() {
            set("IMAGE_TEXT", spec);
        } else if let Some(v) = var(&format!("{ENV_PREFIX}IMAGE_TEXT_ENDPOINT")) {
            let mut spec = p.caption_image_space();
            spec.endpoint = v;
            p.image_text = Some(spec);
        }
    }

    /// Value checks that need no filesystem access.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.stage
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.stage1_pool < self.stage.k {
            return bad(format!(
                "stage1_pool ({}) must be at least stage.k ({})",
                self.stage1_pool, self.stage.k
            ));
        }
        if !(self.rrf_k.is_finite() && self.rrf_k > 0.0) {
            return bad(format!("rrf_k must be positive, got {}", self.rrf_k));
        }
        if self.in_flight == 0 {
            return bad("in_flight must be at least 1".into());
        }
        if self.instruct.trim().is_empty() {
            return bad("instruct must not be empty".into());
        }
        if let IndexBackend::Ann(p) = &self.index {
            if p.m < 2 || p.ef_construction == 0 || p.ef_search == 0 {
                return bad("ann parameters must be positive and m at least 2".into());
            }
        }
        let providers = [
            (ProviderKind::TextEmbed, &self.providers.text, "text"),
            (ProviderKind::ImageEmbed, &self.providers.image, "image"),
            (ProviderKind::Rerank, &self.providers.rerank, "rerank"),
            (
                ProviderKind::TextEmbed,
                &self.providers.caption_image_space(),
                "image_text",
            ),
        ];
        for (kind, spec, name) in providers {
            spec.validate()
                .map_err(|e| PipelineError::Config(format!("providers.{name}: {e}")))?;
            if spec.kind != kind {
                return bad(format!("providers.{name} must have kind {kind:?}"));
            }
        }
        let caption = self.providers.caption_image_space();
        if caption.dim != self.providers.image.dim {
            return bad(format!(
                "providers.image_text dim {} differs from providers.image dim {}",
                caption.dim, self.providers.image.dim
            ));
        }
        Ok(())
    }

    /// The corpus must exist. The index directory is checked when it is
    /// opened, since the `index` command creates it.
    pub fn check_paths(&self) -> Result<(), PipelineError> {
        if !self.corpus.is_file() {
            return Err(PipelineError::Config(format!(
                "corpus {} does not exist",
                self.corpus.display()
            )));
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
