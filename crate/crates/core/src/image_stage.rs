//! Candidate image collection, scoring and rank-aware selection.
//!
//! Collection walks the reranked articles in order and stops as soon as it
//! holds at least `i` images drawn from at least `a` distinct articles,
//! never looking past the top `k`. Scoring is caption/image cosine
//! similarity. Selection fills a fixed-length list article by article,
//! taking at most `m` of each article's best images, then fills leftover
//! slots with the images the cap held back, and finally pads.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ArticleImages, Corpus, ImageRecord};
use crate::embedding::{ImageEmbedder, ProviderError, TextEmbedder};
use crate::ranked::{score_desc_id_asc, RankedList};

pub const DEFAULT_PAD_TOKEN: &str = "#";

#[derive(Debug, Error)]
pub enum StageError {
    #[error("invalid stage configuration: {0}")]
    InvalidConfig(String),
    #[error("caption embedder has dimension {text}, image embedder has {image}")]
    DimensionMismatch { text: usize, image: usize },
    #[error("candidate image {0:?} is not in the corpus")]
    UnknownImage(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// Reranked articles considered.
    pub k: usize,
    /// Minimum distinct contributing articles before collection may stop.
    pub a: usize,
    /// Minimum collected images before collection may stop.
    pub i: usize,
    /// Per-article cap in the first selection pass.
    pub m: usize,
    pub output_len: usize,
    pub pad_token: String,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            k: 10,
            a: 3,
            i: 10,
            m: 3,
            output_len: 10,
            pad_token: DEFAULT_PAD_TOKEN.to_string(),
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), StageError> {
        let bad = |m: &str| Err(StageError::InvalidConfig(m.to_string()));
        if self.a < 1 || self.a > self.k {
            return bad("require 1 <= a <= k");
        }
        if self.i < 1 {
            return bad("i must be at least 1");
        }
        if self.m < 1 {
            return bad("m must be at least 1");
        }
        if self.output_len < 1 {
            return bad("output_len must be at least 1");
        }
        if self.pad_token.is_empty() {
            return bad("pad_token must not be empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateImage {
    pub image_id: String,
    pub source_article_id: String,
    /// 1-based rank of the source article after reranking.
    pub article_rank: usize,
    pub score: f32,
}

/// Gathers candidate images from `ranked_articles` with early stopping.
///
/// Images keep their article's listed order. An image already collected
/// from a better-ranked article is skipped, and an article that adds no new
/// image does not count as contributing. If the thresholds are never met,
/// everything from the top `k` articles is returned.
pub fn collect_candidates(
    ranked_articles: &RankedList,
    source: &impl ArticleImages,
    cfg: &StageConfig,
) -> Vec<CandidateImage> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut contributing = 0;
    for (idx, entry) in ranked_articles.entries.iter().take(cfg.k).enumerate() {
        let images = source.article_images(&entry.id).unwrap_or(&[]);
        let before = out.len();
        for image_id in images {
            if seen.insert(image_id.as_str()) {
                out.push(CandidateImage {
                    image_id: image_id.clone(),
                    source_article_id: entry.id.clone(),
                    article_rank: idx + 1,
                    score: 0.0,
                });
            }
        }
        if out.len() > before {
            contributing += 1;
        }
        if out.len() >= cfg.i && contributing >= cfg.a {
            break;
        }
    }
    out
}

/// Sets each candidate's score to the cosine similarity between the caption
/// and the image. Order is preserved.
pub fn score_candidates(
    caption: &str,
    mut candidates: Vec<CandidateImage>,
    corpus: &Corpus,
    caption_embedder: &TextEmbedder,
    image_embedder: &ImageEmbedder,
) -> Result<Vec<CandidateImage>, StageError> {
    if caption_embedder.dim() != image_embedder.dim() {
        return Err(StageError::DimensionMismatch {
            text: caption_embedder.dim(),
            image: image_embedder.dim(),
        });
    }
    if candidates.is_empty() {
        return Ok(candidates);
    }
    let records: Vec<ImageRecord> = candidates
        .iter()
        .map(|c| {
            corpus
                .image(&c.image_id)
                .cloned()
                .ok_or_else(|| StageError::UnknownImage(c.image_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let caption_vec = caption_embedder.embed_one(caption)?;
    let image_vecs = image_embedder.embed_images(&records)?;
    for (c, v) in candidates.iter_mut().zip(&image_vecs) {
        c.score = caption_vec.cosine(v);
    }
    Ok(candidates)
}

/// Rank-aware selection without padding: at most `output_len` candidates.
pub fn select_candidates<'a>(
    candidates: &'a [CandidateImage],
    cfg: &StageConfig,
) -> Vec<&'a CandidateImage> {
    let mut by_rank: BTreeMap<usize, Vec<&CandidateImage>> = BTreeMap::new();
    let mut seen = HashSet::new();
    let mut ordered: Vec<&CandidateImage> = candidates.iter().collect();
    ordered.sort_by_key(|c| c.article_rank);
    for c in ordered {
        if seen.insert(c.image_id.as_str()) {
            by_rank.entry(c.article_rank).or_default().push(c);
        }
    }
    for group in by_rank.values_mut() {
        group.sort_by(|a, b| score_desc_id_asc(a.score, &a.image_id, b.score, &b.image_id));
    }

    let mut out = Vec::with_capacity(cfg.output_len);
    for group in by_rank.values() {
        for c in group.iter().take(cfg.m) {
            if out.len() == cfg.output_len {
                return out;
            }
            out.push(*c);
        }
    }
    for group in by_rank.values() {
        for c in group.iter().skip(cfg.m) {
            if out.len() == cfg.output_len {
                return out;
            }
            out.push(*c);
        }
    }
    out
}

/// Exactly `output_len` ids: the rank-aware selection followed by pads.
pub fn rank_aware_select(candidates: &[CandidateImage], cfg: &StageConfig) -> Vec<String> {
    let mut ids: Vec<String> = select_candidates(candidates, cfg)
        .into_iter()
        .map(|c| c.image_id.clone())
        .collect();
    ids.resize(cfg.output_len, cfg.pad_token.clone());
    ids
}
