//! Article and image corpus, plus query sets.
//!
//! The corpus file is JSONL with one article per line and the article's
//! images embedded:
//!
//! ```text
//! {"article_id": "a1", "title": "...", "pub_date": "...", "content": "...",
//!  "images": [{"image_id": "i1", "uri": "..."}]}
//! ```
//!
//! Query sets are JSONL with `{"query_id": "...", "caption": "..."}`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate article id {0:?}")]
    DuplicateArticle(String),
    #[error("duplicate image id {0:?}")]
    DuplicateImage(String),
    #[error(
        "article {article_id:?} lists image {image_id:?} which is absent from the image table"
    )]
    MissingImage {
        article_id: String,
        image_id: String,
    },
    #[error("image {image_id:?} claims owner {owner:?}, which does not list it")]
    OwnerMismatch { image_id: String, owner: String },
    #[error("duplicate query id {0:?}")]
    DuplicateQuery(String),
    #[error("query {0:?} has an empty caption")]
    EmptyCaption(String),
    #[error("empty {0} id")]
    EmptyId(&'static str),
}

/// A news article, the retrieval unit of the first two stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub article_id: String,
    pub title: String,
    /// Display form, kept verbatim.
    pub pub_date: String,
    pub content: String,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub owner_article_id: String,
    /// Path or URL of the image payload; providers interpret it.
    pub uri: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCaption {
    pub query_id: String,
    pub caption: String,
}

impl QueryCaption {
    pub fn new(query_id: impl Into<String>, caption: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            caption: caption.into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageLine {
    image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uri: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArticleLine {
    article_id: String,
    title: String,
    pub_date: String,
    content: String,
    #[serde(default)]
    images: Vec<ImageLine>,
}

/// Immutable, validated corpus with O(1) lookups by id.
///
/// Articles and images live in separate namespaces: an image id never
/// resolves as an article and vice versa.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    articles: Vec<Article>,
    images: Vec<ImageRecord>,
    article_pos: HashMap<String, usize>,
    image_pos: HashMap<String, usize>,
}

impl Corpus {
    /// Validates and indexes articles and images.
    ///
    /// Every image listed by an article must be present in `images` and
    /// name that article as its owner.
    pub fn from_records(
        articles: Vec<Article>,
        images: Vec<ImageRecord>,
    ) -> Result<Self, CorpusError> {
        let mut article_pos = HashMap::with_capacity(articles.len());
        for (i, a) in articles.iter().enumerate() {
            if a.article_id.is_empty() {
                return Err(CorpusError::EmptyId("article"));
            }
            if article_pos.insert(a.article_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateArticle(a.article_id.clone()));
            }
        }
        let mut image_pos = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if img.image_id.is_empty() {
                return Err(CorpusError::EmptyId("image"));
            }
            if image_pos.insert(img.image_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateImage(img.image_id.clone()));
            }
        }
        for a in &articles {
            let mut listed = std::collections::HashSet::with_capacity(a.image_ids.len());
            for id in &a.image_ids {
                if !listed.insert(id.as_str()) {
                    return Err(CorpusError::DuplicateImage(id.clone()));
                }
                let Some(&pos) = image_pos.get(id) else {
                    return Err(CorpusError::MissingImage {
                        article_id: a.article_id.clone(),
                        image_id: id.clone(),
                    });
                };
                if images[pos].owner_article_id != a.article_id {
                    return Err(CorpusError::OwnerMismatch {
                        image_id: id.clone(),
                        owner: images[pos].owner_article_id.clone(),
                    });
                }
            }
        }
        for img in &images {
            let owned = article_pos
                .get(&img.owner_article_id)
                .map(|&p| articles[p].image_ids.contains(&img.image_id))
                .unwrap_or(false);
            if !owned {
                return Err(CorpusError::OwnerMismatch {
                    image_id: img.image_id.clone(),
                    owner: img.owner_article_id.clone(),
                });
            }
        }
        Ok(Self {
            articles,
            images,
            article_pos,
            image_pos,
        })
    }

    /// Reads a corpus JSONL file.
    pub fn ingest(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_reader(BufReader::new(file)).map_err(|e| match e {
            CorpusError::Io { source, .. } => CorpusError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    /// Parses corpus JSONL from any reader. Blank lines are skipped.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut articles = Vec::new();
        let mut images = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|source| CorpusError::Io {
                path: PathBuf::new(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ArticleLine =
                serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let mut image_ids = Vec::with_capacity(rec.images.len());
            for img in rec.images {
                let Some(uri) = img.uri else {
                    return Err(CorpusError::MissingImage {
                        article_id: rec.article_id,
                        image_id: img.image_id,
                    });
                };
                image_ids.push(img.image_id.clone());
                images.push(ImageRecord {
                    image_id: img.image_id,
                    owner_article_id: rec.article_id.clone(),
                    uri,
                });
            }
            articles.push(Article {
                article_id: rec.article_id,
                title: rec.title,
                pub_date: rec.pub_date,
                content: rec.content,
                image_ids,
            });
        }
        Self::from_records(articles, images)
    }

    /// Writes the corpus back out as JSONL, one article per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for a in &self.articles {
            let line = ArticleLine {
                article_id: a.article_id.clone(),
                title: a.title.clone(),
                pub_date: a.pub_date.clone(),
                content: a.content.clone(),
                images: a
                    .image_ids
                    .iter()
                    .map(|id| ImageLine {
                        image_id: id.clone(),
                        uri: self.image(id).map(|r| r.uri.clone()),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn article(&self, id: &str) -> Option<&Article> {
        self.article_pos.get(id).map(|&i| &self.articles[i])
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.image_pos.get(id).map(|&i| &self.images[i])
    }

    /// Articles in ingest order.
    pub fn articles(&self) -> &[Article] {
        &self.articles
    }

    /// Images in ingest order.
    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn article_count(&self) -> usize {
        self.articles.len()
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }
}

/// Lookup of the ordered image ids attached to an article.
///
/// Stage 3 only needs this view of the corpus.
pub trait ArticleImages {
    fn article_images(&self, article_id: &str) -> Option<&[String]>;
}

impl ArticleImages for Corpus {
    fn article_images(&self, article_id: &str) -> Option<&[String]> {
        self.article(article_id).map(|a| a.image_ids.as_slice())
    }
}

impl ArticleImages for HashMap<String, Vec<String>> {
    fn article_images(&self, article_id: &str) -> Option<&[String]> {
        self.get(article_id).map(Vec::as_slice)
    }
}

/// Reads a query-set JSONL file.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryCaption>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_queries(BufReader::new(file))
}

pub fn parse_queries(reader: impl BufRead) -> Result<Vec<QueryCaption>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryCaption = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if q.query_id.is_empty() {
            return Err(CorpusError::EmptyId("query"));
        }
        if q.caption.trim().is_empty() {
            return Err(CorpusError::EmptyCaption(q.query_id));
        }
        if !seen.insert(q.query_id.clone()) {
            return Err(CorpusError::DuplicateQuery(q.query_id));
        }
        out.push(q);
    }
    Ok(out)
}

pub fn write_queries(queries: &[QueryCaption], mut out: impl Write) -> std::io::Result<()> {
    for q in queries {
        serde_json::to_writer(&mut out, q)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
