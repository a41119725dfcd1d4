//! Seeded synthetic corpora with planted queries.
//!
//! Articles are random pseudo-word text. A planted query's caption is the
//! verbatim content of one article, and that article's first image carries a
//! `local-text:` uri holding the same text, so under the local-test providers
//! the relevant article and image are both recoverable at rank 1. Some
//! articles have no images at all.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Article, Corpus, ImageRecord, QueryCaption};
use crate::embedding::local::TEXT_URI_PREFIX;
use crate::metrics::GroundTruth;
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub articles: usize,
    pub queries: usize,
    pub vocabulary: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub max_images: usize,
    /// Share of articles without images.
    pub imageless_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            articles: 1000,
            queries: 100,
            vocabulary: 5000,
            min_words: 40,
            max_words: 90,
            max_images: 5,
            imageless_fraction: 0.1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFixture {
    pub corpus: Corpus,
    pub queries: Vec<QueryCaption>,
    pub truth: GroundTruth,
}

/// Files written by [`SyntheticFixture::write_to`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixturePaths {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub truth: PathBuf,
    pub config: PathBuf,
    pub index_dir: PathBuf,
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st", "kl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

fn vocabulary(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut words = BTreeSet::new();
    while words.len() < n {
        let syllables = rng.random_range(2..=4);
        let w: String = (0..syllables)
            .map(|_| {
                let o = ONSETS[rng.random_range(0..ONSETS.len())];
                let v = VOWELS[rng.random_range(0..VOWELS.len())];
                format!("{o}{v}")
            })
            .collect();
        words.insert(w);
    }
    let mut words: Vec<String> = words.into_iter().collect();
    words.shuffle(rng);
    words
}

fn sentence(rng: &mut ChaCha8Rng, vocab: &[String], n: usize) -> String {
    (0..n)
        .map(|_| vocab[rng.random_range(0..vocab.len())].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates a fixture; the same spec always yields the same fixture.
///
/// # Panics
///
/// When `spec.queries` exceeds the number of articles with images.
pub fn generate(spec: &SyntheticSpec) -> SyntheticFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = vocabulary(&mut rng, spec.vocabulary);
    let mut articles = Vec::with_capacity(spec.articles);
    let mut images = Vec::new();
    for a in 0..spec.articles {
        let article_id = format!("art{a:05}");
        let n_images = if rng.random_bool(spec.imageless_fraction) {
            0
        } else {
            rng.random_range(1..=spec.max_images)
        };
        let image_ids: Vec<String> = (0..n_images)
            .map(|j| format!("{article_id}_img{j}"))
            .collect();
        for id in &image_ids {
            images.push(ImageRecord {
                image_id: id.clone(),
                owner_article_id: article_id.clone(),
                uri: format!("synthetic://{id}.jpg"),
            });
        }
        let words = rng.random_range(spec.min_words..=spec.max_words);
        let title_words = rng.random_range(4..=8);
        articles.push(Article {
            article_id,
            title: sentence(&mut rng, &vocab, title_words),
            pub_date: format!(
                "2023-{:02}-{:02}",
                rng.random_range(1..=12),
                rng.random_range(1..=28)
            ),
            content: sentence(&mut rng, &vocab, words),
            image_ids,
        });
    }

    let mut eligible: Vec<usize> = (0..articles.len())
        .filter(|&i| !articles[i].image_ids.is_empty())
        .collect();
    assert!(
        eligible.len() >= spec.queries,
        "only {} articles have images, {} queries requested",
        eligible.len(),
        spec.queries
    );
    eligible.shuffle(&mut rng);
    let mut planted = eligible[..spec.queries].to_vec();
    planted.sort_unstable();

    let mut queries = Vec::with_capacity(spec.queries);
    let mut truth = GroundTruth::new();
    for (n, &a) in planted.iter().enumerate() {
        let article = &articles[a];
        let image_id = article.image_ids[0].clone();
        let image = images
            .iter_mut()
            .find(|i| i.image_id == image_id)
            .expect("image table lists every article image");
        image.uri = format!("{TEXT_URI_PREFIX}{}", article.content);
        let query_id = format!("q{:04}", n + 1);
        queries.push(QueryCaption::new(&query_id, &article.content));
        truth
            .insert(&query_id, &article.article_id, &image_id)
            .expect("query ids are unique");
    }

    SyntheticFixture {
        corpus: Corpus::from_records(articles, images).expect("generated corpus is consistent"),
        queries,
        truth,
    }
}

impl SyntheticFixture {
    /// Writes corpus, queries, ground truth and a local-test config into
    /// `dir`. The config points at `dir/index`, which is not built here.
    pub fn write_to(&self, dir: &Path, seed: u64) -> std::io::Result<FixturePaths> {
        std::fs::create_dir_all(dir)?;
        let paths = FixturePaths {
            corpus: dir.join("corpus.jsonl"),
            queries: dir.join("queries.jsonl"),
            truth: dir.join("ground_truth.csv"),
            config: dir.join("config.toml"),
            index_dir: dir.join("index"),
        };
        let mut w = BufWriter::new(File::create(&paths.corpus)?);
        self.corpus.write_jsonl(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(&paths.queries)?);
        crate::corpus::write_queries(&self.queries, &mut w)?;
        w.flush()?;
        self.truth.write_csv(File::create(&paths.truth)?)?;

        let mut cfg = PipelineConfig::local("corpus.jsonl", "index");
        cfg.seed = seed;
        let text = cfg.to_toml_string().map_err(std::io::Error::other)?;
        std::fs::write(&paths.config, text)?;
        Ok(paths)
    }
}
