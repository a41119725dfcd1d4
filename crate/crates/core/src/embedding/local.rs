//! Deterministic local-test embedders.
//!
//! Text is split into lowercase alphanumeric tokens. Each token is hashed
//! together with the seed into a ChaCha stream that yields `dim` standard
//! normal floats, and the token vectors are summed. Texts sharing vocabulary
//! therefore land close together, unrelated texts are nearly orthogonal, and
//! the output is a pure function of `(text, dim, seed)`.
//!
//! Images are embedded from their id alone. An image whose uri starts with
//! [`TEXT_URI_PREFIX`] is embedded as the text that follows, which lets
//! fixtures plant an image whose vector equals a given caption's.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{ImageEmbedBackend, ProviderError, TextEmbedBackend};
use crate::corpus::ImageRecord;

pub const TEXT_URI_PREFIX: &str = "local-text:";

const DOMAIN: &[u8] = b"event-retriever/local-test/v1";

fn gaussian_vector(domain: &[u8], key: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(domain);
    h.update(seed.to_le_bytes());
    h.update((dim as u64).to_le_bytes());
    h.update(key.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    (0..dim)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect()
}

/// Lowercased alphanumeric runs; the whole text when there are none.
pub fn tokenize(text: &str) -> Vec<String> {
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    if tokens.is_empty() {
        vec![text.to_string()]
    } else {
        tokens
    }
}

#[derive(Debug, Clone)]
pub struct LocalTextEmbedder {
    dim: usize,
    seed: u64,
}

impl LocalTextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    /// Unnormalized bag-of-tokens vector.
    pub fn embed(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f32; self.dim];
        for token in tokenize(text) {
            let v = gaussian_vector(b"token", &token, self.dim, self.seed);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        acc
    }
}

impl TextEmbedBackend for LocalTextEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct LocalImageEmbedder {
    dim: usize,
    seed: u64,
}

impl LocalImageEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn embed(&self, image: &ImageRecord) -> Vec<f32> {
        match image.uri.strip_prefix(TEXT_URI_PREFIX) {
            Some(text) => LocalTextEmbedder::new(self.dim, self.seed).embed(text),
            None => gaussian_vector(b"image", &image.image_id, self.dim, self.seed),
        }
    }
}

impl ImageEmbedBackend for LocalImageEmbedder {
    fn embed_batch(&self, images: &[ImageRecord]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(images.iter().map(|i| self.embed(i)).collect())
    }
}
