//! Desk-scale text encoder: hashed bag-of-tokens embeddings, mean-pooled and
//! projected into the shared 512-dim space. The context length comfortably
//! exceeds the 512 tokens that long findings sections require.

use super::EMBED_DIM;
use crate::nn::{EmbeddingBag, Linear, Param};
use ndarray::Array2;

/// Lowercase alphanumeric tokens of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Trainable token-embedding + pooling text encoder.
pub struct TextEncoder {
    embedding: EmbeddingBag,
    pub projection: Linear,
    pub vocab: usize,
    pub max_tokens: usize,
}

impl TextEncoder {
    pub fn new(vocab: usize, token_dim: usize, max_tokens: usize, seed: u64) -> Self {
        assert!(max_tokens >= 512, "context length must cover long findings");
        TextEncoder {
            embedding: EmbeddingBag::new("txt.embedding", vocab, token_dim, seed),
            projection: Linear::new("txt.projection", token_dim, EMBED_DIM, seed),
            vocab,
            max_tokens,
        }
    }

    /// Default desk-scale configuration.
    pub fn default_desk(seed: u64) -> Self {
        TextEncoder::new(2048, 128, 4096, seed)
    }

    /// Hash tokens into vocabulary buckets, truncating at `max_tokens`.
    pub fn token_ids(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .into_iter()
            .take(self.max_tokens)
            .map(|t| (fnv1a(t.as_bytes()) % self.vocab as u64) as u32)
            .collect()
    }

    /// Encode a batch of texts to `[B, 512]`.
    pub fn forward(&mut self, texts: &[&str], train: bool) -> Array2<f32> {
        let ids: Vec<Vec<u32>> = texts.iter().map(|t| self.token_ids(t)).collect();
        let pooled = self.embedding.forward(&ids, train);
        self.projection.forward(&pooled, train)
    }

    /// Convenience single-text encode (inference).
    pub fn encode(&mut self, text: &str) -> Vec<f32> {
        let out = self.forward(&[text], false);
        out.row(0).to_vec()
    }

    pub fn backward(&mut self, d_out: &Array2<f32>) {
        let d_pooled = self.projection.backward(d_out);
        self.embedding.backward(&d_pooled);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.embedding.params_mut();
        p.extend(self.projection.params_mut());
        p
    }
}
