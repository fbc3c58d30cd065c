//! Embedding providers and similarity functions.
//!
//! Providers return L2-normalized vectors; empty or whitespace-only text maps
//! to the all-zero vector. Retrieval uses dot product, semantic retention uses
//! cosine, and the two are configured independently.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;
use crate::transport::{self, RetryPolicy};

/// Matches all-MiniLM-L6-v2.
pub const DEFAULT_DIM: usize = 384;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Wraps raw values without normalizing.
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    /// Scales to unit length; the zero vector stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Dot,
    Cosine,
}

pub fn dot(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum())
}

pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector, kind: SimilarityKind) -> Result<f64> {
    let d = dot(a, b)?;
    match kind {
        SimilarityKind::Dot => Ok(d),
        SimilarityKind::Cosine => {
            let denom = a.norm() * b.norm();
            Ok(if denom == 0.0 { 0.0 } else { d / denom })
        }
    }
}

#[async_trait]
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    async fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            out.push(self.embed(text).await?);
        }
        Ok(out)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64-bit over the UTF-8 bytes of `token`.
pub fn fnv1a64(token: &str) -> u64 {
    token.bytes().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

pub fn hash_bucket(token: &str, dim: usize) -> usize {
    (fnv1a64(token) % dim as u64) as usize
}

/// Bag-of-tokens embedding: lowercase, split on non-alphanumeric runs,
/// FNV-1a 64 each token into `dim` buckets, L2-normalize the counts.
pub fn hash_embed(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim > 0, "embedding dimension must be positive");
    let mut counts = vec![0.0; dim];
    for token in tokenize(text) {
        counts[hash_bucket(&token, dim)] += 1.0;
    }
    EmbeddingVector::normalized(counts)
}

/// Deterministic offline provider backed by [`hash_embed`].
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

#[async_trait]
impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> &str {
        "hash-fnv1a64"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(hash_embed(text, self.dim))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for a `{"texts": [...]} -> {"vectors": [[...]]}` endpoint.
pub struct RemoteEmbedder {
    client: reqwest::Client,
    url: String,
    token: Option<String>,
    dim: usize,
    retry: RetryPolicy,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, token: Option<String>, dim: usize) -> Result<Self> {
        Ok(Self {
            client: transport::build_client(Duration::from_secs(30))?,
            url: url.into(),
            token,
            dim,
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

#[async_trait]
impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.url
    }

    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut v = self.embed_batch(&[text.to_owned()]).await?;
        Ok(v.remove(0))
    }

    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        // Blank texts never leave the process.
        let pending: Vec<String> = texts
            .iter()
            .filter(|t| !t.trim().is_empty())
            .cloned()
            .collect();
        let mut fetched = if pending.is_empty() {
            Vec::new()
        } else {
            let resp: EmbedResponse = transport::post_json(
                &self.client,
                &self.url,
                self.token.as_deref(),
                &EmbedRequest { texts: &pending },
                &self.retry,
            )
            .await
            .map_err(|e| Error::ProviderUnavailable(e.to_string()))?;
            if resp.vectors.len() != pending.len() {
                return Err(Error::ProviderUnavailable(format!(
                    "expected {} vectors, got {}",
                    pending.len(),
                    resp.vectors.len()
                )));
            }
            resp.vectors
        }
        .into_iter();

        texts
            .iter()
            .map(|t| {
                if t.trim().is_empty() {
                    return Ok(EmbeddingVector::zeros(self.dim));
                }
                let v = fetched.next().expect("length checked");
                if v.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    });
                }
                Ok(EmbeddingVector::normalized(v))
            })
            .collect()
    }
}
