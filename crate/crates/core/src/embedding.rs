//! Text embeddings: the vector type and the pluggable backends.

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::OnceCell;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding dimension must be at least 2, got {0}")]
    TooSmall(usize),
    #[error("embedding has a non-finite entry")]
    NonFinite,
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("text has no tokens to embed")]
    EmptyText,
    #[error("embedding service: {0}")]
    Service(String),
}

/// Fixed-dimension real vector (`d >= 2`, finite entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, EmbeddingError> {
        if values.len() < 2 {
            return Err(EmbeddingError::TooSmall(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self { values })
    }

    /// Builds and L2-normalizes in one step.
    pub fn unit(values: Vec<T>) -> Result<Self, EmbeddingError> {
        Self::new(values)?.normalized()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self, EmbeddingError> {
        let n = self.norm();
        if n == T::zero() || !n.is_finite() {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(Self {
            values: self.values.iter().map(|v| *v / n).collect(),
        })
    }

    pub fn dot(&self, other: &Self) -> Result<T, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| *a * *b)
            .sum())
    }

    /// Cosine similarity, clamped to `[-1, 1]`.
    pub fn cosine(&self, other: &Self) -> Result<T, EmbeddingError> {
        let d = self.dot(other)?;
        let n = self.norm() * other.norm();
        if n == T::zero() {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok((d / n).clamp_to(-T::one(), T::one()))
    }

    pub fn add_scaled(&self, other: &Self, alpha: T) -> Result<Self, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| *a + alpha * *b)
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingVector<U> {
        EmbeddingVector {
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Text-to-vector backend. Same text must map to the same vector for a
/// given backend version; implementations must tolerate concurrent calls.
#[async_trait]
pub trait EmbeddingBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    async fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, EmbeddingError>;

    async fn embed_batch(
        &self,
        texts: &[String],
    ) -> Result<Vec<EmbeddingVector<f64>>, EmbeddingError> {
        let mut out = Vec::with_capacity(texts.len());
        for t in texts {
            out.push(self.embed(t).await?);
        }
        Ok(out)
    }
}

pub const DEFAULT_HASHING_DIM: usize = 64;

/// Deterministic signed bag-of-tokens embedder.
///
/// Tokens are lowercase alphanumeric runs. Each token adds `±1` to bucket
/// `fnv1a(token) % dim`, sign from the hash's top bit; the result is
/// L2-normalized. Texts with disjoint vocabularies land near cosine 0.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    id: String,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASHING_DIM)
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim: dim.max(2),
            id: format!("hashing-v1-d{}", dim.max(2)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
    }

    pub fn embed_sync(&self, text: &str) -> Result<EmbeddingVector<f64>, EmbeddingError> {
        let mut values = vec![0.0f64; self.dim];
        let mut any = false;
        for tok in Self::tokens(text) {
            any = true;
            let h = fnv1a(tok.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            values[bucket] += sign;
        }
        if !any {
            return Err(EmbeddingError::EmptyText);
        }
        EmbeddingVector::unit(values)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

#[async_trait]
impl EmbeddingBackend for HashingEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, EmbeddingError> {
        self.embed_sync(text)
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct InfoResponse {
    dimension: usize,
}

/// Client for an external embedding service.
///
/// `GET {base}/info` returns `{"dimension": d}`; `POST {base}/embed` with
/// `{"texts": [...]}` returns `{"vectors": [[...], ...]}`.
pub struct HttpEmbeddingClient {
    base_url: String,
    http: reqwest::Client,
    dimension: OnceCell<usize>,
    id: String,
}

impl HttpEmbeddingClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let base_url = base_url.into().trim_end_matches('/').to_string();
        Self {
            id: format!("http:{base_url}"),
            base_url,
            http: reqwest::Client::new(),
            dimension: OnceCell::new(),
        }
    }

    pub async fn dimension(&self) -> Result<usize, EmbeddingError> {
        self.dimension
            .get_or_try_init(|| async {
                let info: InfoResponse = self
                    .http
                    .get(format!("{}/info", self.base_url))
                    .send()
                    .await
                    .and_then(|r| r.error_for_status())
                    .map_err(|e| EmbeddingError::Service(e.to_string()))?
                    .json()
                    .await
                    .map_err(|e| EmbeddingError::Service(e.to_string()))?;
                if info.dimension < 2 {
                    return Err(EmbeddingError::TooSmall(info.dimension));
                }
                Ok(info.dimension)
            })
            .await
            .copied()
    }
}

#[async_trait]
impl EmbeddingBackend for HttpEmbeddingClient {
    fn backend_id(&self) -> &str {
        &self.id
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, EmbeddingError> {
        let mut v = self.embed_batch(&[text.to_string()]).await?;
        v.pop()
            .ok_or_else(|| EmbeddingError::Service("empty response".into()))
    }

    async fn embed_batch(
        &self,
        texts: &[String],
    ) -> Result<Vec<EmbeddingVector<f64>>, EmbeddingError> {
        let dim = self.dimension().await?;
        let resp: EmbedResponse = self
            .http
            .post(format!("{}/embed", self.base_url))
            .json(&EmbedRequest { texts })
            .send()
            .await
            .and_then(|r| r.error_for_status())
            .map_err(|e| EmbeddingError::Service(e.to_string()))?
            .json()
            .await
            .map_err(|e| EmbeddingError::Service(e.to_string()))?;
        if resp.vectors.len() != texts.len() {
            return Err(EmbeddingError::Service(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(EmbeddingError::DimensionMismatch(dim, v.len()));
                }
                EmbeddingVector::unit(v)
            })
            .collect()
    }
}
