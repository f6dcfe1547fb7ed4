//! Dense feature vectors.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

/// A `d`-dimensional feature vector. Arithmetic is done in `f64`; the wire and
/// cache formats carry `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding has a non-finite entry at {0}")]
    NonFinite(usize),
    #[error("embedding is empty")]
    Empty,
    #[error("base64 payload: {0}")]
    Base64(String),
    #[error("payload length {0} is not a multiple of 4 bytes")]
    Misaligned(usize),
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self, EmbeddingError> {
        Self::new(values.iter().map(|&v| v as f64).collect())
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Unit vector along `axis`.
    pub fn one_hot(dim: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, k: f64) -> Embedding {
        Embedding(self.0.iter().map(|v| v * k).collect())
    }

    /// Cosine similarity; zero when either side has zero norm.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }

    /// The same vector rounded to `f32` precision, i.e. exactly what survives
    /// the wire and the matrix file. Values beyond the `f32` range saturate.
    pub fn rounded_to_f32(&self) -> Embedding {
        Embedding(
            self.0
                .iter()
                .map(|&v| v.clamp(f32::MIN as f64, f32::MAX as f64) as f32 as f64)
                .collect(),
        )
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    /// Little-endian `f32` bytes, base64 encoded.
    pub fn to_base64(&self) -> String {
        let bytes: Vec<u8> = self.to_f32().iter().flat_map(|v| v.to_le_bytes()).collect();
        STANDARD.encode(bytes)
    }

    pub fn from_base64(s: &str) -> Result<Self, EmbeddingError> {
        let bytes = STANDARD
            .decode(s)
            .map_err(|e| EmbeddingError::Base64(e.to_string()))?;
        if bytes.len() % 4 != 0 {
            return Err(EmbeddingError::Misaligned(bytes.len()));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_f32(&vals)
    }
}
