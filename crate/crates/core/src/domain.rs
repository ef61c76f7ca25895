//! Value types shared by every stage of the engine, plus the handful of
//! numeric primitives (normalization, cosine, distribution checks) they need.

use serde::{Deserialize, Serialize};

use crate::error::{DistributionViolation, Error, Result};

/// Tolerance used when checking that a distribution sums to one.
pub const DISTRIBUTION_SUM_TOLERANCE: f64 = 1e-6;

/// Tolerance used when deciding whether a vector is unit length.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// A dense, finite embedding of an image, region, or text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, actual: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    /// Rounds every component to the nearest `f32`. Index persistence stores
    /// single precision, so entries are snapped at build time to make
    /// save/load lossless.
    pub fn to_f32_precision(&self) -> Self {
        Self { values: self.values.iter().map(|&v| v as f32 as f64).collect() }
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector { values: v.values.iter().map(|x| x / norm).collect() })
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Index into a backend vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub surface: String,
}

impl Token {
    pub fn new(id: usize, surface: impl Into<String>) -> Self {
        Self { id: TokenId(id), surface: surface.into() }
    }
}

/// Checks the invariants of a next-token distribution.
pub fn validate_distribution(probs: &[f64]) -> std::result::Result<(), DistributionViolation> {
    if probs.is_empty() {
        return Err(DistributionViolation::Empty);
    }
    for (index, &p) in probs.iter().enumerate() {
        if !p.is_finite() {
            return Err(DistributionViolation::NonFinite { index });
        }
        if p < 0.0 {
            return Err(DistributionViolation::Negative { index, value: p });
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOLERANCE {
        return Err(DistributionViolation::Sum { sum });
    }
    Ok(())
}

/// Probability vector over a vocabulary, stored in linear space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_distribution(&probs).map_err(Error::InvalidDistribution)?;
        Ok(Self { probs })
    }

    /// Builds a distribution without validating it; callers are expected to
    /// run [`TokenDistribution::validate`] before using it.
    pub fn new_unchecked(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn validate(&self) -> Result<()> {
        validate_distribution(&self.probs).map_err(Error::InvalidDistribution)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs.get(id.0).copied().unwrap_or(0.0)
    }
}

impl TryFrom<Vec<f64>> for TokenDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<TokenDistribution> for Vec<f64> {
    fn from(d: TokenDistribution) -> Self {
        d.probs
    }
}

/// A generated answer with the probability the backend gave each chosen token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerTrace {
    pub tokens: Vec<Token>,
    pub token_probs: Vec<f64>,
}

impl AnswerTrace {
    pub fn new(tokens: Vec<Token>, token_probs: Vec<f64>) -> Result<Self> {
        if tokens.len() != token_probs.len() {
            return Err(Error::LengthMismatch { left: tokens.len(), right: token_probs.len() });
        }
        if tokens.is_empty() {
            return Err(Error::EmptyTrace);
        }
        Ok(Self { tokens, token_probs })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Whitespace-joined token surfaces.
    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.surface.as_str()).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Coarse,
    Fine,
}

/// One image-caption (coarse) or region-caption (fine) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub id: String,
    pub image_uri: String,
    pub caption: String,
    pub image_embedding: EmbeddingVector,
    pub caption_embedding: EmbeddingVector,
    pub granularity: Granularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_image_uri: Option<String>,
}

impl KnowledgeEntry {
    pub fn validate(&self) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::Parse(format!("entry {} has an empty caption", self.id)));
        }
        check_dims(self.image_embedding.dim(), self.caption_embedding.dim())
    }
}

/// A grounded entity box in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub entity: String,
}

impl Region {
    pub fn new(x: u32, y: u32, w: u32, h: u32, entity: impl Into<String>) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::Parse("region must have positive width and height".into()));
        }
        Ok(Self { x, y, w, h, entity: entity.into() })
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x as u64 + self.w as u64 <= width as u64 && self.y as u64 + self.h as u64 <= height as u64
    }
}
