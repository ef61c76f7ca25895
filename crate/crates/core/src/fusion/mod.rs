//! Prompt construction and fused greedy decoding.

pub mod decode;
pub mod prompt;

use serde::{Deserialize, Serialize};

use crate::domain::TokenDistribution;
use crate::error::{Error, Result};

pub use decode::{decode_joint, decode_single, greedy_step, ContextsUsed, DecodeResult};
pub use prompt::Augmentation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    CoarseOnly,
    FineOnly,
    #[default]
    ProbabilityLevel,
    InstanceLevel,
}

impl FusionMode {
    pub const ALL: [Self; 4] = [Self::CoarseOnly, Self::FineOnly, Self::ProbabilityLevel, Self::InstanceLevel];

    pub fn name(self) -> &'static str {
        match self {
            Self::CoarseOnly => "coarse_only",
            Self::FineOnly => "fine_only",
            Self::ProbabilityLevel => "probability_level",
            Self::InstanceLevel => "instance_level",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown fusion mode '{s}'")))
    }
}

/// Fusion weight for binary existence workloads.
pub const ALPHA_BINARY: f64 = 0.8;
/// Fusion weight for open-ended and multiple-choice workloads.
pub const ALPHA_GENERAL: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Weight of the coarse distribution; only read in probability-level mode.
    pub alpha: f64,
    pub max_tokens: usize,
    pub augmentation: Augmentation,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { mode: FusionMode::default(), alpha: ALPHA_BINARY, max_tokens: 16, augmentation: Augmentation::default() }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::AlphaOutOfRange(alpha))
    }
}

/// `alpha * p_coarse + (1 - alpha) * p_fine`, elementwise.
pub fn fuse(p_coarse: &TokenDistribution, p_fine: &TokenDistribution, alpha: f64) -> Result<TokenDistribution> {
    check_alpha(alpha)?;
    if p_coarse.len() != p_fine.len() {
        return Err(Error::LengthMismatch { left: p_coarse.len(), right: p_fine.len() });
    }
    let beta = 1.0 - alpha;
    let probs = p_coarse.probs().iter().zip(p_fine.probs()).map(|(c, f)| alpha * c + beta * f).collect();
    Ok(TokenDistribution::new_unchecked(probs))
}
