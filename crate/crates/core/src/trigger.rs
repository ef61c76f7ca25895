//! Difficulty metrics that decide whether a query should retrieve.
//!
//! All three metrics fire when their value falls strictly below `theta`:
//!
//! - confidence: lowest per-token probability of the preliminary answer;
//! - query-aware: `ln P(a | image, query) - ln P(a | query)`;
//! - image-aware: `ln P(a | image, query) - ln P(a | distorted image, query)`.
//!
//! Log-ratio metrics are computed per token and then aggregated.

use serde::{Deserialize, Serialize};

use crate::domain::AnswerTrace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    ConfidenceAware,
    QueryAware,
    ImageAware,
    /// Retrieve for every query; skips the preliminary answer.
    Always,
    /// Never retrieve.
    Never,
}

impl TriggerKind {
    /// Default threshold for each metric before any grid search.
    pub fn default_theta(self) -> f64 {
        match self {
            Self::ConfidenceAware => 0.5,
            _ => 0.0,
        }
    }

    pub fn has_metric(self) -> bool {
        matches!(self, Self::ConfidenceAware | Self::QueryAware | Self::ImageAware)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    pub kind: TriggerKind,
    pub theta: f64,
    pub aggregation: Aggregation,
    /// Distortion level used for the image-aware condition.
    pub distortion_level: f64,
}

impl TriggerConfig {
    pub fn new(kind: TriggerKind, theta: f64) -> Result<Self> {
        let cfg = Self { kind, theta, aggregation: Aggregation::Mean, distortion_level: 1.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.is_nan() {
            return Err(Error::Config("trigger theta is NaN".into()));
        }
        if self.kind == TriggerKind::ConfidenceAware && !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("confidence theta {} outside [0, 1]", self.theta)));
        }
        if !(self.distortion_level > 0.0 && self.distortion_level <= 1.0) {
            return Err(Error::Config(format!("distortion level {} outside (0, 1]", self.distortion_level)));
        }
        Ok(())
    }
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            kind: TriggerKind::QueryAware,
            theta: TriggerKind::QueryAware.default_theta(),
            aggregation: Aggregation::Mean,
            distortion_level: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerDecision {
    pub metric_value: f64,
    pub triggered: bool,
    pub kind: TriggerKind,
}

pub fn confidence_metric(trace: &AnswerTrace) -> Result<f64> {
    trace.token_probs.iter().copied().reduce(f64::min).ok_or(Error::EmptyTrace)
}

fn log_ratio_metric(with_image: &[f64], other: &[f64], aggregation: Aggregation) -> Result<f64> {
    if with_image.len() != other.len() {
        return Err(Error::LengthMismatch { left: with_image.len(), right: other.len() });
    }
    if with_image.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut ratios = Vec::with_capacity(with_image.len());
    for (index, (&a, &b)) in with_image.iter().zip(other).enumerate() {
        for p in [a, b] {
            if p == 0.0 {
                return Err(Error::ZeroProbability { index });
            }
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::ProbabilityOutOfRange { index, value: p });
            }
        }
        ratios.push(a.ln() - b.ln());
    }
    Ok(match aggregation {
        Aggregation::Mean => ratios.iter().sum::<f64>() / ratios.len() as f64,
        Aggregation::Min => ratios.into_iter().fold(f64::INFINITY, f64::min),
    })
}

/// Per-token `ln P(a|V,Q) - ln P(a|Q)`, aggregated.
pub fn query_aware_metric(probs_vq: &[f64], probs_q: &[f64], aggregation: Aggregation) -> Result<f64> {
    log_ratio_metric(probs_vq, probs_q, aggregation)
}

/// Per-token `ln P(a|V,Q) - ln P(a|V',Q)`, aggregated.
pub fn image_aware_metric(probs_vq: &[f64], probs_noisy: &[f64], aggregation: Aggregation) -> Result<f64> {
    log_ratio_metric(probs_vq, probs_noisy, aggregation)
}

pub fn decide(metric_value: f64, config: &TriggerConfig) -> TriggerDecision {
    let triggered = match config.kind {
        TriggerKind::Always => true,
        TriggerKind::Never => false,
        _ => metric_value < config.theta,
    };
    TriggerDecision { metric_value, triggered, kind: config.kind }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Token;
    use proptest::prelude::*;

    fn trace(probs: &[f64]) -> AnswerTrace {
        let tokens = (0..probs.len()).map(|i| Token::new(i, format!("t{i}"))).collect();
        AnswerTrace::new(tokens, probs.to_vec()).unwrap()
    }

    fn cfg(kind: TriggerKind, theta: f64) -> TriggerConfig {
        TriggerConfig { kind, theta, ..Default::default() }
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence_metric(&trace(&[0.9, 0.55, 0.8])).unwrap(), 0.55);
        assert_eq!(confidence_metric(&trace(&[1.0])).unwrap(), 1.0);
        assert!(decide(0.55, &cfg(TriggerKind::ConfidenceAware, 0.6)).triggered);
        let empty = AnswerTrace { tokens: vec![], token_probs: vec![] };
        assert!(matches!(confidence_metric(&empty), Err(Error::EmptyTrace)));
    }

    #[test]
    fn query_aware_examples() {
        let p = [0.3, 0.7, 0.5];
        assert_eq!(query_aware_metric(&p, &p, Aggregation::Mean).unwrap(), 0.0);
        let single = query_aware_metric(&[0.8], &[0.4], Aggregation::Mean).unwrap();
        assert!((single - std::f64::consts::LN_2).abs() < 1e-12);
        let two = query_aware_metric(&[0.9, 0.5], &[0.3, 0.5], Aggregation::Mean).unwrap();
        assert!((two - 0.549306).abs() < 1e-6);
        assert!((two - 3f64.ln() / 2.0).abs() < 1e-12);
        assert_eq!(query_aware_metric(&[0.9, 0.5], &[0.3, 0.5], Aggregation::Min).unwrap(), 0.0);
    }

    #[test]
    fn image_aware_examples() {
        assert_eq!(image_aware_metric(&[0.4, 0.6], &[0.4, 0.6], Aggregation::Mean).unwrap(), 0.0);
        let m = image_aware_metric(&[0.9, 0.6], &[0.9, 0.2], Aggregation::Mean).unwrap();
        assert!((m - 0.549306).abs() < 1e-6);
        assert!(image_aware_metric(&[0.1, 0.2], &[0.3, 0.25], Aggregation::Mean).unwrap() < 0.0);
        assert!(image_aware_metric(&[0.1, 0.2], &[0.3, 0.25], Aggregation::Min).unwrap() < 0.0);
    }

    #[test]
    fn log_ratio_errors() {
        assert!(matches!(
            query_aware_metric(&[0.5], &[0.5, 0.5], Aggregation::Mean),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            query_aware_metric(&[0.5, 0.0], &[0.5, 0.5], Aggregation::Mean),
            Err(Error::ZeroProbability { index: 1 })
        ));
        assert!(matches!(query_aware_metric(&[], &[], Aggregation::Mean), Err(Error::EmptyTrace)));
        assert!(query_aware_metric(&[1.5], &[0.5], Aggregation::Mean).is_err());
    }

    #[test]
    fn decide_examples() {
        assert!(decide(0.0, &cfg(TriggerKind::QueryAware, 0.1)).triggered);
        assert!(!decide(0.7, &cfg(TriggerKind::QueryAware, 0.1)).triggered);
        assert!(decide(-0.2, &cfg(TriggerKind::ImageAware, 0.0)).triggered);
        for m in [0.0, 0.3, 0.999, 1.0] {
            assert!(!decide(m, &cfg(TriggerKind::ConfidenceAware, 0.0)).triggered);
        }
        for m in [0.0, 0.3, 0.999] {
            assert!(decide(m, &cfg(TriggerKind::ConfidenceAware, 1.0)).triggered);
        }
        assert!(decide(f64::NAN, &cfg(TriggerKind::Always, 0.0)).triggered);
        assert!(!decide(-100.0, &cfg(TriggerKind::Never, 0.0)).triggered);
    }

    #[test]
    fn config_validation() {
        assert!(TriggerConfig::new(TriggerKind::ConfidenceAware, 1.2).is_err());
        assert!(TriggerConfig::new(TriggerKind::QueryAware, -3.0).is_ok());
        assert!(TriggerConfig::new(TriggerKind::QueryAware, f64::NEG_INFINITY).is_ok());
        assert_eq!(TriggerKind::ConfidenceAware.default_theta(), 0.5);
        assert_eq!(TriggerKind::ImageAware.default_theta(), 0.0);
    }

    fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..=1.0, n)
    }

    proptest! {
        #[test]
        fn query_metric_antisymmetric((a, b) in (1usize..8).prop_flat_map(|n| (probs(n), probs(n)))) {
            let ab = query_aware_metric(&a, &b, Aggregation::Mean).unwrap();
            let ba = query_aware_metric(&b, &a, Aggregation::Mean).unwrap();
            prop_assert!((ab + ba).abs() < 1e-12);
            // Min of the negated ratios is minus the max, so only Mean is
            // antisymmetric; Min flips sign bounds instead.
            let min_ab = query_aware_metric(&a, &b, Aggregation::Min).unwrap();
            let min_ba = query_aware_metric(&b, &a, Aggregation::Min).unwrap();
            prop_assert!(min_ab <= -min_ba + 1e-12);
        }

        #[test]
        fn equal_token_pulls_mean_toward_zero(
            (a, b) in (1usize..8).prop_flat_map(|n| (probs(n), probs(n))),
            p in 0.01f64..1.0,
        ) {
            let mean = query_aware_metric(&a, &b, Aggregation::Mean).unwrap();
            let min = query_aware_metric(&a, &b, Aggregation::Min).unwrap();
            let (mut a2, mut b2) = (a.clone(), b.clone());
            a2.push(p);
            b2.push(p);
            let mean2 = query_aware_metric(&a2, &b2, Aggregation::Mean).unwrap();
            let min2 = query_aware_metric(&a2, &b2, Aggregation::Min).unwrap();
            prop_assert!(mean2.abs() <= mean.abs() + 1e-12);
            prop_assert!(mean2 * mean >= 0.0);
            if min < 0.0 { prop_assert!(min2 < 0.0); }
            if min > 0.0 { prop_assert!(min2 >= 0.0); }
        }

        #[test]
        fn trigger_fraction_monotone_in_theta(
            metrics in prop::collection::vec(-3.0f64..3.0, 1..60),
            mut thetas in prop::collection::vec(-4.0f64..4.0, 2..10),
        ) {
            thetas.sort_by(f64::total_cmp);
            for kind in [TriggerKind::QueryAware, TriggerKind::ImageAware, TriggerKind::ConfidenceAware] {
                let fractions: Vec<usize> = thetas
                    .iter()
                    .map(|&t| metrics.iter().filter(|&&m| decide(m, &cfg(kind, t)).triggered).count())
                    .collect();
                prop_assert!(fractions.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }
}
