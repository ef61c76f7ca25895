//! Contracts for the external capabilities the engine depends on: a
//! vision-language model that can generate and score, an embedding provider,
//! and an entity grounder. Deterministic mocks live in [`mock`]; [`remote`]
//! and [`server`] speak the JSON wire protocol.

pub mod mock;
pub mod remote;
pub mod server;
pub mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::domain::{AnswerTrace, EmbeddingVector, Region, Token, TokenDistribution, TokenId};
use crate::error::{Error, Result};
use crate::fusion::prompt::{Augmentation, PromptPart};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationContext {
    pub parts: Vec<PromptPart>,
    pub image_included: bool,
    /// 0 is the clean image; larger values request a distorted copy.
    #[serde(default)]
    pub distortion_level: f64,
}

impl GenerationContext {
    pub fn with_image(parts: Vec<PromptPart>) -> Self {
        Self { parts, image_included: true, distortion_level: 0.0 }
    }

    pub fn text_only(parts: Vec<PromptPart>) -> Self {
        Self { parts, image_included: false, distortion_level: 0.0 }
    }

    pub fn distorted(parts: Vec<PromptPart>, level: f64) -> Self {
        Self { parts, image_included: true, distortion_level: level }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.distortion_level) {
            return Err(Error::UnsupportedContext(format!(
                "distortion level {} outside [0, 1]",
                self.distortion_level
            )));
        }
        if self.distortion_level > 0.0 && !self.image_included {
            return Err(Error::UnsupportedContext("distortion requested without an image".into()));
        }
        Ok(())
    }

    pub fn has_retrieved_images(&self) -> bool {
        self.parts.iter().any(|p| {
            matches!(p, PromptPart::PairBlock { augmentation: Augmentation::ImageAndText, pairs } if !pairs.is_empty())
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    Reentrant,
    SingleFlight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    /// Token surfaces, indexed by token id.
    pub vocabulary: Vec<String>,
    pub eos_token: TokenId,
    pub supports_multi_image: bool,
    pub concurrency: Concurrency,
}

impl BackendDescriptor {
    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn token(&self, id: TokenId) -> Token {
        Token { id, surface: self.vocabulary.get(id.0).cloned().unwrap_or_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.len() < 2 {
            return Err(Error::Config(format!("backend {} has a vocabulary below 2 tokens", self.name)));
        }
        if self.eos_token.0 >= self.vocabulary.len() {
            return Err(Error::Config(format!("backend {} eos token out of range", self.name)));
        }
        Ok(())
    }
}

/// A vision-language model with greedy generation and teacher-forced scoring.
pub trait Lvlm: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn generate(&self, ctx: &GenerationContext, max_tokens: usize) -> Result<AnswerTrace>;

    /// Probability of each answer token given the context and the preceding answer tokens.
    fn score(&self, ctx: &GenerationContext, answer: &[Token]) -> Result<Vec<f64>>;

    fn next_distribution(&self, ctx: &GenerationContext, prefix: &[Token]) -> Result<TokenDistribution>;
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_image(&self, image_uri: &str, region: Option<&Region>) -> Result<EmbeddingVector>;
}

pub trait Grounder: Send + Sync {
    fn extract_entities(&self, query: &str) -> Result<Vec<String>>;

    fn ground(&self, image_uri: &str, entity: &str) -> Result<Option<Region>>;
}

/// Greedy generation on top of `next_distribution`, shared by backends that
/// have no native generate.
///
/// Stops at the end-of-sequence token, which is not appended unless it is the
/// very first token chosen (an answer is never empty).
pub fn greedy_generate<L: Lvlm + ?Sized>(lvlm: &L, ctx: &GenerationContext, max_tokens: usize) -> Result<AnswerTrace> {
    let desc = lvlm.descriptor();
    let mut tokens = Vec::new();
    let mut probs = Vec::new();
    for _ in 0..max_tokens.max(1) {
        let dist = lvlm.next_distribution(ctx, &tokens)?;
        dist.validate()?;
        let id = crate::fusion::decode::greedy_step(&dist);
        if id == desc.eos_token && !tokens.is_empty() {
            break;
        }
        probs.push(dist.prob(id));
        tokens.push(desc.token(id));
        if id == desc.eos_token {
            break;
        }
    }
    AnswerTrace::new(tokens, probs)
}

/// Teacher-forced scoring on top of `next_distribution`.
pub fn teacher_forced_score<L: Lvlm + ?Sized>(lvlm: &L, ctx: &GenerationContext, answer: &[Token]) -> Result<Vec<f64>> {
    if answer.is_empty() {
        return Err(Error::EmptyTrace);
    }
    (0..answer.len()).map(|t| Ok(lvlm.next_distribution(ctx, &answer[..t])?.prob(answer[t].id))).collect()
}

/// Per-query backend call counts.
#[derive(Debug, Default)]
pub struct CallCounter {
    generate: AtomicU64,
    score: AtomicU64,
    distribution: AtomicU64,
    embed: AtomicU64,
    ground: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallStats {
    pub generate: u64,
    pub score: u64,
    pub distribution: u64,
    pub embed: u64,
    pub ground: u64,
}

impl CallStats {
    /// Calls that produce tokens (`generate` plus per-step `next_distribution`).
    pub fn generation_calls(&self) -> u64 {
        self.generate + self.distribution
    }

    pub fn total(&self) -> u64 {
        self.generate + self.score + self.distribution + self.embed + self.ground
    }
}

impl std::ops::AddAssign for CallStats {
    fn add_assign(&mut self, o: Self) {
        self.generate += o.generate;
        self.score += o.score;
        self.distribution += o.distribution;
        self.embed += o.embed;
        self.ground += o.ground;
    }
}

impl CallCounter {
    pub fn snapshot(&self) -> CallStats {
        CallStats {
            generate: self.generate.load(Ordering::Relaxed),
            score: self.score.load(Ordering::Relaxed),
            distribution: self.distribution.load(Ordering::Relaxed),
            embed: self.embed.load(Ordering::Relaxed),
            ground: self.ground.load(Ordering::Relaxed),
        }
    }
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

/// Borrowed view of the three adapters that counts every call.
pub struct Counted<'a> {
    adapters: &'a Adapters,
    counter: CallCounter,
}

impl<'a> Counted<'a> {
    pub fn new(adapters: &'a Adapters) -> Self {
        Self { adapters, counter: CallCounter::default() }
    }

    pub fn stats(&self) -> CallStats {
        self.counter.snapshot()
    }

    pub fn adapters(&self) -> &'a Adapters {
        self.adapters
    }
}

impl Lvlm for Counted<'_> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.adapters.lvlm.descriptor()
    }

    fn generate(&self, ctx: &GenerationContext, max_tokens: usize) -> Result<AnswerTrace> {
        bump(&self.counter.generate);
        self.adapters.lvlm.generate(ctx, max_tokens)
    }

    fn score(&self, ctx: &GenerationContext, answer: &[Token]) -> Result<Vec<f64>> {
        bump(&self.counter.score);
        self.adapters.lvlm.score(ctx, answer)
    }

    fn next_distribution(&self, ctx: &GenerationContext, prefix: &[Token]) -> Result<TokenDistribution> {
        bump(&self.counter.distribution);
        self.adapters.lvlm.next_distribution(ctx, prefix)
    }
}

impl Embedder for Counted<'_> {
    fn dim(&self) -> usize {
        self.adapters.embedder.dim()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        bump(&self.counter.embed);
        self.adapters.embedder.embed_text(text)
    }

    fn embed_image(&self, image_uri: &str, region: Option<&Region>) -> Result<EmbeddingVector> {
        bump(&self.counter.embed);
        self.adapters.embedder.embed_image(image_uri, region)
    }
}

impl Grounder for Counted<'_> {
    fn extract_entities(&self, query: &str) -> Result<Vec<String>> {
        bump(&self.counter.ground);
        self.adapters.grounder.extract_entities(query)
    }

    fn ground(&self, image_uri: &str, entity: &str) -> Result<Option<Region>> {
        bump(&self.counter.ground);
        self.adapters.grounder.ground(image_uri, entity)
    }
}

/// Serializes every call into a single-flight backend.
pub struct SingleFlight<L> {
    inner: L,
    gate: Mutex<()>,
}

impl<L: Lvlm> SingleFlight<L> {
    pub fn new(inner: L) -> Self {
        Self { inner, gate: Mutex::new(()) }
    }

    fn hold(&self) -> std::sync::MutexGuard<'_, ()> {
        self.gate.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl<L: Lvlm> Lvlm for SingleFlight<L> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn generate(&self, ctx: &GenerationContext, max_tokens: usize) -> Result<AnswerTrace> {
        let _g = self.hold();
        self.inner.generate(ctx, max_tokens)
    }

    fn score(&self, ctx: &GenerationContext, answer: &[Token]) -> Result<Vec<f64>> {
        let _g = self.hold();
        self.inner.score(ctx, answer)
    }

    fn next_distribution(&self, ctx: &GenerationContext, prefix: &[Token]) -> Result<TokenDistribution> {
        let _g = self.hold();
        self.inner.next_distribution(ctx, prefix)
    }
}

impl<L: Lvlm + ?Sized> Lvlm for Arc<L> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn generate(&self, ctx: &GenerationContext, max_tokens: usize) -> Result<AnswerTrace> {
        (**self).generate(ctx, max_tokens)
    }

    fn score(&self, ctx: &GenerationContext, answer: &[Token]) -> Result<Vec<f64>> {
        (**self).score(ctx, answer)
    }

    fn next_distribution(&self, ctx: &GenerationContext, prefix: &[Token]) -> Result<TokenDistribution> {
        (**self).next_distribution(ctx, prefix)
    }
}

/// The adapter set one pipeline run uses.
#[derive(Clone)]
pub struct Adapters {
    pub lvlm: Arc<dyn Lvlm>,
    pub embedder: Arc<dyn Embedder>,
    pub grounder: Arc<dyn Grounder>,
}

impl Adapters {
    /// Wraps single-flight backends so the engine never calls them concurrently.
    pub fn new(lvlm: Arc<dyn Lvlm>, embedder: Arc<dyn Embedder>, grounder: Arc<dyn Grounder>) -> Result<Self> {
        lvlm.descriptor().validate()?;
        let lvlm: Arc<dyn Lvlm> = match lvlm.descriptor().concurrency {
            Concurrency::Reentrant => lvlm,
            Concurrency::SingleFlight => Arc::new(SingleFlight::new(lvlm)),
        };
        Ok(Self { lvlm, embedder, grounder })
    }

    /// Mock backends over one fixture world.
    pub fn mock(world: Arc<mock::MockWorld>) -> Self {
        Self {
            lvlm: Arc::new(mock::MockLvlm::new(world.clone())),
            embedder: Arc::new(mock::MockEmbedder::new(world.clone())),
            grounder: Arc::new(mock::MockGrounder::new(world)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_validation() {
        assert!(GenerationContext::with_image(vec![]).validate().is_ok());
        let bad = GenerationContext { parts: vec![], image_included: false, distortion_level: 0.5 };
        assert!(matches!(bad.validate(), Err(Error::UnsupportedContext(_))));
        assert!(GenerationContext::distorted(vec![], 1.5).validate().is_err());
    }

    #[test]
    fn descriptor_validation() {
        let mut d = BackendDescriptor {
            name: "t".into(),
            vocabulary: vec!["<eos>".into()],
            eos_token: TokenId(0),
            supports_multi_image: false,
            concurrency: Concurrency::Reentrant,
        };
        assert!(d.validate().is_err());
        d.vocabulary.push("yes".into());
        assert!(d.validate().is_ok());
        assert_eq!(d.token(TokenId(1)).surface, "yes");
    }

    #[test]
    fn stats_sum() {
        let mut a = CallStats { generate: 1, score: 2, distribution: 3, embed: 4, ground: 5 };
        a += a;
        assert_eq!(a.generation_calls(), 8);
        assert_eq!(a.total(), 30);
    }
}
