//! One query end to end: preliminary answer, trigger, retrieval, rerank,
//! fused decoding.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapters, CallStats, Counted, Embedder, GenerationContext, Grounder, Lvlm};
use crate::domain::{AnswerTrace, EmbeddingVector, Region};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fusion::prompt::{
    build_coarse_prompt, build_describe_prompt, build_instance_prompt, build_plain_prompt, build_query_only_prompt,
};
use crate::fusion::{decode_joint, decode_single, ContextsUsed, DecodeResult, FusionConfig, FusionMode};
use crate::index::ScoredHit;
use crate::rerank::{caption_rerank, k_reciprocal_rerank, truncate, RerankMethod};
use crate::retriever::{assemble, KnowledgeIndex, QueryContext, RetrievalBundle, RetrievalModality, RetrievalPlan};
use crate::trigger::{
    confidence_metric, decide, image_aware_metric, query_aware_metric, TriggerConfig, TriggerDecision, TriggerKind,
};

/// Token budget for captions generated for reranking.
pub const CAPTION_MAX_TOKENS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub trigger: TriggerConfig,
    pub modality: RetrievalModality,
    pub k_coarse: usize,
    pub k_fine: usize,
    pub truncate_n: usize,
    pub rerank: RerankMethod,
    pub fusion: FusionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            trigger: TriggerConfig::default(),
            modality: RetrievalModality::default(),
            k_coarse: 3,
            k_fine: 3,
            truncate_n: 3,
            rerank: RerankMethod::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.trigger.validate()?;
        self.rerank.validate()?;
        self.fusion.validate()?;
        if self.k_coarse == 0 || self.k_fine == 0 || self.truncate_n == 0 {
            return Err(Error::Config("k_coarse, k_fine and truncate_n must be at least 1".into()));
        }
        if self.truncate_n > self.k_coarse || self.truncate_n > self.k_fine {
            return Err(Error::Config(format!(
                "truncate_n {} exceeds k_coarse {} or k_fine {}",
                self.truncate_n, self.k_coarse, self.k_fine
            )));
        }
        Ok(())
    }
}

/// Coarse and optional fine knowledge bases.
#[derive(Debug, Clone)]
pub struct Indices {
    pub coarse: KnowledgeIndex,
    pub fine: Option<KnowledgeIndex>,
}

/// The preliminary `(image, query)` answer and its trigger metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preliminary {
    pub trace: AnswerTrace,
    /// `None` for trigger kinds without a metric.
    pub metric_value: Option<f64>,
}

/// Output of the retrieval branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmented {
    pub result: DecodeResult,
    pub coarse_ids: Vec<String>,
    /// Entity and its fine hit ids, for the entity used in decoding.
    pub fine: Option<(String, Vec<String>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub result: DecodeResult,
    pub decision: TriggerDecision,
    pub coarse_ids: Vec<String>,
    pub fine: Option<(String, Vec<String>)>,
    pub calls: CallStats,
    #[serde(skip)]
    pub elapsed: Duration,
}

/// Generates the preliminary answer and, for metric-based kinds, scores it
/// under the metric's second condition.
pub fn preliminary(
    ctx: &QueryContext,
    trigger: &TriggerConfig,
    fusion: &FusionConfig,
    lvlm: &dyn Lvlm,
) -> Result<Preliminary> {
    let plain = GenerationContext::with_image(build_plain_prompt(ctx));
    let trace = lvlm.generate(&plain, fusion.max_tokens)?;
    let metric_value = match trigger.kind {
        TriggerKind::ConfidenceAware => Some(confidence_metric(&trace)?),
        TriggerKind::QueryAware => {
            let blind = GenerationContext::text_only(build_query_only_prompt(ctx));
            let probs_q = lvlm.score(&blind, &trace.tokens)?;
            Some(query_aware_metric(&trace.token_probs, &probs_q, trigger.aggregation)?)
        }
        TriggerKind::ImageAware => {
            let noisy = GenerationContext::distorted(plain.parts.clone(), trigger.distortion_level);
            let probs_noisy = lvlm.score(&noisy, &trace.tokens)?;
            Some(image_aware_metric(&trace.token_probs, &probs_noisy, trigger.aggregation)?)
        }
        TriggerKind::Always | TriggerKind::Never => None,
    };
    Ok(Preliminary { trace, metric_value })
}

fn describe(
    lvlm: &dyn Lvlm,
    embedder: &dyn Embedder,
    image_uri: &str,
    region: Option<&Region>,
) -> Result<EmbeddingVector> {
    let ctx = GenerationContext::with_image(build_describe_prompt(image_uri, region));
    let caption = lvlm.generate(&ctx, CAPTION_MAX_TOKENS)?;
    embedder.embed_text(&caption.text())
}

fn reorder(
    cfg: &PipelineConfig,
    hits: &[ScoredHit],
    query: impl FnOnce() -> Result<EmbeddingVector>,
    caption: impl FnOnce() -> Result<EmbeddingVector>,
) -> Result<Vec<ScoredHit>> {
    let ordered = match cfg.rerank {
        RerankMethod::None => hits.to_vec(),
        RerankMethod::CaptionSimilarity if hits.len() < 2 => hits.to_vec(),
        RerankMethod::CaptionSimilarity => caption_rerank(&caption()?, hits)?,
        RerankMethod::KReciprocal { .. } if hits.len() < 2 => hits.to_vec(),
        RerankMethod::KReciprocal { k1, k2, lambda } => {
            k_reciprocal_rerank(&query()?, hits, cfg.modality.target(), k1, k2, lambda)?
        }
    };
    Ok(truncate(&ordered, cfg.truncate_n))
}

fn ids(hits: &[ScoredHit]) -> Vec<String> {
    hits.iter().map(|h| h.id().to_owned()).collect()
}

/// Retrieval, rerank and decoding for one query, independent of the trigger.
pub fn augmented(
    ctx: &QueryContext,
    cfg: &PipelineConfig,
    indices: &Indices,
    lvlm: &dyn Lvlm,
    embedder: &dyn Embedder,
    grounder: &dyn Grounder,
    execution: Execution,
) -> Result<Augmented> {
    let plan = RetrievalPlan {
        coarse: &indices.coarse,
        fine: match cfg.fusion.mode {
            FusionMode::CoarseOnly => None,
            _ => indices.fine.as_ref(),
        },
        k_coarse: cfg.k_coarse,
        k_fine: cfg.k_fine,
        modality: cfg.modality,
        execution,
    };
    let bundle: RetrievalBundle = assemble(ctx, &plan, embedder, grounder)?;
    let coarse_query = || {
        if cfg.modality.source_is_image() {
            Ok(ctx.image_embedding.clone())
        } else {
            ctx.query_embedding.clone().ok_or(Error::MissingQueryEmbedding)
        }
    };
    let coarse = reorder(cfg, &bundle.coarse, coarse_query, || describe(lvlm, embedder, &ctx.image_uri, None))?;

    let fine = match bundle.primary_fine() {
        Some((entity, hits, region)) => {
            let query = || {
                if cfg.modality.source_is_image() {
                    embedder.embed_image(&ctx.image_uri, Some(region))
                } else {
                    embedder.embed_text(entity)
                }
            };
            let hits = reorder(cfg, hits, query, || describe(lvlm, embedder, &ctx.image_uri, Some(region)))?;
            Some((entity.to_owned(), hits))
        }
        None => None,
    };

    let aug = cfg.fusion.augmentation;
    let max = cfg.fusion.max_tokens;
    let coarse_ctx =
        || -> Result<GenerationContext> { Ok(GenerationContext::with_image(build_coarse_prompt(ctx, &coarse, aug)?)) };
    let (trace, used, degraded) = match (&fine, cfg.fusion.mode) {
        (_, FusionMode::CoarseOnly) => (decode_single(&coarse_ctx()?, lvlm, max)?, ContextsUsed::Coarse, false),
        (None, _) => (decode_single(&coarse_ctx()?, lvlm, max)?, ContextsUsed::Coarse, true),
        (Some((_, fine_hits)), FusionMode::FineOnly) => {
            let p = GenerationContext::with_image(build_coarse_prompt(ctx, fine_hits, aug)?);
            (decode_single(&p, lvlm, max)?, ContextsUsed::Fine, false)
        }
        (Some((_, fine_hits)), FusionMode::ProbabilityLevel) => {
            let p = GenerationContext::with_image(build_coarse_prompt(ctx, fine_hits, aug)?);
            let trace = decode_joint(&coarse_ctx()?, &p, lvlm, cfg.fusion.alpha, max, execution)?;
            (trace, ContextsUsed::CoarseAndFine, false)
        }
        (Some((entity, fine_hits)), FusionMode::InstanceLevel) => {
            let p = GenerationContext::with_image(build_instance_prompt(ctx, &coarse, fine_hits, entity, aug)?);
            (decode_single(&p, lvlm, max)?, ContextsUsed::Instance, false)
        }
    };
    Ok(Augmented {
        result: DecodeResult { trace, contexts_used: used, retrieval_used: true, degraded },
        coarse_ids: ids(&coarse),
        fine: fine.map(|(e, h)| (e, ids(&h))),
    })
}

/// Runs the full flow for one query.
pub fn run_query(
    ctx: &QueryContext,
    cfg: &PipelineConfig,
    indices: &Indices,
    adapters: &Adapters,
    execution: Execution,
) -> Result<QueryOutcome> {
    let start = Instant::now();
    let counted = Counted::new(adapters);
    let (decision, pre) = match cfg.trigger.kind {
        TriggerKind::Always => (decide(f64::NAN, &cfg.trigger), None),
        _ => {
            let pre = preliminary(ctx, &cfg.trigger, &cfg.fusion, &counted)?;
            (decide(pre.metric_value.unwrap_or(f64::NAN), &cfg.trigger), Some(pre))
        }
    };
    let (result, coarse_ids, fine) = match (decision.triggered, pre) {
        (false, Some(pre)) => (
            DecodeResult {
                trace: pre.trace,
                contexts_used: ContextsUsed::Plain,
                retrieval_used: false,
                degraded: false,
            },
            Vec::new(),
            None,
        ),
        _ => {
            let a = augmented(ctx, cfg, indices, &counted, &counted, &counted, execution)?;
            (a.result, a.coarse_ids, a.fine)
        }
    };
    Ok(QueryOutcome { result, decision, coarse_ids, fine, calls: counted.stats(), elapsed: start.elapsed() })
}
