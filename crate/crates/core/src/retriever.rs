//! Coarse (full image) and fine (entity region) retrieval.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{Embedder, Grounder};
use crate::domain::{EmbeddingVector, Granularity, Region};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::index::{KeyField, ScoredHit, VectorIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryContext {
    pub image_uri: String,
    pub image_embedding: EmbeddingVector,
    pub query_text: String,
    pub query_embedding: Option<EmbeddingVector>,
}

impl QueryContext {
    /// Embeds the image and the query text with `embedder`.
    pub fn embed(image_uri: &str, query_text: &str, embedder: &dyn Embedder) -> Result<Self> {
        Ok(Self {
            image_uri: image_uri.to_owned(),
            image_embedding: embedder.embed_image(image_uri, None)?,
            query_text: query_text.to_owned(),
            query_embedding: Some(embedder.embed_text(query_text)?),
        })
    }
}

/// Which side of the query is matched against which side of the knowledge base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalModality {
    #[default]
    ImageToImage,
    ImageToText,
    TextToText,
    TextToImage,
}

impl RetrievalModality {
    pub const ALL: [Self; 4] = [Self::TextToText, Self::TextToImage, Self::ImageToImage, Self::ImageToText];

    pub fn target(self) -> KeyField {
        match self {
            Self::ImageToImage | Self::TextToImage => KeyField::ImageEmbedding,
            Self::ImageToText | Self::TextToText => KeyField::CaptionEmbedding,
        }
    }

    pub fn source_is_image(self) -> bool {
        matches!(self, Self::ImageToImage | Self::ImageToText)
    }

    /// Text-to-image matching was markedly unreliable in ablations; results
    /// produced this way are flagged in reports.
    pub fn low_reliability(self) -> bool {
        self == Self::TextToImage
    }

    /// Config spelling.
    pub fn key(self) -> &'static str {
        match self {
            Self::ImageToImage => "image_to_image",
            Self::ImageToText => "image_to_text",
            Self::TextToText => "text_to_text",
            Self::TextToImage => "text_to_image",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::ImageToImage => "I->I",
            Self::ImageToText => "I->T",
            Self::TextToText => "T->T",
            Self::TextToImage => "T->I",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalBundle {
    pub coarse: Vec<ScoredHit>,
    /// Entity to fine hits, in grounding order.
    pub fine: Vec<(String, Vec<ScoredHit>)>,
    /// Grounded region per entity, parallel to `fine`.
    pub regions: Vec<Region>,
    pub fine_available: bool,
}

impl RetrievalBundle {
    pub fn primary_fine(&self) -> Option<(&str, &[ScoredHit], &Region)> {
        let (entity, hits) = self.fine.first()?;
        Some((entity.as_str(), hits.as_slice(), self.regions.first()?))
    }
}

/// Pair of indices over one knowledge base, keyed on each embedding field.
#[derive(Debug, Clone)]
pub struct KnowledgeIndex {
    pub by_image: VectorIndex,
    pub by_caption: VectorIndex,
}

impl KnowledgeIndex {
    pub fn build(entries: Vec<crate::domain::KnowledgeEntry>) -> Result<Self> {
        Ok(Self {
            by_image: VectorIndex::build(entries.clone(), KeyField::ImageEmbedding)?,
            by_caption: VectorIndex::build(entries, KeyField::CaptionEmbedding)?,
        })
    }

    pub fn with_execution(self, execution: Execution) -> Self {
        Self {
            by_image: self.by_image.with_execution(execution),
            by_caption: self.by_caption.with_execution(execution),
        }
    }

    pub fn for_key(&self, key: KeyField) -> &VectorIndex {
        match key {
            KeyField::ImageEmbedding => &self.by_image,
            KeyField::CaptionEmbedding => &self.by_caption,
        }
    }

    pub fn dim(&self) -> usize {
        self.by_image.dim()
    }

    pub fn len(&self) -> usize {
        self.by_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_image.is_empty()
    }
}

pub fn coarse_retrieve(
    ctx: &QueryContext,
    index: &VectorIndex,
    k: usize,
    modality: RetrievalModality,
) -> Result<Vec<ScoredHit>> {
    if index.key_field() != modality.target() {
        return Err(Error::Config(format!(
            "modality {} needs an index keyed on {:?}",
            modality.label(),
            modality.target()
        )));
    }
    let query = if modality.source_is_image() {
        &ctx.image_embedding
    } else {
        ctx.query_embedding.as_ref().ok_or(Error::MissingQueryEmbedding)?
    };
    index.top_k(query, k)
}

/// Regions for every extracted entity that grounds in the image.
pub fn acquire_regions(ctx: &QueryContext, grounder: &dyn Grounder) -> Result<Vec<Region>> {
    let mut regions = Vec::new();
    for entity in grounder.extract_entities(&ctx.query_text)? {
        if let Some(region) = grounder.ground(&ctx.image_uri, &entity)? {
            regions.push(region);
        }
    }
    Ok(regions)
}

/// Crop-level retrieval. The crop is embedded as an image for image-source
/// modalities, and the entity label is embedded as text otherwise.
pub fn fine_retrieve(
    image_uri: &str,
    regions: &[Region],
    fine_index: &VectorIndex,
    embedder: &dyn Embedder,
    k: usize,
    modality: RetrievalModality,
) -> Result<Vec<(String, Vec<ScoredHit>)>> {
    if fine_index.granularity() != Some(Granularity::Fine) {
        return Err(Error::Config("fine retrieval needs an index of fine entries".into()));
    }
    let mut out: Vec<(String, Vec<ScoredHit>)> = Vec::with_capacity(regions.len());
    for region in regions {
        let query = if modality.source_is_image() {
            embedder.embed_image(image_uri, Some(region))?
        } else {
            embedder.embed_text(&region.entity)?
        };
        let hits = fine_index.top_k(&query, k)?;
        out.push((region.entity.clone(), hits));
    }
    Ok(out)
}

pub struct RetrievalPlan<'a> {
    pub coarse: &'a KnowledgeIndex,
    pub fine: Option<&'a KnowledgeIndex>,
    pub k_coarse: usize,
    pub k_fine: usize,
    pub modality: RetrievalModality,
    pub execution: Execution,
}

type FineHits = (Vec<Region>, Vec<(String, Vec<ScoredHit>)>);

/// Coarse and fine retrieval for one query. Fine retrieval is skipped (and
/// `fine_available` left false) when no fine index is configured, nothing
/// grounds, or the grounder is unavailable.
pub fn assemble(
    ctx: &QueryContext,
    plan: &RetrievalPlan<'_>,
    embedder: &dyn Embedder,
    grounder: &dyn Grounder,
) -> Result<RetrievalBundle> {
    if plan.coarse.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    let coarse_index = plan.coarse.for_key(plan.modality.target());
    let fine_job = || -> Result<FineHits> {
        let Some(fine) = plan.fine else { return Ok(Default::default()) };
        let regions = match acquire_regions(ctx, grounder) {
            Ok(r) => r,
            Err(Error::ProviderUnavailable(_)) => return Ok(Default::default()),
            Err(e) => return Err(e),
        };
        if regions.is_empty() {
            return Ok(Default::default());
        }
        let index = fine.for_key(plan.modality.target());
        match fine_retrieve(&ctx.image_uri, &regions, index, embedder, plan.k_fine, plan.modality) {
            Ok(hits) => Ok((regions, hits)),
            Err(Error::ProviderUnavailable(_)) => Ok(Default::default()),
            Err(e) => Err(e),
        }
    };
    let (coarse, fine) =
        plan.execution.join(|| coarse_retrieve(ctx, coarse_index, plan.k_coarse, plan.modality), fine_job);
    let coarse = coarse?;
    let (regions, fine) = fine?;
    let fine: Vec<_> = fine.into_iter().filter(|(_, hits)| !hits.is_empty()).collect();
    let fine_available = !fine.is_empty();
    let regions = if fine_available { regions } else { Vec::new() };
    Ok(RetrievalBundle { coarse, fine, regions, fine_available })
}

#[allow(dead_code)]
fn by_entity(bundle: &RetrievalBundle) -> BTreeMap<&str, &[ScoredHit]> {
    bundle.fine.iter().map(|(e, h)| (e.as_str(), h.as_slice())).collect()
}
