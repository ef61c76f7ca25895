//! Augmented prompt construction.
//!
//! Template strings are normative; conformance tests compare them verbatim.

use serde::{Deserialize, Serialize};

use crate::domain::Region;
use crate::error::{Error, Result};
use crate::index::ScoredHit;
use crate::retriever::QueryContext;

pub const COARSE_PREFIX: &str = "Here are the image-caption pairs similar to the test image: ";
pub const COARSE_IMAGE: &str = ". Based on these pairs and this image: ";
pub const QUERY_LEAD: &str = ". Answer this question: ";
pub const INSTANCE_FINE_LEAD: &str = ". Here are the image-caption pairs: ";
pub const INSTANCE_IMAGE: &str = " in the input image. Based on these pairs and this input image: ";
pub const DESCRIBE_PROMPT: &str = "Describe the image in detail.";

/// Separator between captions when pairs are inlined as text.
pub const CAPTION_SEPARATOR: &str = "; ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    TextOnly,
    ImageAndText,
}

/// The part of a retrieved hit that travels inside a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPair {
    pub id: String,
    pub image_uri: String,
    pub caption: String,
    pub score: f64,
}

impl From<&ScoredHit> for RetrievedPair {
    fn from(hit: &ScoredHit) -> Self {
        Self {
            id: hit.entry.id.clone(),
            image_uri: hit.entry.image_uri.clone(),
            caption: hit.entry.caption.clone(),
            score: hit.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptPart {
    Text {
        text: String,
    },
    ImageRef {
        image_uri: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        region: Option<Region>,
    },
    PairBlock {
        pairs: Vec<RetrievedPair>,
        augmentation: Augmentation,
    },
}

impl PromptPart {
    pub fn text(s: impl Into<String>) -> Self {
        Self::Text { text: s.into() }
    }

    pub fn image(uri: impl Into<String>) -> Self {
        Self::ImageRef { image_uri: uri.into(), region: None }
    }

    pub fn crop(uri: impl Into<String>, region: Region) -> Self {
        Self::ImageRef { image_uri: uri.into(), region: Some(region) }
    }
}

/// Flattens parts into one string, images as `<image:uri>` placeholders.
pub fn render(parts: &[PromptPart]) -> String {
    let mut out = String::new();
    for part in parts {
        match part {
            PromptPart::Text { text } => out.push_str(text),
            PromptPart::ImageRef { image_uri, region } => {
                out.push_str("<image:");
                out.push_str(image_uri);
                if let Some(r) = region {
                    out.push_str(&format!("#{},{},{},{}", r.x, r.y, r.w, r.h));
                }
                out.push('>');
            }
            PromptPart::PairBlock { pairs, .. } => {
                let rendered: Vec<String> =
                    pairs.iter().map(|p| format!("<image:{}> {}", p.image_uri, p.caption)).collect();
                out.push_str(&rendered.join(CAPTION_SEPARATOR));
            }
        }
    }
    out
}

fn inline_captions(hits: &[ScoredHit]) -> String {
    hits.iter().map(|h| h.entry.caption.as_str()).collect::<Vec<_>>().join(CAPTION_SEPARATOR)
}

/// Appends `lead`, the pairs, and `trail` to `parts`, merging adjacent text.
fn push_pairs(parts: &mut Vec<PromptPart>, lead: &str, hits: &[ScoredHit], augmentation: Augmentation, trail: &str) {
    match augmentation {
        Augmentation::TextOnly => push_text(parts, &format!("{lead}{}{trail}", inline_captions(hits))),
        Augmentation::ImageAndText => {
            push_text(parts, lead);
            parts.push(PromptPart::PairBlock { pairs: hits.iter().map(RetrievedPair::from).collect(), augmentation });
            push_text(parts, trail);
        }
    }
}

fn push_text(parts: &mut Vec<PromptPart>, s: &str) {
    if s.is_empty() {
        return;
    }
    if let Some(PromptPart::Text { text }) = parts.last_mut() {
        text.push_str(s);
    } else {
        parts.push(PromptPart::text(s));
    }
}

/// Prompt used for both the coarse and the fine context of probability-level
/// fusion, and for coarse-only decoding.
pub fn build_coarse_prompt(
    ctx: &QueryContext,
    hits: &[ScoredHit],
    augmentation: Augmentation,
) -> Result<Vec<PromptPart>> {
    if hits.is_empty() {
        return Err(Error::EmptyHits);
    }
    let mut parts = Vec::new();
    push_pairs(&mut parts, COARSE_PREFIX, hits, augmentation, COARSE_IMAGE);
    parts.push(PromptPart::image(&ctx.image_uri));
    parts.push(PromptPart::text(format!("{QUERY_LEAD}{}", ctx.query_text)));
    Ok(parts)
}

/// Single prompt carrying both the coarse pairs and the fine pairs for `entity`.
pub fn build_instance_prompt(
    ctx: &QueryContext,
    coarse_hits: &[ScoredHit],
    fine_hits: &[ScoredHit],
    entity: &str,
    augmentation: Augmentation,
) -> Result<Vec<PromptPart>> {
    if entity.trim().is_empty() {
        return Err(Error::MissingEntity);
    }
    if coarse_hits.is_empty() || fine_hits.is_empty() {
        return Err(Error::EmptyHits);
    }
    let mut parts = Vec::new();
    push_pairs(&mut parts, COARSE_PREFIX, coarse_hits, augmentation, INSTANCE_FINE_LEAD);
    push_pairs(&mut parts, "", fine_hits, augmentation, &format!(" similar to the {entity}{INSTANCE_IMAGE}"));
    parts.push(PromptPart::image(&ctx.image_uri));
    parts.push(PromptPart::text(format!("{QUERY_LEAD}{}.", ctx.query_text)));
    Ok(parts)
}

/// Plain `(image, query)` prompt with no retrieved content.
pub fn build_plain_prompt(ctx: &QueryContext) -> Vec<PromptPart> {
    vec![PromptPart::image(&ctx.image_uri), PromptPart::text(&ctx.query_text)]
}

/// Query-only prompt, used to score the language prior.
pub fn build_query_only_prompt(ctx: &QueryContext) -> Vec<PromptPart> {
    vec![PromptPart::text(&ctx.query_text)]
}

/// Captioning prompt for the full image or a crop of it.
pub fn build_describe_prompt(image_uri: &str, region: Option<&Region>) -> Vec<PromptPart> {
    let image = match region {
        Some(r) => PromptPart::crop(image_uri, r.clone()),
        None => PromptPart::image(image_uri),
    };
    vec![image, PromptPart::text(DESCRIBE_PROMPT)]
}
