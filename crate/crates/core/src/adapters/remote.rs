//! Client side of the wire protocol.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::*;
use super::{BackendDescriptor, Embedder, GenerationContext, Grounder, Lvlm};
use crate::domain::{AnswerTrace, EmbeddingVector, Region, Token, TokenDistribution};
use crate::error::{Error, Result};

#[derive(Clone)]
struct Endpoint {
    base: String,
    agent: ureq::Agent,
}

impl Endpoint {
    fn new(base: &str, timeout: Duration) -> Self {
        Self { base: base.trim_end_matches('/').to_owned(), agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = format!("{}{path}", self.base);
        match self.agent.post(&url).send_json(body) {
            Ok(resp) => resp.into_json().map_err(|e| Error::Backend(format!("bad response from {url}: {e}"))),
            Err(ureq::Error::Status(status, resp)) => match resp.into_json::<ErrorBody>() {
                Ok(body) => Err(body.into()),
                Err(_) => Err(Error::Backend(format!("{url} answered {status}"))),
            },
            Err(ureq::Error::Transport(t)) => Err(Error::ProviderUnavailable(format!("{url}: {t}"))),
        }
    }
}

/// A backend process reached over HTTP. One connection serves all three roles.
#[derive(Clone)]
pub struct RemoteBackend {
    endpoint: Endpoint,
    descriptor: BackendDescriptor,
    embedding_dim: usize,
}

impl RemoteBackend {
    /// Fetches the descriptor; fails with `ProviderUnavailable` if nothing listens.
    pub fn connect(base_url: &str, timeout: Duration) -> Result<Self> {
        let endpoint = Endpoint::new(base_url, timeout);
        let d: DescriptorResponse = endpoint.post(DESCRIPTOR, &serde_json::json!({}))?;
        d.descriptor.validate()?;
        Ok(Self { endpoint, descriptor: d.descriptor, embedding_dim: d.embedding_dim })
    }
}

impl Lvlm for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate(&self, ctx: &GenerationContext, max_tokens: usize) -> Result<AnswerTrace> {
        let req = GenerateRequest {
            parts: ctx.parts.clone(),
            image_included: ctx.image_included,
            distortion_level: ctx.distortion_level,
            max_tokens,
        };
        let r: GenerateResponse = self.endpoint.post(GENERATE, &req)?;
        AnswerTrace::new(r.tokens, r.probs)
    }

    fn score(&self, ctx: &GenerationContext, answer: &[Token]) -> Result<Vec<f64>> {
        let req = ScoreRequest {
            parts: ctx.parts.clone(),
            image_included: ctx.image_included,
            distortion_level: ctx.distortion_level,
            answer: answer.to_vec(),
        };
        let r: ProbsResponse = self.endpoint.post(SCORE, &req)?;
        if r.probs.len() != answer.len() {
            return Err(Error::LengthMismatch { left: answer.len(), right: r.probs.len() });
        }
        Ok(r.probs)
    }

    fn next_distribution(&self, ctx: &GenerationContext, prefix: &[Token]) -> Result<TokenDistribution> {
        let req = DistributionRequest {
            parts: ctx.parts.clone(),
            image_included: ctx.image_included,
            distortion_level: ctx.distortion_level,
            prefix: prefix.to_vec(),
        };
        let r: ProbsResponse = self.endpoint.post(DISTRIBUTION, &req)?;
        if r.probs.len() != self.descriptor.vocabulary_size() {
            return Err(Error::LengthMismatch { left: self.descriptor.vocabulary_size(), right: r.probs.len() });
        }
        TokenDistribution::new(r.probs)
    }
}

impl Embedder for RemoteBackend {
    fn dim(&self) -> usize {
        self.embedding_dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let r: EmbeddingResponse = self.endpoint.post(EMBED_TEXT, &EmbedTextRequest { text: text.to_owned() })?;
        Ok(r.embedding)
    }

    fn embed_image(&self, image_uri: &str, region: Option<&Region>) -> Result<EmbeddingVector> {
        let req = EmbedImageRequest { image_uri: image_uri.to_owned(), region: region.cloned() };
        let r: EmbeddingResponse = self.endpoint.post(EMBED_IMAGE, &req)?;
        Ok(r.embedding)
    }
}

impl Grounder for RemoteBackend {
    fn extract_entities(&self, query: &str) -> Result<Vec<String>> {
        let r: EntitiesResponse = self.endpoint.post(ENTITIES, &EntitiesRequest { query: query.to_owned() })?;
        Ok(r.entities)
    }

    fn ground(&self, image_uri: &str, entity: &str) -> Result<Option<Region>> {
        let req = GroundRequest { image_uri: image_uri.to_owned(), entity: entity.to_owned() };
        let r: GroundResponse = self.endpoint.post(GROUND, &req)?;
        Ok(r.region)
    }
}
