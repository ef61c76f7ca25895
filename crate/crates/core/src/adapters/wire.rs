//! JSON bodies of the remote backend protocol.
//!
//! Every endpoint is a `POST` of one JSON object (`/v1/descriptor` also
//! accepts `GET`). Failures come back with a non-2xx status and
//! `{"error": {"code": ..., "message": ...}}`, where `code` is one of the
//! engine's error names.

use serde::{Deserialize, Serialize};

use super::BackendDescriptor;
use crate::domain::{EmbeddingVector, Region, Token};
use crate::error::Error;
use crate::fusion::prompt::PromptPart;

pub const DESCRIPTOR: &str = "/v1/descriptor";
pub const GENERATE: &str = "/v1/generate";
pub const SCORE: &str = "/v1/score";
pub const DISTRIBUTION: &str = "/v1/distribution";
pub const EMBED_TEXT: &str = "/v1/embed_text";
pub const EMBED_IMAGE: &str = "/v1/embed_image";
pub const ENTITIES: &str = "/v1/entities";
pub const GROUND: &str = "/v1/ground";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorResponse {
    pub descriptor: BackendDescriptor,
    pub embedding_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub parts: Vec<PromptPart>,
    pub image_included: bool,
    #[serde(default)]
    pub distortion_level: f64,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub tokens: Vec<Token>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub parts: Vec<PromptPart>,
    pub image_included: bool,
    #[serde(default)]
    pub distortion_level: f64,
    pub answer: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRequest {
    pub parts: Vec<PromptPart>,
    pub image_included: bool,
    #[serde(default)]
    pub distortion_level: f64,
    pub prefix: Vec<Token>,
}

/// Response of both `/v1/score` and `/v1/distribution`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbsResponse {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub image_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitiesRequest {
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitiesResponse {
    pub entities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundRequest {
    pub image_uri: String,
    pub entity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundResponse {
    pub region: Option<Region>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

impl From<&Error> for ErrorBody {
    fn from(e: &Error) -> Self {
        Self { error: ErrorDetail { code: e.code().to_owned(), message: e.to_string() } }
    }
}

impl From<ErrorBody> for Error {
    fn from(b: ErrorBody) -> Self {
        Error::from_code(&b.error.code, b.error.message)
    }
}

/// HTTP status used for an error code.
pub fn status_for(e: &Error) -> u16 {
    match e {
        Error::ProviderUnavailable(_) => 503,
        Error::UnknownImage(_) => 404,
        Error::Parse(_) | Error::UnsupportedContext(_) | Error::EmptyTrace => 400,
        _ => 500,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_names_match_the_protocol() {
        let req = DistributionRequest {
            parts: vec![PromptPart::text("q")],
            image_included: false,
            distortion_level: 0.0,
            prefix: vec![Token::new(1, "yes")],
        };
        let v: serde_json::Value = serde_json::to_value(&req).unwrap();
        for key in ["parts", "image_included", "distortion_level", "prefix"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["prefix"][0], serde_json::json!({"id": 1, "surface": "yes"}));
        let g: GenerateResponse =
            serde_json::from_str(r#"{"tokens":[{"id":2,"surface":"no"}],"probs":[0.6]}"#).unwrap();
        assert_eq!(g.tokens[0].surface, "no");
    }

    #[test]
    fn errors_round_trip() {
        let body = ErrorBody::from(&Error::UnknownImage("img://x".into()));
        let json = serde_json::to_string(&body).unwrap();
        assert!(json.contains(r#""code":"UnknownImage""#));
        let back: ErrorBody = serde_json::from_str(&json).unwrap();
        assert!(matches!(Error::from(back), Error::UnknownImage(_)));
        assert_eq!(status_for(&Error::ProviderUnavailable("x".into())), 503);
    }
}
