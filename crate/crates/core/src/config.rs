//! Engine configuration file.
//!
//! One `key = value` pair per line; `#` starts a comment. Unknown and
//! duplicate keys are rejected, and relative paths resolve against the
//! config file's directory.
//!
//! | key | values | default |
//! |---|---|---|
//! | `backend` | `mock` or an `http://host:port` URL | `mock` |
//! | `fixture` | fixture jsonl (required for `mock`) | |
//! | `embedding_dim` | positive integer | `64` |
//! | `coarse_kb` | knowledge base jsonl | required |
//! | `fine_kb` | knowledge base jsonl | none |
//! | `trigger` | `confidence`, `query`, `image`, `always`, `never` | `query` |
//! | `theta` | real, `-inf` or `inf` | per trigger |
//! | `aggregation` | `mean`, `min` | `mean` |
//! | `distortion_level` | real in `(0, 1]` | `0.5` |
//! | `modality` | `image_to_image`, `image_to_text`, `text_to_text`, `text_to_image` | `image_to_image` |
//! | `k_coarse`, `k_fine`, `truncate_n` | positive integers | `3` |
//! | `rerank` | `none`, `caption`, `k_reciprocal` | `caption` |
//! | `k1`, `k2`, `lambda` | k-reciprocal parameters | `5`, `2`, `0.3` |
//! | `fusion` | `coarse_only`, `fine_only`, `probability_level`, `instance_level` | `probability_level` |
//! | `alpha` | real in `[0, 1]` | `0.8` |
//! | `max_tokens` | positive integer | `16` |
//! | `augmentation` | `text_only`, `image_and_text` | `text_only` |
//! | `seed` | integer, unused by the engine | `0` |
//! | `jobs` | concurrency cap, `1` runs sequentially | all cores |
//! | `timeout_ms` | remote request timeout | `30000` |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use crate::adapters::mock::MockWorld;
use crate::adapters::remote::RemoteBackend;
use crate::adapters::Adapters;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fusion::{Augmentation, FusionConfig, FusionMode};
use crate::index::load_knowledge_base;
use crate::pipeline::{Indices, PipelineConfig};
use crate::rerank::RerankMethod;
use crate::retriever::{KnowledgeIndex, RetrievalModality};
use crate::trigger::{Aggregation, TriggerKind};

pub const KEYS: [&str; 24] = [
    "backend",
    "fixture",
    "embedding_dim",
    "coarse_kb",
    "fine_kb",
    "trigger",
    "theta",
    "aggregation",
    "distortion_level",
    "modality",
    "k_coarse",
    "k_fine",
    "truncate_n",
    "rerank",
    "k1",
    "k2",
    "lambda",
    "fusion",
    "alpha",
    "max_tokens",
    "augmentation",
    "seed",
    "jobs",
    "timeout_ms",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Mock { fixture: PathBuf },
    Remote { url: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub pipeline: PipelineConfig,
    pub backend: Backend,
    pub embedding_dim: usize,
    pub coarse_kb: PathBuf,
    pub fine_kb: Option<PathBuf>,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub timeout: Duration,
}

pub fn parse_trigger_kind(s: &str) -> Result<TriggerKind> {
    Ok(match s {
        "confidence" => TriggerKind::ConfidenceAware,
        "query" => TriggerKind::QueryAware,
        "image" => TriggerKind::ImageAware,
        "always" => TriggerKind::Always,
        "never" => TriggerKind::Never,
        _ => return Err(bad("trigger", s)),
    })
}

pub fn parse_modality(s: &str) -> Result<RetrievalModality> {
    RetrievalModality::ALL.into_iter().find(|m| m.key() == s).ok_or_else(|| bad("modality", s))
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value '{value}' for key '{key}'"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn real(key: &str, value: &str) -> Result<f64> {
    match value {
        "-inf" => Ok(f64::NEG_INFINITY),
        "inf" | "+inf" => Ok(f64::INFINITY),
        v => {
            let x: f64 = num(key, v)?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(bad(key, value))
            }
        }
    }
}

fn tokenize(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key '{k}'", n + 1)));
        }
        if v.is_empty() {
            return Err(Error::Config(format!("line {}: empty value for '{k}'", n + 1)));
        }
        if map.insert(k.to_owned(), v.to_owned()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
    }
    Ok(map)
}

impl EngineConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let map = tokenize(text)?;
        let get = |k: &str| map.get(k).map(String::as_str);
        let path = |k: &str| -> Result<Option<PathBuf>> {
            let Some(v) = get(k) else { return Ok(None) };
            let p = base.join(v);
            if !p.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{k}: {} does not exist", p.display()),
                )));
            }
            Ok(Some(p))
        };

        let backend = match get("backend").unwrap_or("mock") {
            "mock" => Backend::Mock {
                fixture: path("fixture")?.ok_or_else(|| Error::Config("mock backend needs 'fixture'".into()))?,
            },
            url if url.starts_with("http://") => {
                if map.contains_key("fixture") {
                    return Err(Error::Config("'fixture' only applies to the mock backend".into()));
                }
                Backend::Remote { url: url.trim_end_matches('/').to_owned() }
            }
            other => return Err(bad("backend", other)),
        };

        let kind = get("trigger").map(parse_trigger_kind).transpose()?.unwrap_or(TriggerKind::QueryAware);
        let mut pipeline = PipelineConfig::default();
        pipeline.trigger.kind = kind;
        pipeline.trigger.theta = get("theta").map(|v| real("theta", v)).transpose()?.unwrap_or(kind.default_theta());
        if let Some(v) = get("aggregation") {
            pipeline.trigger.aggregation = match v {
                "mean" => Aggregation::Mean,
                "min" => Aggregation::Min,
                _ => return Err(bad("aggregation", v)),
            };
        }
        if let Some(v) = get("distortion_level") {
            pipeline.trigger.distortion_level = real("distortion_level", v)?;
        }
        if let Some(v) = get("modality") {
            pipeline.modality = parse_modality(v)?;
        }
        for (k, slot) in [
            ("k_coarse", &mut pipeline.k_coarse),
            ("k_fine", &mut pipeline.k_fine),
            ("truncate_n", &mut pipeline.truncate_n),
        ] {
            if let Some(v) = get(k) {
                *slot = num(k, v)?;
            }
        }

        let k_params = ["k1", "k2", "lambda"].iter().any(|k| map.contains_key(*k));
        pipeline.rerank = match get("rerank").unwrap_or("caption") {
            "none" => RerankMethod::None,
            "caption" => RerankMethod::CaptionSimilarity,
            "k_reciprocal" => {
                let RerankMethod::KReciprocal { k1, k2, lambda } = RerankMethod::K_RECIPROCAL_DEFAULT else {
                    unreachable!()
                };
                RerankMethod::KReciprocal {
                    k1: get("k1").map(|v| num("k1", v)).transpose()?.unwrap_or(k1),
                    k2: get("k2").map(|v| num("k2", v)).transpose()?.unwrap_or(k2),
                    lambda: get("lambda").map(|v| real("lambda", v)).transpose()?.unwrap_or(lambda),
                }
            }
            other => return Err(bad("rerank", other)),
        };
        if k_params && !matches!(pipeline.rerank, RerankMethod::KReciprocal { .. }) {
            return Err(Error::Config("k1, k2 and lambda need rerank = k_reciprocal".into()));
        }

        let mut fusion = FusionConfig::default();
        if let Some(v) = get("fusion") {
            fusion.mode = FusionMode::parse(v)?;
        }
        if let Some(v) = get("alpha") {
            fusion.alpha = real("alpha", v)?;
        }
        if let Some(v) = get("max_tokens") {
            fusion.max_tokens = num("max_tokens", v)?;
        }
        if let Some(v) = get("augmentation") {
            fusion.augmentation = match v {
                "text_only" => Augmentation::TextOnly,
                "image_and_text" => Augmentation::ImageAndText,
                _ => return Err(bad("augmentation", v)),
            };
        }
        pipeline.fusion = fusion;
        pipeline.validate()?;

        let embedding_dim = get("embedding_dim").map(|v| num("embedding_dim", v)).transpose()?.unwrap_or(64);
        if embedding_dim == 0 {
            return Err(bad("embedding_dim", "0"));
        }
        Ok(Self {
            pipeline,
            backend,
            embedding_dim,
            coarse_kb: path("coarse_kb")?.ok_or_else(|| Error::Config("missing required key 'coarse_kb'".into()))?,
            fine_kb: path("fine_kb")?,
            seed: get("seed").map(|v| num("seed", v)).transpose()?.unwrap_or(0),
            jobs: get("jobs").map(|v| num("jobs", v)).transpose()?,
            timeout: Duration::from_millis(
                get("timeout_ms").map(|v| num("timeout_ms", v)).transpose()?.unwrap_or(30_000),
            ),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn execution(&self) -> Execution {
        Execution::from_jobs(self.jobs)
    }

    pub fn adapters(&self) -> Result<Adapters> {
        let adapters = match &self.backend {
            Backend::Mock { fixture } => Adapters::mock(Arc::new(MockWorld::load(fixture)?)),
            Backend::Remote { url } => {
                let remote = Arc::new(RemoteBackend::connect(url, self.timeout)?);
                Adapters::new(remote.clone(), remote.clone(), remote)?
            }
        };
        let dim = adapters.embedder.dim();
        if dim != self.embedding_dim {
            return Err(Error::DimensionMismatch { expected: self.embedding_dim, actual: dim });
        }
        Ok(adapters)
    }

    pub fn indices(&self) -> Result<Indices> {
        // Scans run inside the query pool, so a capped pool must not be rebuilt per scan.
        let exec = match self.execution() {
            Execution::Jobs(_) => Execution::Parallel,
            e => e,
        };
        let coarse = KnowledgeIndex::build(load_knowledge_base(&self.coarse_kb)?)?.with_execution(exec);
        let fine = match &self.fine_kb {
            Some(p) => Some(KnowledgeIndex::build(load_knowledge_base(p)?)?.with_execution(exec)),
            None => None,
        };
        for idx in std::iter::once(&coarse).chain(fine.as_ref()) {
            let d = idx.dim();
            if d != self.embedding_dim {
                return Err(Error::DimensionMismatch { expected: self.embedding_dim, actual: d });
            }
        }
        Ok(Indices { coarse, fine })
    }
}
