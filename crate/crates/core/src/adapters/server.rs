//! Serves an [`Adapters`] set over the wire protocol.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use super::wire::*;
use super::{Adapters, GenerationContext};
use crate::error::{Error, Result};

pub struct BackendServer {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl BackendServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts `threads` workers.
    pub fn start(adapters: Adapters, addr: &str, threads: usize) -> Result<Self> {
        let server = Server::http(addr).map_err(|e| Error::Backend(format!("cannot bind {addr}: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Backend("server is not bound to an IP address".into()))?;
        let server = Arc::new(server);
        let workers = (0..threads.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let adapters = adapters.clone();
                std::thread::spawn(move || {
                    while let Ok(request) = server.recv() {
                        handle(&adapters, request);
                    }
                })
            })
            .collect();
        Ok(Self { server, workers, addr })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server is shut down from elsewhere.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for BackendServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn json_header() -> Header {
    Header::from_bytes("Content-Type", "application/json").expect("static header")
}

fn respond(request: Request, status: u16, body: String) {
    let response = Response::from_string(body).with_status_code(status).with_header(json_header());
    let _ = request.respond(response);
}

fn parse<T: DeserializeOwned>(body: &str) -> Result<T> {
    serde_json::from_str(body).map_err(|e| Error::Parse(e.to_string()))
}

fn encode<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Parse(e.to_string()))
}

fn context(
    parts: Vec<crate::fusion::prompt::PromptPart>,
    image_included: bool,
    distortion_level: f64,
) -> GenerationContext {
    GenerationContext { parts, image_included, distortion_level }
}

fn dispatch(adapters: &Adapters, method: &Method, path: &str, body: &str) -> Result<String> {
    let lvlm = &adapters.lvlm;
    match (method, path) {
        (Method::Get | Method::Post, DESCRIPTOR) => encode(&DescriptorResponse {
            descriptor: lvlm.descriptor().clone(),
            embedding_dim: adapters.embedder.dim(),
        }),
        (Method::Post, GENERATE) => {
            let r: GenerateRequest = parse(body)?;
            let trace = lvlm.generate(&context(r.parts, r.image_included, r.distortion_level), r.max_tokens)?;
            encode(&GenerateResponse { tokens: trace.tokens, probs: trace.token_probs })
        }
        (Method::Post, SCORE) => {
            let r: ScoreRequest = parse(body)?;
            let probs = lvlm.score(&context(r.parts, r.image_included, r.distortion_level), &r.answer)?;
            encode(&ProbsResponse { probs })
        }
        (Method::Post, DISTRIBUTION) => {
            let r: DistributionRequest = parse(body)?;
            let d = lvlm.next_distribution(&context(r.parts, r.image_included, r.distortion_level), &r.prefix)?;
            encode(&ProbsResponse { probs: d.into() })
        }
        (Method::Post, EMBED_TEXT) => {
            let r: EmbedTextRequest = parse(body)?;
            encode(&EmbeddingResponse { embedding: adapters.embedder.embed_text(&r.text)? })
        }
        (Method::Post, EMBED_IMAGE) => {
            let r: EmbedImageRequest = parse(body)?;
            encode(&EmbeddingResponse { embedding: adapters.embedder.embed_image(&r.image_uri, r.region.as_ref())? })
        }
        (Method::Post, ENTITIES) => {
            let r: EntitiesRequest = parse(body)?;
            encode(&EntitiesResponse { entities: adapters.grounder.extract_entities(&r.query)? })
        }
        (Method::Post, GROUND) => {
            let r: GroundRequest = parse(body)?;
            encode(&GroundResponse { region: adapters.grounder.ground(&r.image_uri, &r.entity)? })
        }
        _ => Err(Error::Parse(format!("no endpoint {method} {path}"))),
    }
}

fn handle(adapters: &Adapters, mut request: Request) {
    let mut body = String::new();
    if let Err(e) = request.as_reader().read_to_string(&mut body) {
        let err = Error::Parse(format!("unreadable body: {e}"));
        return respond(request, 400, encode(&ErrorBody::from(&err)).unwrap_or_default());
    }
    let method = request.method().clone();
    let path = request.url().split('?').next().unwrap_or_default().to_owned();
    match dispatch(adapters, &method, &path, &body) {
        Ok(json) => respond(request, 200, json),
        Err(e) => {
            let status =
                if matches!(e, Error::Parse(ref m) if m.starts_with("no endpoint")) { 404 } else { status_for(&e) };
            respond(request, status, encode(&ErrorBody::from(&e)).unwrap_or_default())
        }
    }
}
