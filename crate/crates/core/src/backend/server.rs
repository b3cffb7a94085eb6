//! Serves any [`Backend`] over the wire protocol.
//!
//! `scene mock-serve` uses this to expose the mock tables to other processes.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use log::{debug, info};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Method, Response, Server};

use super::wire::{self, *};
use super::{Backend, BackendError};

fn status_for(e: &BackendError) -> u16 {
    match e {
        BackendError::NoMask
        | BackendError::EmptyInput(_)
        | BackendError::Shape { .. }
        | BackendError::DimensionDrift { .. } => 400,
        BackendError::Unreachable(_) => 502,
        BackendError::Status { status, .. } => *status,
        _ => 500,
    }
}

fn error_body(status: u16, message: impl Into<String>) -> (u16, String) {
    let body = ErrorResponse {
        error: message.into(),
    };
    (status, serde_json::to_string(&body).expect("error body serializes"))
}

fn run<Q, R, F>(body: &[u8], f: F) -> (u16, String)
where
    Q: DeserializeOwned,
    R: Serialize,
    F: FnOnce(Q) -> Result<R, BackendError>,
{
    let req: Q = match serde_json::from_slice(if body.is_empty() { b"{}" } else { body }) {
        Ok(r) => r,
        Err(e) => return error_body(400, format!("bad request body: {e}")),
    };
    match f(req) {
        Ok(resp) => (200, serde_json::to_string(&resp).expect("response serializes")),
        Err(e) => error_body(status_for(&e), e.to_string()),
    }
}

/// Dispatches one request. Returns the HTTP status and JSON body.
pub fn handle<B: Backend + ?Sized>(backend: &B, path: &str, body: &[u8]) -> (u16, String) {
    match path {
        wire::PREDICT => run(body, |r: TextsRequest| {
            let preds = backend.predict(&r.texts)?;
            Ok(PredictResponse {
                predicted: preds.iter().map(|p| p.predicted_class).collect(),
                probs: preds.into_iter().map(|p| p.probabilities).collect(),
            })
        }),
        wire::EMBED => run(body, |r: EmbedRequest| {
            Ok(EmbedResponse {
                embeddings: backend.embed(&r.text)?,
            })
        }),
        wire::PREDICT_EMBEDDINGS => run(body, |r: PredictEmbeddingsRequest| {
            let p = backend.predict_embeddings(&r.embeddings)?;
            Ok(PredictEmbeddingsResponse {
                predicted: p.predicted_class,
                probs: p.probabilities,
            })
        }),
        wire::FILL_MASK => run(body, |r: FillMaskRequest| {
            Ok(FillMaskResponse {
                masks: backend.fill_mask(&r.text, r.top_k)?,
            })
        }),
        wire::SENTENCE_EMBED => run(body, |r: TextsRequest| {
            Ok(SentenceEmbedResponse {
                vectors: backend.sentence_embed(&r.texts)?,
            })
        }),
        wire::INFO => run(body, |_: InfoRequest| backend.info()),
        other => error_body(404, format!("unknown endpoint {other}")),
    }
}

/// A server running on background threads. Dropping it stops the server.
pub struct RunningServer {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl RunningServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the worker threads exit.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and serves `backend` with
/// `threads` worker threads.
pub fn spawn<B>(backend: Arc<B>, addr: &str, threads: usize) -> std::io::Result<RunningServer>
where
    B: Backend + ?Sized + 'static,
{
    let server = Server::http(addr).map_err(std::io::Error::other)?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| std::io::Error::other("not an IP listener"))?;
    let server = Arc::new(server);
    info!("serving on http://{addr}");
    let workers = (0..threads.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let backend = Arc::clone(&backend);
            thread::spawn(move || {
                while let Ok(mut req) = server.recv() {
                    let mut body = Vec::new();
                    let (status, out) = if *req.method() != Method::Post {
                        error_body(405, "only POST is supported")
                    } else if let Err(e) = req.as_reader().read_to_end(&mut body) {
                        error_body(400, format!("reading body: {e}"))
                    } else {
                        let path = req.url().split('?').next().unwrap_or("").to_string();
                        handle(&*backend, &path, &body)
                    };
                    debug!("{} {} -> {status}", req.method(), req.url());
                    let header = Header::from_bytes("Content-Type", "application/json")
                        .expect("static header is valid");
                    let _ = req.respond(
                        Response::from_string(out)
                            .with_status_code(status)
                            .with_header(header),
                    );
                }
            })
        })
        .collect();
    Ok(RunningServer {
        server,
        addr,
        workers,
    })
}
