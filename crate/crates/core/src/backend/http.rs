use std::sync::{Condvar, Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{self, *};
use super::{count_masks, Backend, BackendDescriptor, BackendError, BackendInfo};
use crate::cfgen::MaskCandidate;
use crate::domain::{Matrix, Prediction};

const BODY_LIMIT: u64 = 512 * 1024 * 1024;

/// Counting semaphore capping in-flight requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Permits {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("permit lock poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Blocking client for the JSON wire protocol.
///
/// Batched endpoints are split into requests of at most `max_batch` texts.
/// Transport failures and 5xx responses are retried `retries` times with
/// exponential backoff; 4xx responses fail immediately.
pub struct HttpBackend {
    desc: BackendDescriptor,
    agent: ureq::Agent,
    permits: Permits,
    sentence_dim: OnceLock<usize>,
}

impl HttpBackend {
    pub fn new(desc: BackendDescriptor) -> Result<Self, BackendError> {
        desc.validate().map_err(BackendError::Fixture)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(desc.timeout_seconds)))
            .build()
            .into();
        Ok(HttpBackend {
            permits: Permits::new(desc.max_in_flight),
            desc,
            agent,
            sentence_dim: OnceLock::new(),
        })
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn url(&self, endpoint: &str) -> String {
        format!("{}{}", self.desc.base_url.trim_end_matches('/'), endpoint)
    }

    fn post<Q: Serialize, R: DeserializeOwned>(
        &self,
        endpoint: &str,
        body: &Q,
    ) -> Result<R, BackendError> {
        let url = self.url(endpoint);
        let mut last = BackendError::Unreachable(url.clone());
        for attempt in 0..=self.desc.retries {
            if attempt > 0 {
                let wait = Duration::from_millis(50u64 << (attempt - 1).min(6));
                debug!("retrying {url} in {wait:?} (attempt {attempt})");
                thread::sleep(wait);
            }
            let _permit = self.permits.acquire();
            let mut resp = match self.agent.post(&url).send_json(body) {
                Ok(r) => r,
                Err(e) => {
                    warn!("{url}: {e}");
                    last = BackendError::Unreachable(format!("{url}: {e}"));
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let text = match resp.body_mut().with_config().limit(BODY_LIMIT).read_to_string() {
                Ok(t) => t,
                Err(e) => {
                    last = BackendError::Unreachable(format!("{url}: reading body: {e}"));
                    continue;
                }
            };
            if (200..300).contains(&status) {
                return serde_json::from_str(&text)
                    .map_err(|e| BackendError::Malformed(format!("{endpoint}: {e}")));
            }
            let message = serde_json::from_str::<ErrorResponse>(&text)
                .map(|e| e.error)
                .unwrap_or(text);
            last = BackendError::Status { status, message };
            if status < 500 {
                break;
            }
        }
        Err(last)
    }
}

fn check_rows(m: &Matrix, what: &str) -> Result<usize, BackendError> {
    let dim = m
        .first()
        .map(Vec::len)
        .ok_or_else(|| BackendError::Malformed(format!("{what}: empty matrix")))?;
    if let Some(r) = m.iter().find(|r| r.len() != dim) {
        return Err(BackendError::Shape {
            expected: dim,
            got: r.len(),
        });
    }
    if m.iter().flatten().any(|x| !x.is_finite()) {
        return Err(BackendError::Malformed(format!("{what}: non-finite value")));
    }
    Ok(dim)
}

impl Backend for HttpBackend {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        let resp: BackendInfo = self.post(wire::INFO, &InfoRequest {})?;
        if resp.classes < 2 || resp.embed_dim == 0 {
            return Err(BackendError::Malformed(format!("implausible info {resp:?}")));
        }
        Ok(resp)
    }

    fn predict(&self, texts: &[String]) -> Result<Vec<Prediction>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::EmptyInput("predict batch"));
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.desc.max_batch) {
            let resp: PredictResponse = self.post(
                wire::PREDICT,
                &TextsRequest {
                    texts: chunk.to_vec(),
                },
            )?;
            if resp.probs.len() != chunk.len() || resp.predicted.len() != chunk.len() {
                return Err(BackendError::Malformed(format!(
                    "predict: {} texts but {} probability rows and {} classes",
                    chunk.len(),
                    resp.probs.len(),
                    resp.predicted.len()
                )));
            }
            for (p, c) in resp.probs.into_iter().zip(resp.predicted) {
                out.push(Prediction::with_class(p, c)?);
            }
        }
        Ok(out)
    }

    fn embed(&self, text: &str) -> Result<Matrix, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyInput("text"));
        }
        let resp: EmbedResponse = self.post(
            wire::EMBED,
            &EmbedRequest {
                text: text.to_string(),
            },
        )?;
        check_rows(&resp.embeddings, "embed")?;
        Ok(resp.embeddings)
    }

    fn predict_embeddings(&self, embeddings: &Matrix) -> Result<Prediction, BackendError> {
        if embeddings.is_empty() {
            return Err(BackendError::EmptyInput("embedding matrix"));
        }
        let resp: PredictEmbeddingsResponse = self.post(
            wire::PREDICT_EMBEDDINGS,
            &PredictEmbeddingsRequest {
                embeddings: embeddings.clone(),
            },
        )?;
        Ok(Prediction::with_class(resp.probs, resp.predicted)?)
    }

    fn fill_mask(
        &self,
        masked_text: &str,
        top_k: usize,
    ) -> Result<Vec<Vec<MaskCandidate>>, BackendError> {
        let masks = count_masks(masked_text);
        if masks == 0 {
            return Err(BackendError::NoMask);
        }
        let resp: FillMaskResponse = self.post(
            wire::FILL_MASK,
            &FillMaskRequest {
                text: masked_text.to_string(),
                top_k,
            },
        )?;
        if resp.masks.len() != masks {
            return Err(BackendError::Malformed(format!(
                "fill_mask: {} lists for {masks} masks",
                resp.masks.len()
            )));
        }
        for list in &resp.masks {
            if list.len() > top_k {
                return Err(BackendError::Malformed(format!(
                    "fill_mask: {} candidates for top_k {top_k}",
                    list.len()
                )));
            }
            if list.windows(2).any(|w| w[0].score < w[1].score) {
                return Err(BackendError::Malformed(
                    "fill_mask: candidates not ordered by score".into(),
                ));
            }
        }
        Ok(resp.masks)
    }

    fn sentence_embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::EmptyInput("sentence batch"));
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.desc.max_batch) {
            let resp: SentenceEmbedResponse = self.post(
                wire::SENTENCE_EMBED,
                &TextsRequest {
                    texts: chunk.to_vec(),
                },
            )?;
            if resp.vectors.len() != chunk.len() {
                return Err(BackendError::Malformed(format!(
                    "sentence_embed: {} vectors for {} texts",
                    resp.vectors.len(),
                    chunk.len()
                )));
            }
            let dim = check_rows(&resp.vectors, "sentence_embed")?;
            let expected = *self.sentence_dim.get_or_init(|| dim);
            if dim != expected {
                return Err(BackendError::DimensionDrift { expected, got: dim });
            }
            out.extend(resp.vectors);
        }
        Ok(out)
    }
}
