//! Model inference backends.
//!
//! One protocol covers the classifier under evaluation, the fill-mask model
//! and the sentence encoder. [`MockBackend`] implements it in process from
//! fixture tables; [`HttpBackend`] talks to a server over the JSON wire
//! protocol in [`wire`]; [`CachedBackend`] memoizes either.

mod cache;
pub mod conformance;
mod mock;
pub mod wire;

#[cfg(feature = "http")]
mod http;
#[cfg(feature = "http")]
pub mod server;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfgen::MaskCandidate;
use crate::domain::{Matrix, Prediction, PredictionError};

pub use cache::CachedBackend;
#[cfg(feature = "http")]
pub use http::HttpBackend;
pub use mock::{HeadKind, MockBackend, MockFixtures, MockHead};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend returned HTTP {status}: {message}")]
    Status { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid prediction: {0}")]
    Prediction(#[from] PredictionError),
    #[error("embedding shape mismatch: expected {expected} dims, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("sentence embedding dimensionality changed from {expected} to {got}")]
    DimensionDrift { expected: usize, got: usize },
    #[error("no {marker} marker in fill-mask input", marker = crate::cfgen::MASK_MARKER)]
    NoMask,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid fixture: {0}")]
    Fixture(String),
}

impl BackendError {
    /// Whether the failure is about reaching the service rather than about
    /// the request.
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Unreachable(_))
    }
}

/// What `/v1/info` reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub classes: usize,
    pub embed_dim: usize,
}

/// Where and how to reach an HTTP backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendDescriptor {
    pub base_url: String,
    pub timeout_seconds: f64,
    pub max_batch: usize,
    pub retries: usize,
    pub max_in_flight: usize,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        BackendDescriptor {
            base_url: "http://127.0.0.1:8700".into(),
            timeout_seconds: 30.0,
            max_batch: 32,
            retries: 2,
            max_in_flight: 8,
        }
    }
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_seconds.is_finite() && self.timeout_seconds > 0.0) {
            return Err(format!("timeout_seconds must be positive, got {}", self.timeout_seconds));
        }
        if self.max_batch == 0 {
            return Err("max_batch must be at least 1".into());
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        if self.base_url.is_empty() {
            return Err("base_url is empty".into());
        }
        Ok(())
    }
}

/// The inference operations the harness needs.
///
/// All operations are read-only and deterministic for a given input.
pub trait Backend: Send + Sync {
    fn info(&self) -> Result<BackendInfo, BackendError>;

    /// Class probabilities for each text, in input order.
    fn predict(&self, texts: &[String]) -> Result<Vec<Prediction>, BackendError>;

    /// The classifier's input embedding matrix (tokens x dims).
    fn embed(&self, text: &str) -> Result<Matrix, BackendError>;

    /// Classifier output for a (possibly perturbed) embedding matrix.
    fn predict_embeddings(&self, embeddings: &Matrix) -> Result<Prediction, BackendError>;

    /// One ranked candidate list per `[MASK]`, in textual order.
    fn fill_mask(
        &self,
        masked_text: &str,
        top_k: usize,
    ) -> Result<Vec<Vec<MaskCandidate>>, BackendError>;

    /// Fixed-length sentence vectors, one per text.
    fn sentence_embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

macro_rules! forward_backend {
    ($($ty:ty),*) => {$(
        impl<B: Backend + ?Sized> Backend for $ty {
            fn info(&self) -> Result<BackendInfo, BackendError> {
                (**self).info()
            }
            fn predict(&self, texts: &[String]) -> Result<Vec<Prediction>, BackendError> {
                (**self).predict(texts)
            }
            fn embed(&self, text: &str) -> Result<Matrix, BackendError> {
                (**self).embed(text)
            }
            fn predict_embeddings(&self, embeddings: &Matrix) -> Result<Prediction, BackendError> {
                (**self).predict_embeddings(embeddings)
            }
            fn fill_mask(
                &self,
                masked_text: &str,
                top_k: usize,
            ) -> Result<Vec<Vec<MaskCandidate>>, BackendError> {
                (**self).fill_mask(masked_text, top_k)
            }
            fn sentence_embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
                (**self).sentence_embed(texts)
            }
        }
    )*};
}

forward_backend!(&B, Box<B>, Arc<B>);

/// Number of `[MASK]` markers in `text`.
pub fn count_masks(text: &str) -> usize {
    text.matches(crate::cfgen::MASK_MARKER).count()
}
