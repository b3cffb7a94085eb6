//! JSON bodies of the wire protocol. Every endpoint is a POST.
//!
//! | endpoint                | request                          | response                                   |
//! |-------------------------|----------------------------------|--------------------------------------------|
//! | `/v1/predict`           | `{"texts":[str]}`                | `{"probs":[[num]],"predicted":[int]}`      |
//! | `/v1/embed`             | `{"text":str}`                   | `{"embeddings":[[num]]}`                   |
//! | `/v1/predict_embeddings`| `{"embeddings":[[num]]}`         | `{"probs":[num],"predicted":int}`          |
//! | `/v1/fill_mask`         | `{"text":str,"top_k":int}`       | `{"masks":[[{"token":str,"score":num}]]}`  |
//! | `/v1/sentence_embed`    | `{"texts":[str]}`                | `{"vectors":[[num]]}`                      |
//! | `/v1/info`              | `{}`                             | `{"name":str,"classes":int,"embed_dim":int}` |
//!
//! Failures carry an HTTP status and `{"error": str}`.

use serde::{Deserialize, Serialize};

use crate::cfgen::MaskCandidate;
use crate::domain::Matrix;

pub const PREDICT: &str = "/v1/predict";
pub const EMBED: &str = "/v1/embed";
pub const PREDICT_EMBEDDINGS: &str = "/v1/predict_embeddings";
pub const FILL_MASK: &str = "/v1/fill_mask";
pub const SENTENCE_EMBED: &str = "/v1/sentence_embed";
pub const INFO: &str = "/v1/info";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextsRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probs: Vec<Vec<f64>>,
    pub predicted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embeddings: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictEmbeddingsRequest {
    pub embeddings: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictEmbeddingsResponse {
    pub probs: Vec<f64>,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillMaskRequest {
    pub text: String,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillMaskResponse {
    pub masks: Vec<Vec<MaskCandidate>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InfoRequest {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}
