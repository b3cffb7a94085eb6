use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{count_masks, Backend, BackendError, BackendInfo};
use crate::cfgen::MaskCandidate;
use crate::domain::{Matrix, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// `p = softmax(W · pooled + b)`
    Softmax,
    /// `p = 1/C + W · pooled + b`; columns of `W` and `b` must sum to zero.
    Linear,
}

/// Closed-form classifier head over mean-pooled embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockHead {
    pub kind: HeadKind,
    /// One row of `embed_dim` weights per class.
    pub weights: Matrix,
    #[serde(default)]
    pub bias: Vec<f64>,
}

/// Tables and formulas behind [`MockBackend`].
///
/// Lookups take precedence; anything not in a table falls back to a formula:
///
/// * embeddings: the text is lowercased and split by [`MockBackend::tokenize`];
///   each token maps to `word_vectors[token]`, or to zeros for `[CLS]`/`[SEP]`,
///   or to a vector derived from SHA-256 of the token.
/// * predict: the head applied to the embeddings.
/// * sentence vectors: the mean of the non-boundary token vectors.
/// * fill-mask: `default_fill` for every mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockFixtures {
    pub name: String,
    pub embed_dim: usize,
    pub head: MockHead,
    pub predict: BTreeMap<String, Vec<f64>>,
    pub embeddings: BTreeMap<String, Matrix>,
    pub word_vectors: BTreeMap<String, Vec<f64>>,
    pub fill_mask: BTreeMap<String, Vec<Vec<MaskCandidate>>>,
    pub default_fill: Vec<MaskCandidate>,
    pub sentence_vectors: BTreeMap<String, Vec<f64>>,
}

impl Default for MockFixtures {
    fn default() -> Self {
        MockFixtures {
            name: "mock".into(),
            embed_dim: 2,
            head: MockHead {
                kind: HeadKind::Softmax,
                weights: vec![vec![0.0, 0.0], vec![1.0, -1.0]],
                bias: vec![],
            },
            predict: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            word_vectors: BTreeMap::new(),
            fill_mask: BTreeMap::new(),
            default_fill: Vec::new(),
            sentence_vectors: BTreeMap::new(),
        }
    }
}

/// Deterministic in-process backend built from [`MockFixtures`]. No I/O.
#[derive(Debug, Clone)]
pub struct MockBackend {
    fx: MockFixtures,
}

const BOUNDARY: [&str; 2] = ["[CLS]", "[SEP]"];

impl MockBackend {
    pub fn new(mut fx: MockFixtures) -> Result<Self, BackendError> {
        let bad = |m: String| Err(BackendError::Fixture(m));
        let classes = fx.head.weights.len();
        if classes < 2 {
            return bad("head needs at least two classes".into());
        }
        if fx.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if fx.head.weights.iter().any(|r| r.len() != fx.embed_dim) {
            return bad(format!("head weights must have {} columns", fx.embed_dim));
        }
        if fx.head.bias.is_empty() {
            fx.head.bias = vec![0.0; classes];
        }
        if fx.head.bias.len() != classes {
            return bad("bias length must equal the class count".into());
        }
        if fx.head.kind == HeadKind::Linear {
            let col_sum = |j: usize| fx.head.weights.iter().map(|r| r[j]).sum::<f64>();
            if (0..fx.embed_dim).any(|j| col_sum(j).abs() > 1e-12)
                || fx.head.bias.iter().sum::<f64>().abs() > 1e-12
            {
                return bad("linear head weights and bias must sum to zero over classes".into());
            }
        }
        let dim_ok = |v: &Vec<f64>| v.len() == fx.embed_dim;
        if !fx.word_vectors.values().all(dim_ok)
            || !fx.embeddings.values().flatten().all(dim_ok)
        {
            return bad(format!("vectors must have {} dims", fx.embed_dim));
        }
        let sentence_dims: Vec<usize> = fx.sentence_vectors.values().map(Vec::len).collect();
        if sentence_dims.windows(2).any(|w| w[0] != w[1]) {
            return bad("sentence vectors must share one dimensionality".into());
        }
        if let Some(p) = fx.predict.values().find(|p| p.len() != classes) {
            return bad(format!("predict table entry {p:?} has the wrong class count"));
        }
        for lists in fx.fill_mask.values_mut() {
            for list in lists {
                list.sort_by(|a, b| b.score.total_cmp(&a.score));
            }
        }
        fx.default_fill.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(MockBackend { fx })
    }

    pub fn from_json(json: &str) -> Result<Self, BackendError> {
        let fx: MockFixtures =
            serde_json::from_str(json).map_err(|e| BackendError::Fixture(e.to_string()))?;
        Self::new(fx)
    }

    pub fn fixtures(&self) -> &MockFixtures {
        &self.fx
    }

    pub fn classes(&self) -> usize {
        self.fx.head.weights.len()
    }

    /// Lowercases, splits on whitespace, splits every non-alphanumeric
    /// character (other than `'`) into its own token and adds `[CLS]`/`[SEP]`.
    pub fn tokenize(text: &str) -> Vec<String> {
        let mut out = vec![BOUNDARY[0].to_string()];
        for word in text.split_whitespace() {
            let mut cur = String::new();
            for c in word.chars().flat_map(char::to_lowercase) {
                if c.is_alphanumeric() || c == '\'' {
                    cur.push(c);
                } else {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                    out.push(c.to_string());
                }
            }
            if !cur.is_empty() {
                out.push(cur);
            }
        }
        out.push(BOUNDARY[1].to_string());
        out
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.fx.word_vectors.get(token) {
            return v.clone();
        }
        if BOUNDARY.contains(&token) {
            return vec![0.0; self.fx.embed_dim];
        }
        hashed_vector(token, self.fx.embed_dim)
    }

    fn embed_unchecked(&self, text: &str) -> Matrix {
        if let Some(m) = self.fx.embeddings.get(text) {
            return m.clone();
        }
        Self::tokenize(text)
            .iter()
            .map(|t| self.token_vector(t))
            .collect()
    }

    /// Probabilities the head assigns to `embeddings`.
    pub fn head_probabilities(&self, embeddings: &Matrix) -> Result<Vec<f64>, BackendError> {
        let dim = self.fx.embed_dim;
        if embeddings.is_empty() {
            return Err(BackendError::EmptyInput("embedding matrix"));
        }
        if let Some(r) = embeddings.iter().find(|r| r.len() != dim) {
            return Err(BackendError::Shape {
                expected: dim,
                got: r.len(),
            });
        }
        let rows = embeddings.len() as f64;
        let pooled: Vec<f64> = (0..dim)
            .map(|j| embeddings.iter().map(|r| r[j]).sum::<f64>() / rows)
            .collect();
        let scores: Vec<f64> = self
            .fx
            .head
            .weights
            .iter()
            .zip(&self.fx.head.bias)
            .map(|(w, b)| w.iter().zip(&pooled).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect();
        let probs = match self.fx.head.kind {
            HeadKind::Softmax => {
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                exp.into_iter().map(|e| e / z).collect()
            }
            HeadKind::Linear => {
                let base = 1.0 / scores.len() as f64;
                scores.iter().map(|s| base + s).collect()
            }
        };
        Ok(probs)
    }

    /// For a linear head: the matrix `phi` with `p_class(E) = p_class(0) + <phi, E>`
    /// for `rows`-token inputs.
    pub fn linear_coefficients(&self, rows: usize, class: usize) -> Option<Matrix> {
        if self.fx.head.kind != HeadKind::Linear || rows == 0 {
            return None;
        }
        let w = self.fx.head.weights.get(class)?;
        let row: Vec<f64> = w.iter().map(|x| x / rows as f64).collect();
        Some(vec![row; rows])
    }
}

/// Deterministic pseudo-embedding in `[-1, 1]^dims` for an unknown token.
fn hashed_vector(token: &str, dims: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims);
    let mut block = 0u32;
    while out.len() < dims {
        let digest = Sha256::new()
            .chain_update(block.to_le_bytes())
            .chain_update(token.as_bytes())
            .finalize();
        for chunk in digest.chunks_exact(2) {
            if out.len() == dims {
                break;
            }
            let v = u16::from_le_bytes([chunk[0], chunk[1]]) as f64;
            out.push(v / 32767.5 - 1.0);
        }
        block += 1;
    }
    out
}

impl Backend for MockBackend {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            name: self.fx.name.clone(),
            classes: self.classes(),
            embed_dim: self.fx.embed_dim,
        })
    }

    fn predict(&self, texts: &[String]) -> Result<Vec<Prediction>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::EmptyInput("predict batch"));
        }
        texts
            .iter()
            .map(|t| {
                let probs = match self.fx.predict.get(t) {
                    Some(p) => p.clone(),
                    None => self.head_probabilities(&self.embed(t)?)?,
                };
                Ok(Prediction::from_probabilities(probs)?)
            })
            .collect()
    }

    fn embed(&self, text: &str) -> Result<Matrix, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyInput("text"));
        }
        Ok(self.embed_unchecked(text))
    }

    fn predict_embeddings(&self, embeddings: &Matrix) -> Result<Prediction, BackendError> {
        Ok(Prediction::from_probabilities(self.head_probabilities(embeddings)?)?)
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
        let lists = match self.fx.fill_mask.get(masked_text) {
            Some(lists) if lists.len() == masks => lists.clone(),
            Some(lists) => {
                return Err(BackendError::Fixture(format!(
                    "fill-mask entry has {} lists for {masks} masks",
                    lists.len()
                )))
            }
            None => vec![self.fx.default_fill.clone(); masks],
        };
        Ok(lists
            .into_iter()
            .map(|mut l| {
                l.truncate(top_k);
                l
            })
            .collect())
    }

    fn sentence_embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::EmptyInput("sentence batch"));
        }
        let table_dim = self.fx.sentence_vectors.values().next().map(Vec::len);
        texts
            .iter()
            .map(|t| {
                if let Some(v) = self.fx.sentence_vectors.get(t) {
                    return Ok(v.clone());
                }
                let dim = self.fx.embed_dim;
                if table_dim.is_some_and(|d| d != dim) {
                    return Err(BackendError::Fixture(format!(
                        "no sentence vector for {t:?} and word vectors have a different dimensionality"
                    )));
                }
                let tokens = Self::tokenize(t);
                let words = &tokens[1..tokens.len() - 1];
                let mut v = vec![0.0; dim];
                for w in words {
                    for (acc, x) in v.iter_mut().zip(self.token_vector(w)) {
                        *acc += x;
                    }
                }
                if !words.is_empty() {
                    v.iter_mut().for_each(|x| *x /= words.len() as f64);
                }
                Ok(v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend(json: &str) -> MockBackend {
        MockBackend::from_json(json).unwrap()
    }

    #[test]
    fn table_driven_predict() {
        let b = backend(r#"{"predict": {"good film": [0.1, 0.9]}}"#);
        let p = b.predict(&["good film".into()]).unwrap();
        assert_eq!(p[0].probabilities, vec![0.1, 0.9]);
        assert_eq!(p[0].predicted_class, 1);
    }

    #[test]
    fn invalid_predict_table_is_rejected_at_call() {
        let b = backend(r#"{"predict": {"x": [0.6, 0.6]}}"#);
        assert!(matches!(
            b.predict(&["x".into()]),
            Err(BackendError::Prediction(_))
        ));
    }

    #[test]
    fn batch_order_is_preserved() {
        let b = backend(r#"{"predict": {"a": [0.2, 0.8], "b": [0.7, 0.3]}}"#);
        let p = b.predict(&["b".into(), "a".into()]).unwrap();
        assert_eq!(p[0].probabilities, vec![0.7, 0.3]);
        assert_eq!(p[1].probabilities, vec![0.2, 0.8]);
    }

    #[test]
    fn softmax_head_by_hand() {
        let b = MockBackend::new(MockFixtures::default()).unwrap();
        let p = b.predict_embeddings(&vec![vec![0.5, 0.2]]).unwrap();
        // logits [0, 0.3]
        let p1 = 1.0 / (1.0 + (-0.3f64).exp());
        assert!((p.probabilities[1] - p1).abs() < 1e-15);
        assert!((p1 - 0.574_442_516_811_659_9).abs() < 1e-15);
        assert!(matches!(
            b.predict_embeddings(&vec![vec![0.5, 0.2, 0.1]]),
            Err(BackendError::Shape { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn embed_table_and_consistency() {
        let b = backend(r#"{"embeddings": {"a b": [[1, 0], [0, 1]]}}"#);
        assert_eq!(b.embed("a b").unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(b.embed("some text").unwrap(), b.embed("some text").unwrap());
        assert!(matches!(b.embed(""), Err(BackendError::EmptyInput(_))));
        let text = "an unlisted sentence".to_string();
        let direct = b.predict(std::slice::from_ref(&text)).unwrap();
        let via = b.predict_embeddings(&b.embed(&text).unwrap()).unwrap();
        assert!((direct[0].probabilities[1] - via.probabilities[1]).abs() < 1e-12);
    }

    #[test]
    fn fill_mask_tables() {
        let b = backend(
            r#"{"fill_mask": {"I [MASK] it": [[{"token":"hate","score":-2},{"token":"like","score":-1}]]},
                "default_fill": [{"token":"ok","score":-1}]}"#,
        );
        let l = b.fill_mask("I [MASK] it", 5).unwrap();
        assert_eq!(l[0][0].token, "like");
        assert_eq!(l[0].len(), 2);
        assert_eq!(b.fill_mask("I [MASK] it", 1).unwrap()[0].len(), 1);
        let d = b.fill_mask("[MASK] and [MASK]", 5).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[1][0].token, "ok");
        assert_eq!(b.fill_mask("no mask", 5), Err(BackendError::NoMask));
    }

    #[test]
    fn sentence_vectors() {
        let b = backend(r#"{"sentence_vectors": {"x": [1, 0], "y": [0, 1]}}"#);
        let v = b.sentence_embed(&["x".into(), "y".into()]).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let w = backend(r#"{"word_vectors": {"good": [1, 0], "film": [0, 1]}}"#);
        assert_eq!(w.sentence_embed(&["Good film".into()]).unwrap()[0], vec![0.5, 0.5]);
    }

    #[test]
    fn tokenizer() {
        assert_eq!(
            MockBackend::tokenize("It's GREAT, really!"),
            ["[CLS]", "it's", "great", ",", "really", "!", "[SEP]"]
        );
    }

    #[test]
    fn linear_head_validation_and_coefficients() {
        let bad = r#"{"head": {"kind": "linear", "weights": [[0.1, 0], [0.1, 0]]}}"#;
        assert!(MockBackend::from_json(bad).is_err());
        let b = backend(r#"{"head": {"kind": "linear", "weights": [[-0.1, 0.05], [0.1, -0.05]]}}"#);
        let phi = b.linear_coefficients(4, 1).unwrap();
        assert_eq!(phi.len(), 4);
        assert!((phi[0][0] - 0.025).abs() < 1e-15);
        let p = b.predict_embeddings(&vec![vec![1.0, 0.0]; 2]).unwrap();
        assert!((p.probabilities[1] - 0.6).abs() < 1e-12);
    }
}
