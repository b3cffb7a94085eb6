//! Golden request/response cases for the wire protocol.
//!
//! Each case file holds an endpoint, a request body, the expected status
//! and, for the reference mock fixture, the exact response. Any backend can
//! be held to the structural checks; only the mock is held to the exact
//! responses.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::{count_masks, wire};

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GoldenCase {
    pub name: String,
    pub endpoint: String,
    pub request: Value,
    pub status: u16,
    /// Exact response from the reference mock fixture.
    #[serde(default)]
    pub response: Option<Value>,
    /// For `predict_embeddings`: the text whose embeddings make up the
    /// request. The result must agree with `predict` on that text.
    #[serde(default)]
    pub consistent_with: Option<String>,
}

/// Reads every `*.json` case in `dir`, sorted by file name.
pub fn load_cases(dir: &Path) -> Result<Vec<GoldenCase>, String> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
        })
        .collect()
}

/// Probability agreement required between `predict` and
/// `predict_embeddings` on the same input.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-4;

fn arr<'a>(v: &'a Value, key: &str) -> Result<&'a Vec<Value>, String> {
    v.get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| format!("missing array {key:?}"))
}

fn nums(v: &Value) -> Result<Vec<f64>, String> {
    v.as_array()
        .ok_or("expected an array of numbers")?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| format!("not a number: {x}")))
        .collect()
}

fn check_probs(p: &[f64], predicted: &Value) -> Result<(), String> {
    if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(format!("probability outside [0, 1]: {p:?}"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(format!("probabilities sum to {sum}"));
    }
    let c = predicted.as_u64().ok_or("predicted class is not an index")? as usize;
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if p.get(c) != Some(&max) {
        return Err(format!("predicted {c} is not an argmax of {p:?}"));
    }
    Ok(())
}

/// Structural checks every conforming backend must pass.
pub fn check_structure(case: &GoldenCase, status: u16, body: &str) -> Result<(), String> {
    if status != case.status {
        return Err(format!("status {status}, expected {}: {body}", case.status));
    }
    let v: Value = serde_json::from_str(body).map_err(|e| format!("body is not JSON: {e}"))?;
    if status != 200 {
        return match v.get("error").and_then(Value::as_str) {
            Some(_) => Ok(()),
            None => Err("error response without an \"error\" string".into()),
        };
    }
    let req = &case.request;
    match case.endpoint.as_str() {
        wire::INFO => {
            v.get("name").and_then(Value::as_str).ok_or("info without name")?;
            let classes = v.get("classes").and_then(Value::as_u64).ok_or("info without classes")?;
            let dim = v.get("embed_dim").and_then(Value::as_u64).ok_or("info without embed_dim")?;
            if classes < 2 || dim == 0 {
                return Err(format!("implausible info {v}"));
            }
        }
        wire::PREDICT => {
            let n = arr(req, "texts")?.len();
            let probs = arr(&v, "probs")?;
            let predicted = arr(&v, "predicted")?;
            if probs.len() != n || predicted.len() != n {
                return Err(format!("{n} texts, {} rows, {} classes", probs.len(), predicted.len()));
            }
            for (p, c) in probs.iter().zip(predicted) {
                check_probs(&nums(p)?, c)?;
            }
        }
        wire::EMBED => {
            let rows = arr(&v, "embeddings")?;
            let dims: Vec<usize> = rows.iter().map(|r| nums(r).map(|r| r.len())).collect::<Result<_, _>>()?;
            if dims.is_empty() || dims.iter().any(|&d| d != dims[0] || d == 0) {
                return Err(format!("ragged or empty embedding matrix: {dims:?}"));
            }
        }
        wire::PREDICT_EMBEDDINGS => {
            check_probs(&nums(v.get("probs").ok_or("missing probs")?)?, v.get("predicted").unwrap_or(&Value::Null))?;
        }
        wire::FILL_MASK => {
            let text = req.get("text").and_then(Value::as_str).ok_or("request without text")?;
            let top_k = req.get("top_k").and_then(Value::as_u64).ok_or("request without top_k")? as usize;
            let masks = arr(&v, "masks")?;
            if masks.len() != count_masks(text) {
                return Err(format!("{} lists for {} masks", masks.len(), count_masks(text)));
            }
            for list in masks {
                let list = list.as_array().ok_or("mask entry is not a list")?;
                if list.len() > top_k {
                    return Err(format!("{} candidates for top_k {top_k}", list.len()));
                }
                let scores: Vec<f64> = list
                    .iter()
                    .map(|c| {
                        c.get("token").and_then(Value::as_str).ok_or("candidate without token")?;
                        c.get("score").and_then(Value::as_f64).ok_or("candidate without score")
                    })
                    .collect::<Result<_, _>>()?;
                if scores.windows(2).any(|w| w[0] < w[1]) {
                    return Err(format!("scores not descending: {scores:?}"));
                }
            }
        }
        wire::SENTENCE_EMBED => {
            let n = arr(req, "texts")?.len();
            let vectors = arr(&v, "vectors")?;
            if vectors.len() != n {
                return Err(format!("{} vectors for {n} texts", vectors.len()));
            }
            let dims: Vec<usize> = vectors.iter().map(|r| nums(r).map(|r| r.len())).collect::<Result<_, _>>()?;
            if dims.iter().any(|&d| d != dims[0] || d == 0) {
                return Err(format!("vector dimensions differ: {dims:?}"));
            }
        }
        other => return Err(format!("200 from unknown endpoint {other}")),
    }
    Ok(())
}

fn close(a: &Value, b: &Value, tol: f64) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_f64(), y.as_f64()) {
            (Some(x), Some(y)) => (x - y).abs() <= tol,
            _ => x == y,
        },
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(a, b)| close(a, b, tol))
        }
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, a)| y.get(k).is_some_and(|b| close(a, b, tol)))
        }
        _ => a == b,
    }
}

/// Compares a body with the case's recorded response, numbers within `tol`.
pub fn check_exact(case: &GoldenCase, body: &str, tol: f64) -> Result<(), String> {
    let Some(expected) = &case.response else {
        return Ok(());
    };
    let got: Value = serde_json::from_str(body).map_err(|e| e.to_string())?;
    if close(&got, expected, tol) {
        Ok(())
    } else {
        Err(format!("got {got}, expected {expected}"))
    }
}

/// Outcome of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub outcome: Result<(), String>,
}

/// Runs every case through `send(endpoint, body) -> (status, body)`.
///
/// Each request is sent twice and must get the same answer. With `exact`
/// set, bodies must also match the recorded responses.
pub fn run_suite<F>(cases: &[GoldenCase], mut send: F, exact: bool) -> Vec<CaseResult>
where
    F: FnMut(&str, &[u8]) -> (u16, String),
{
    cases
        .iter()
        .map(|case| {
            let body = serde_json::to_vec(&case.request).expect("request serializes");
            let outcome = (|| {
                let (status, first) = send(&case.endpoint, &body);
                check_structure(case, status, &first)?;
                let (status2, second) = send(&case.endpoint, &body);
                if status2 != status || (status == 200 && second != first) {
                    return Err("repeated request gave a different answer".to_string());
                }
                if exact && status == 200 {
                    check_exact(case, &first, 1e-12)?;
                }
                if let Some(text) = &case.consistent_with {
                    let req = serde_json::json!({ "texts": [text] });
                    let (s, p) = send(wire::PREDICT, req.to_string().as_bytes());
                    if s != 200 {
                        return Err(format!("predict for consistency failed with {s}"));
                    }
                    let p: Value = serde_json::from_str(&p).map_err(|e| e.to_string())?;
                    let a = nums(&arr(&p, "probs")?[0])?;
                    let e: Value = serde_json::from_str(&first).map_err(|e| e.to_string())?;
                    let b = nums(e.get("probs").ok_or("missing probs")?)?;
                    if a.len() != b.len()
                        || a.iter().zip(&b).any(|(x, y)| (x - y).abs() > CONSISTENCY_TOLERANCE)
                    {
                        return Err(format!("predict {a:?} vs predict_embeddings {b:?}"));
                    }
                }
                Ok(())
            })();
            CaseResult {
                name: case.name.clone(),
                outcome,
            }
        })
        .collect()
}
