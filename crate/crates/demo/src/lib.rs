//! Browser bindings. Every export takes and returns JSON strings so the page
//! needs no generated type glue beyond the function shims.
//!
//! The plain functions (`*_json`) are what the bindings call; they also run
//! natively for tests.

use serde::Deserialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use scene_core::backend::MockBackend;
use scene_core::cfgen::{self, MaskCandidate, SamplingParams};
use scene_core::domain::{Aggregation, AttributionScores, Instance};
use scene_core::extraction;
use scene_core::pipeline::{Column, COLUMNS};
use scene_core::reference;

const TABLES: [(&str, &str); 3] = [
    ("cnn", include_str!("../../core/fixtures/reference_tables/cnn.tsv")),
    ("rnn", include_str!("../../core/fixtures/reference_tables/rnn.tsv")),
    ("transformer", include_str!("../../core/fixtures/reference_tables/transformer.tsv")),
];

#[derive(Deserialize)]
struct SelectRequest {
    text: String,
    /// One score per token, boundaries included. Missing entries count as 0.
    #[serde(default)]
    scores: Vec<f64>,
    v: usize,
    #[serde(default)]
    rank_by_abs: bool,
}

#[derive(Deserialize)]
struct GenerateRequest {
    text: String,
    positions: Vec<usize>,
    /// Proposals per masked position, in ascending position order.
    substitutes: Vec<Vec<String>>,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default)]
    seed: u64,
}

fn default_k() -> usize {
    cfgen::DEFAULT_K
}

fn parse<'a, T: Deserialize<'a>>(s: &'a str) -> Result<T, String> {
    serde_json::from_str(s).map_err(|e| format!("bad request: {e}"))
}

pub fn tokenize_json(text: &str) -> String {
    json!(MockBackend::tokenize(text)).to_string()
}

pub fn select_tokens_json(request: &str) -> Result<String, String> {
    let req: SelectRequest = parse(request)?;
    let tokens = MockBackend::tokenize(&req.text);
    let mut scores = req.scores;
    scores.resize(tokens.len(), 0.0);
    let (weights, sel) = extraction::significant_tokens(
        &tokens,
        &AttributionScores::Scalar(scores),
        Aggregation::Direct,
        req.v,
        req.rank_by_abs,
    )
    .map_err(|e| e.to_string())?;
    let eligible: Vec<usize> = extraction::filter_candidates(&tokens).into_iter().collect();
    Ok(json!({
        "tokens": tokens,
        "weights": weights,
        "eligible": eligible,
        "selected": sel.selected,
        "degenerate": sel.degenerate,
    })
    .to_string())
}

pub fn generate_json(request: &str) -> Result<String, String> {
    let req: GenerateRequest = parse(request)?;
    let tokens = MockBackend::tokenize(&req.text);
    let instance = Instance {
        id: "demo".into(),
        text: req.text,
        tokens,
        gold_label: 0,
        rationale: None,
    };
    let masked = cfgen::mask_text(&instance, &req.positions).map_err(|e| e.to_string())?;
    if req.substitutes.len() != masked.slots().len() {
        return Err(format!(
            "{} substitute lists for {} masks",
            req.substitutes.len(),
            masked.slots().len()
        ));
    }
    let filtered: Vec<Vec<String>> = masked
        .slots()
        .iter()
        .zip(&req.substitutes)
        .map(|(slot, words)| {
            let cands: Vec<MaskCandidate> = words
                .iter()
                .map(|w| MaskCandidate {
                    token: w.trim().to_string(),
                    score: 0.0,
                })
                .collect();
            cfgen::filter_substitutes(&cands, &slot.original)
        })
        .collect();
    let params = SamplingParams {
        k: req.k,
        ..SamplingParams::default()
    };
    let cfs = cfgen::sample_counterfactuals(&masked, &filtered, params, req.seed).map_err(|e| e.to_string())?;
    Ok(json!({
        "masked": masked.masked(),
        "aligned": masked.aligned(),
        "usable": filtered,
        "counterfactuals": cfs,
    })
    .to_string())
}

/// Correlations against human agreement for a bundled table (`cnn`, `rnn`,
/// `transformer`) or, for any other input, the input parsed as TSV.
pub fn correlations_json(table: &str) -> Result<String, String> {
    let tsv = TABLES.iter().find(|(n, _)| *n == table).map_or(table, |(_, t)| t);
    let rows = reference::parse_table(tsv)?;
    let rhos: Vec<Value> = [Column::ValiditySoft, Column::CSoft, Column::Infidelity, Column::AverageTime]
        .into_iter()
        .map(|c| {
            let rho = reference::correlation(&rows, c).ok();
            json!({ "metric": c.key(), "label": c.label(), "spearman_rho": rho })
        })
        .collect();
    let columns: Vec<Value> = COLUMNS
        .iter()
        .map(|c| json!({ "key": c.key(), "label": c.label(), "higher_is_better": c.higher_is_better() }))
        .collect();
    let rows: Vec<Value> = rows.iter().map(|r| json!({ "method": r.method, "values": r.values })).collect();
    Ok(json!({ "columns": columns, "rows": rows, "correlations": rhos }).to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn tokenize(text: &str) -> String {
    tokenize_json(text)
}

#[wasm_bindgen(js_name = selectTokens)]
pub fn select_tokens(request: &str) -> Result<String, JsError> {
    js(select_tokens_json(request))
}

#[wasm_bindgen]
pub fn generate(request: &str) -> Result<String, JsError> {
    js(generate_json(request))
}

#[wasm_bindgen]
pub fn correlations(table: &str) -> Result<String, JsError> {
    js(correlations_json(table))
}
