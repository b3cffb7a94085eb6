//! Shared data types and the line-delimited JSON input formats.
//!
//! Corpus records look like
//! `{"id": "s1", "text": "...", "tokens": ["[CLS]", ..., "[SEP]"], "label": 1, "rationale": [0, 1, ...]}`
//! and attribution records like
//! `{"instance_id": "s1", "method": "saliency", "scores": [...], "seconds": 0.003}`
//! where `scores` holds one scalar or one vector per token.
//!
//! The first and last tokens of every instance are boundary markers. They stay
//! in the token list so attribution scores line up one-to-one with tokens.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token embedding matrix, one row per token.
pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: instance {id:?} has {tokens} tokens but rationale of length {rationale}")]
    RationaleLength {
        line: usize,
        id: String,
        tokens: usize,
        rationale: usize,
    },
    #[error("line {line}: instance {id:?} has no tokens")]
    EmptyTokens { line: usize, id: String },
    #[error("line {line}: duplicate instance id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: unknown instance id {id:?}")]
    UnknownInstance { line: usize, id: String },
    #[error("line {line}: {method}/{id}: {scores} scores for {tokens} tokens")]
    AttributionLength {
        line: usize,
        id: String,
        method: String,
        scores: usize,
        tokens: usize,
    },
    #[error("line {line}: {method}/{id}: vector entries have mixed dimensionality ({first} vs {other})")]
    MixedDimensions {
        line: usize,
        id: String,
        method: String,
        first: usize,
        other: usize,
    },
    #[error("line {line}: {method}/{id}: mixed scalar and vector entries")]
    MixedShape {
        line: usize,
        id: String,
        method: String,
    },
    #[error("line {line}: {method}/{id}: non-finite attribution value")]
    NonFinite {
        line: usize,
        id: String,
        method: String,
    },
    #[error("line {line}: {method}/{id}: negative or non-finite seconds")]
    BadSeconds {
        line: usize,
        id: String,
        method: String,
    },
    #[error("line {line}: duplicate attribution record for {method}/{id}")]
    DuplicateAttribution {
        line: usize,
        id: String,
        method: String,
    },
}

/// One text sample of the evaluation corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    #[serde(rename = "label")]
    pub gold_label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "rationale_serde")]
    pub rationale: Option<Vec<bool>>,
}

impl Instance {
    /// Positions of the two boundary markers.
    pub fn boundary_positions(&self) -> (usize, usize) {
        (0, self.tokens.len().saturating_sub(1))
    }
}

mod rationale_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(mask: &Option<Vec<bool>>, s: S) -> Result<S::Ok, S::Error> {
        match mask {
            Some(mask) => s.collect_seq(mask.iter().map(|&b| u8::from(b))),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<bool>>, D::Error> {
        let raw: Option<Vec<u8>> = Option::deserialize(d)?;
        raw.map(|bits| {
            bits.into_iter()
                .map(|b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(serde::de::Error::custom(format!(
                        "rationale entries must be 0 or 1, got {other}"
                    ))),
                })
                .collect()
        })
        .transpose()
    }
}

/// Per-token attribution scores: one scalar per token, or one vector over
/// embedding dimensions per token.
#[derive(Debug, Clone, PartialEq)]
pub enum AttributionScores {
    Scalar(Vec<f64>),
    Vector(Vec<Vec<f64>>),
}

impl AttributionScores {
    pub fn len(&self) -> usize {
        match self {
            AttributionScores::Scalar(v) => v.len(),
            AttributionScores::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embedding dimensionality of vector scores.
    pub fn dims(&self) -> Option<usize> {
        match self {
            AttributionScores::Scalar(_) => None,
            AttributionScores::Vector(v) => v.first().map(Vec::len),
        }
    }
}

impl Serialize for AttributionScores {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AttributionScores::Scalar(v) => v.serialize(s),
            AttributionScores::Vector(v) => v.serialize(s),
        }
    }
}

/// One explanation method's attributions for one instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionRecord {
    pub instance_id: String,
    pub method: String,
    pub scores: AttributionScores,
    #[serde(rename = "seconds", skip_serializing_if = "Option::is_none")]
    pub attribution_seconds: Option<f64>,
}

/// Reduction of per-dimension attributions to one weight per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    L2,
    Direct,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Mean, Aggregation::L2, Aggregation::Direct];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::L2 => "l2",
            Aggregation::Direct => "direct",
        }
    }

    /// Whether this mode reduces the given score shape.
    pub fn accepts(self, scores: &AttributionScores) -> bool {
        matches!(
            (self, scores),
            (Aggregation::Direct, AttributionScores::Scalar(_))
                | (Aggregation::Mean | Aggregation::L2, AttributionScores::Vector(_))
        )
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Aggregation::Mean),
            "l2" => Ok(Aggregation::L2),
            "direct" => Ok(Aggregation::Direct),
            other => Err(format!("unknown aggregation {other:?} (expected mean, l2 or direct)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedToken {
    pub position: usize,
    pub weight: f64,
}

/// Top-V token positions chosen for masking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificantTokenSet {
    pub instance_id: String,
    pub method: String,
    pub aggregation: Aggregation,
    /// Descending by weight, ties by position.
    pub selected: Vec<SelectedToken>,
    pub requested: usize,
    /// Fewer than `requested` positions were eligible.
    pub degenerate: bool,
}

impl SignificantTokenSet {
    pub fn positions(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.position).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub position: usize,
    pub original: String,
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftCounterfactual {
    pub text: String,
    pub substitutions: Vec<Substitution>,
    /// At least one mask had no usable candidate and kept its original token.
    #[serde(default)]
    pub fallback: bool,
    /// Same text as an earlier counterfactual after exhausting re-draws.
    #[serde(default)]
    pub duplicate: bool,
}

/// K counterfactual texts generated for one instance under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftCounterfactualSet {
    pub instance_id: String,
    pub method: String,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub counterfactuals: Vec<SoftCounterfactual>,
}

impl SoftCounterfactualSet {
    pub fn degenerate(&self) -> bool {
        self.counterfactuals.iter().any(|c| c.duplicate)
    }
}

/// Classifier output for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
}

pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictionError {
    #[error("empty probability vector")]
    Empty,
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("probabilities sum to {0}, not 1")]
    Sum(f64),
    #[error("predicted class {predicted} does not attain the maximum probability")]
    NotArgmax { predicted: usize },
}

impl Prediction {
    /// Validates `probabilities` and takes the first maximal index as the prediction.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Result<Self, PredictionError> {
        validate_probabilities(&probabilities)?;
        let predicted_class = argmax(&probabilities);
        Ok(Prediction {
            probabilities,
            predicted_class,
        })
    }

    /// Validates a prediction reported by a backend together with its class.
    pub fn with_class(probabilities: Vec<f64>, predicted: usize) -> Result<Self, PredictionError> {
        validate_probabilities(&probabilities)?;
        let max = probabilities[argmax(&probabilities)];
        match probabilities.get(predicted) {
            Some(&p) if p == max => Ok(Prediction {
                probabilities,
                predicted_class: predicted,
            }),
            _ => Err(PredictionError::NotArgmax { predicted }),
        }
    }

    pub fn probability_of(&self, class: usize) -> f64 {
        self.probabilities.get(class).copied().unwrap_or(0.0)
    }

    pub fn confidence(&self) -> f64 {
        self.probabilities[self.predicted_class]
    }
}

fn validate_probabilities(p: &[f64]) -> Result<(), PredictionError> {
    if p.is_empty() {
        return Err(PredictionError::Empty);
    }
    if let Some(&bad) = p.iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
        return Err(PredictionError::OutOfRange(bad));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
        return Err(PredictionError::Sum(sum));
    }
    Ok(())
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

fn read_file(path: &Path) -> Result<String, DomainError> {
    fs::read_to_string(path).map_err(|source| DomainError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn records(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn parse_corpus(path: &Path) -> Result<Vec<Instance>, DomainError> {
    parse_corpus_str(&read_file(path)?)
}

pub fn parse_corpus_str(content: &str) -> Result<Vec<Instance>, DomainError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, raw) in records(content) {
        let inst: Instance = serde_json::from_str(raw).map_err(|e| DomainError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if inst.tokens.is_empty() {
            return Err(DomainError::EmptyTokens { line, id: inst.id });
        }
        if let Some(r) = &inst.rationale {
            if r.len() != inst.tokens.len() {
                return Err(DomainError::RationaleLength {
                    line,
                    tokens: inst.tokens.len(),
                    rationale: r.len(),
                    id: inst.id,
                });
            }
        }
        if !seen.insert(inst.id.clone()) {
            return Err(DomainError::DuplicateId { line, id: inst.id });
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &[Instance]) -> io::Result<()> {
    for inst in corpus {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawAttribution {
    instance_id: String,
    method: String,
    scores: Vec<serde_json::Value>,
    #[serde(default)]
    seconds: Option<f64>,
}

pub fn parse_attributions(
    path: &Path,
    corpus: &[Instance],
) -> Result<Vec<AttributionRecord>, DomainError> {
    parse_attributions_str(&read_file(path)?, corpus)
}

pub fn parse_attributions_str(
    content: &str,
    corpus: &[Instance],
) -> Result<Vec<AttributionRecord>, DomainError> {
    let token_counts: HashMap<&str, usize> = corpus
        .iter()
        .map(|i| (i.id.as_str(), i.tokens.len()))
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, raw) in records(content) {
        let rec: RawAttribution = serde_json::from_str(raw).map_err(|e| DomainError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let RawAttribution {
            instance_id: id,
            method,
            scores,
            seconds,
        } = rec;
        let Some(&tokens) = token_counts.get(id.as_str()) else {
            return Err(DomainError::UnknownInstance { line, id });
        };
        if scores.len() != tokens {
            return Err(DomainError::AttributionLength {
                line,
                scores: scores.len(),
                tokens,
                id,
                method,
            });
        }
        let scores = match classify_scores(&scores) {
            Ok(s) => s,
            Err(ShapeProblem::Mixed) => return Err(DomainError::MixedShape { line, id, method }),
            Err(ShapeProblem::NonFinite) => {
                return Err(DomainError::NonFinite { line, id, method })
            }
            Err(ShapeProblem::Dims(first, other)) => {
                return Err(DomainError::MixedDimensions {
                    line,
                    id,
                    method,
                    first,
                    other,
                })
            }
            Err(ShapeProblem::NotNumeric(message)) => {
                return Err(DomainError::Malformed { line, message })
            }
        };
        if seconds.is_some_and(|s| !s.is_finite() || s < 0.0) {
            return Err(DomainError::BadSeconds { line, id, method });
        }
        if !seen.insert((id.clone(), method.clone())) {
            return Err(DomainError::DuplicateAttribution { line, id, method });
        }
        out.push(AttributionRecord {
            instance_id: id,
            method,
            scores,
            attribution_seconds: seconds,
        });
    }
    Ok(out)
}

pub fn write_attributions<W: Write>(mut w: W, records: &[AttributionRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

enum ShapeProblem {
    Mixed,
    NonFinite,
    Dims(usize, usize),
    NotNumeric(String),
}

fn number(v: &serde_json::Value) -> Result<f64, ShapeProblem> {
    let x = v
        .as_f64()
        .ok_or_else(|| ShapeProblem::NotNumeric(format!("expected a number, got {v}")))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(ShapeProblem::NonFinite)
    }
}

fn classify_scores(values: &[serde_json::Value]) -> Result<AttributionScores, ShapeProblem> {
    let arrays = values.iter().filter(|v| v.is_array()).count();
    if arrays == 0 {
        return values
            .iter()
            .map(number)
            .collect::<Result<_, _>>()
            .map(AttributionScores::Scalar);
    }
    if arrays != values.len() {
        return Err(ShapeProblem::Mixed);
    }
    let mut dims = None;
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let row = v
            .as_array()
            .expect("checked above")
            .iter()
            .map(number)
            .collect::<Result<Vec<_>, _>>()?;
        match dims {
            None => dims = Some(row.len()),
            Some(d) if d != row.len() => return Err(ShapeProblem::Dims(d, row.len())),
            Some(_) => {}
        }
        rows.push(row);
    }
    Ok(AttributionScores::Vector(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{"id":"s1","text":"a great movie !","tokens":["[CLS]","a","great","[SEP]"],"label":1,"rationale":[0,0,1,0]}"#;

    #[test]
    fn parses_single_instance() {
        let corpus = parse_corpus_str(ONE).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus[0].tokens.len(), 4);
        assert_eq!(
            corpus[0].rationale.as_deref(),
            Some(&[false, false, true, false][..])
        );
        assert_eq!(corpus[0].gold_label, 1);
    }

    #[test]
    fn rationale_length_mismatch() {
        let line = r#"{"id":"s1","text":"t","tokens":["[CLS]","a","b","[SEP]"],"label":0,"rationale":[0,1,0]}"#;
        assert!(matches!(
            parse_corpus_str(line),
            Err(DomainError::RationaleLength { line: 1, tokens: 4, rationale: 3, .. })
        ));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_corpus_str("").unwrap().is_empty());
        assert!(parse_corpus_str("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_and_malformed_line() {
        let two = format!("{ONE}\n{ONE}\n");
        assert!(matches!(
            parse_corpus_str(&two),
            Err(DomainError::DuplicateId { line: 2, .. })
        ));
        let bad = format!("{ONE}\n\n{{\"id\": 3}}\n");
        match parse_corpus_str(&bad) {
            Err(DomainError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rationale_must_be_binary() {
        let line = r#"{"id":"s1","text":"t","tokens":["a"],"label":0,"rationale":[2]}"#;
        assert!(matches!(parse_corpus_str(line), Err(DomainError::Malformed { .. })));
    }

    #[test]
    fn corpus_round_trip() {
        let corpus = parse_corpus_str(ONE).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &corpus).unwrap();
        assert_eq!(parse_corpus_str(std::str::from_utf8(&buf).unwrap()).unwrap(), corpus);
    }

    #[test]
    fn attribution_checks() {
        let corpus = parse_corpus_str(ONE).unwrap();
        let ok = r#"{"instance_id":"s1","method":"saliency","scores":[0.1,0.2,0.3,0.4],"seconds":0.5}"#;
        let recs = parse_attributions_str(ok, &corpus).unwrap();
        assert_eq!(recs[0].scores, AttributionScores::Scalar(vec![0.1, 0.2, 0.3, 0.4]));
        assert_eq!(recs[0].attribution_seconds, Some(0.5));

        let dims = format!(
            r#"{{"instance_id":"s1","method":"ig","scores":[{},{},{},{}]}}"#,
            serde_json::to_string(&vec![0.0; 8]).unwrap(),
            serde_json::to_string(&vec![0.0; 8]).unwrap(),
            serde_json::to_string(&vec![0.0; 16]).unwrap(),
            serde_json::to_string(&vec![0.0; 8]).unwrap(),
        );
        assert!(matches!(
            parse_attributions_str(&dims, &corpus),
            Err(DomainError::MixedDimensions { first: 8, other: 16, .. })
        ));

        let unknown = r#"{"instance_id":"x999","method":"m","scores":[1]}"#;
        assert!(matches!(
            parse_attributions_str(unknown, &corpus),
            Err(DomainError::UnknownInstance { ref id, .. }) if id == "x999"
        ));

        let short = r#"{"instance_id":"s1","method":"m","scores":[1,2,3]}"#;
        assert!(matches!(
            parse_attributions_str(short, &corpus),
            Err(DomainError::AttributionLength { scores: 3, tokens: 4, .. })
        ));

        let mixed = r#"{"instance_id":"s1","method":"m","scores":[1,[2],3,4]}"#;
        assert!(matches!(
            parse_attributions_str(mixed, &corpus),
            Err(DomainError::MixedShape { .. })
        ));

        let dup = format!("{ok}\n{ok}");
        assert!(matches!(
            parse_attributions_str(&dup, &corpus),
            Err(DomainError::DuplicateAttribution { line: 2, .. })
        ));

        let neg = r#"{"instance_id":"s1","method":"m","scores":[1,2,3,4],"seconds":-1}"#;
        assert!(matches!(
            parse_attributions_str(neg, &corpus),
            Err(DomainError::BadSeconds { .. })
        ));
    }

    #[test]
    fn prediction_validation() {
        let p = Prediction::from_probabilities(vec![0.1, 0.9]).unwrap();
        assert_eq!(p.predicted_class, 1);
        assert!(matches!(
            Prediction::from_probabilities(vec![0.6, 0.6]),
            Err(PredictionError::Sum(_))
        ));
        assert!(matches!(
            Prediction::with_class(vec![0.3, 0.7], 0),
            Err(PredictionError::NotArgmax { predicted: 0 })
        ));
        assert!(Prediction::with_class(vec![0.5, 0.5], 1).is_ok());
    }

    #[test]
    fn aggregation_parsing() {
        assert_eq!("L2".parse::<Aggregation>().unwrap(), Aggregation::L2);
        assert!("median".parse::<Aggregation>().is_err());
        assert!(Aggregation::Direct.accepts(&AttributionScores::Scalar(vec![1.0])));
        assert!(!Aggregation::Mean.accepts(&AttributionScores::Scalar(vec![1.0])));
    }
}
