//! End-to-end evaluation run.
//!
//! For every (method, aggregation) row the run
//!
//! 1. predicts every original text once (shared by all rows),
//! 2. picks the top-V tokens of each instance from the method's attributions,
//! 3. masks them and draws K soft counterfactuals from fill-mask proposals,
//! 4. predicts the counterfactuals and measures their sentence distance to
//!    the original,
//! 5. averages the per-instance probability drops into Validity_soft and
//!    C_soft,
//!
//! and adds infidelity (per method) and human-agreement MAP. Each metric
//! column is then rank-correlated with the MAP column.

mod config;
mod report;

use std::collections::HashMap;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::backend::{Backend, BackendError, CachedBackend, MockBackend};
use crate::cfgen::{self, SamplingParams};
use crate::domain::{
    self, Aggregation, AttributionRecord, AttributionScores, DomainError, Instance, Prediction,
    SignificantTokenSet, SoftCounterfactualSet,
};
use crate::extraction;
use crate::metrics::{self, MetricError};
use crate::rng::derive_seed;

pub use config::{BackendConfig, BackendKind, InfidelityConfig, RunConfig, BACKEND_URL_ENV};
pub use report::{
    best_flags, correlations, parse_report_csv, read_run_dir, render_csv, render_json,
    render_table, write_counterfactuals, write_run_dir, Column, Correlation, CsvRow, Diagnostic,
    DiagnosticKind, EvaluationReport, ReportFormat, ReportRow, RunEcho, Usage, COLUMNS,
    COUNTERFACTUALS_FILE, DECIMALS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Input(#[from] DomainError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("no (method, aggregation) pairs to evaluate")]
    EmptyReport,
    #[error("{path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 1 for configuration and input problems, 2 when the
    /// backend cannot be reached.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Backend(e) if e.is_transport() => 2,
            _ => 1,
        }
    }
}

/// A finished run: the report plus every generated counterfactual set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: EvaluationReport,
    pub counterfactuals: Vec<SoftCounterfactualSet>,
}

/// Parses the configured input files, builds the backend and runs.
pub fn run_from_config(cfg: &RunConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let corpus = domain::parse_corpus(&cfg.corpus)?;
    let attributions = domain::parse_attributions(&cfg.attributions, &corpus)?;
    let backend = build_backend(&cfg.backend)?;
    run_scene(cfg, &corpus, &attributions, &*backend)
}

pub fn build_backend(cfg: &BackendConfig) -> Result<Box<dyn Backend>, PipelineError> {
    match cfg.kind {
        BackendKind::Mock => {
            let path = cfg
                .fixtures
                .as_deref()
                .ok_or_else(|| PipelineError::Config("mock backend needs fixtures".into()))?;
            Ok(Box::new(load_mock(path)?))
        }
        #[cfg(feature = "http")]
        BackendKind::Http => Ok(Box::new(
            crate::backend::HttpBackend::new(cfg.descriptor()).map_err(PipelineError::Backend)?,
        )),
        #[cfg(not(feature = "http"))]
        BackendKind::Http => Err(PipelineError::Config(
            "built without the `http` feature".into(),
        )),
    }
}

pub fn load_mock(path: &Path) -> Result<MockBackend, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    MockBackend::from_json(&text)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

/// One evaluated (method, aggregation) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct RowKey {
    method: String,
    aggregation: Aggregation,
}

struct InstanceResult {
    set: Option<SoftCounterfactualSet>,
    /// Original predicted-class probability and its value under each counterfactual.
    drops: Option<(f64, Vec<f64>, Vec<f64>)>,
    ap: Option<f64>,
    diagnostics: Vec<Diagnostic>,
}

struct RowContext<'a> {
    cfg: &'a RunConfig,
    key: &'a RowKey,
    backend: &'a dyn Backend,
}

fn diag(
    key: &RowKey,
    instance: &Instance,
    kind: DiagnosticKind,
    stage: &str,
    message: impl Into<String>,
) -> Diagnostic {
    Diagnostic {
        method: key.method.clone(),
        aggregation: Some(key.aggregation),
        instance_id: instance.id.clone(),
        kind,
        stage: stage.to_string(),
        message: message.into(),
    }
}

impl RowContext<'_> {
    fn evaluate(
        &self,
        instance: &Instance,
        record: &AttributionRecord,
        original: &Prediction,
    ) -> InstanceResult {
        let key = self.key;
        let mut out = InstanceResult {
            set: None,
            drops: None,
            ap: None,
            diagnostics: Vec::new(),
        };
        let (weights, selection) = match extraction::significant_tokens(
            &instance.tokens,
            &record.scores,
            key.aggregation,
            self.cfg.v,
            self.cfg.rank_by_abs,
        ) {
            Ok(r) => r,
            Err(e) => {
                out.diagnostics
                    .push(diag(key, instance, DiagnosticKind::Failure, "extraction", e.to_string()));
                return out;
            }
        };

        match &instance.rationale {
            Some(r) => match metrics::average_precision(&rank_keys(&weights, self.cfg.rank_by_abs), r) {
                Ok(ap) => out.ap = Some(ap),
                Err(e) => out.diagnostics.push(diag(
                    key,
                    instance,
                    DiagnosticKind::Skipped,
                    "map",
                    e.to_string(),
                )),
            },
            None => out.diagnostics.push(diag(
                key,
                instance,
                DiagnosticKind::Skipped,
                "map",
                "no rationale annotation",
            )),
        }

        let tokens = SignificantTokenSet {
            instance_id: instance.id.clone(),
            method: key.method.clone(),
            aggregation: key.aggregation,
            selected: selection.selected,
            requested: selection.requested,
            degenerate: selection.degenerate,
        };
        if tokens.selected.is_empty() {
            out.diagnostics.push(diag(
                key,
                instance,
                DiagnosticKind::Failure,
                "extraction",
                "no eligible tokens to mask",
            ));
            return out;
        }
        if tokens.degenerate {
            out.diagnostics.push(diag(
                key,
                instance,
                DiagnosticKind::Note,
                "extraction",
                format!("only {} of {} tokens eligible", tokens.selected.len(), tokens.requested),
            ));
        }

        match self.counterfactuals(instance, &tokens, original) {
            Ok((set, drops)) => {
                if set.degenerate() {
                    out.diagnostics.push(diag(
                        key,
                        instance,
                        DiagnosticKind::Note,
                        "cfgen",
                        "duplicate counterfactual texts kept",
                    ));
                }
                if set.counterfactuals.iter().any(|c| c.fallback) {
                    out.diagnostics.push(diag(
                        key,
                        instance,
                        DiagnosticKind::Note,
                        "cfgen",
                        "a mask had no usable substitute and kept its token",
                    ));
                }
                out.set = Some(set);
                out.drops = Some(drops);
            }
            Err((stage, message)) => out.diagnostics.push(diag(
                key,
                instance,
                DiagnosticKind::Failure,
                stage,
                message,
            )),
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn counterfactuals(
        &self,
        instance: &Instance,
        tokens: &SignificantTokenSet,
        original: &Prediction,
    ) -> Result<(SoftCounterfactualSet, (f64, Vec<f64>, Vec<f64>)), (&'static str, String)> {
        let key = self.key;
        let fail = |stage: &'static str| move |e: &dyn std::fmt::Display| (stage, e.to_string());
        let masked = cfgen::mask_text(instance, &tokens.positions()).map_err(|e| fail("cfgen")(&e))?;
        let proposals = self
            .backend
            .fill_mask(&masked.masked(), self.cfg.candidate_pool)
            .map_err(|e| fail("fill_mask")(&e))?;
        let candidates: Vec<Vec<String>> = masked
            .slots()
            .iter()
            .zip(&proposals)
            .map(|(slot, list)| cfgen::filter_substitutes(list, &slot.original))
            .collect();
        let seed = derive_seed(
            self.cfg.seed,
            &[&instance.id, &key.method, key.aggregation.as_str()],
        );
        let params = SamplingParams {
            k: self.cfg.k,
            pool: self.cfg.candidate_pool,
            retries: self.cfg.dedup_retries,
        };
        let cfs = cfgen::sample_counterfactuals(&masked, &candidates, params, seed)
            .map_err(|e| fail("cfgen")(&e))?;
        let set = SoftCounterfactualSet {
            instance_id: instance.id.clone(),
            method: key.method.clone(),
            aggregation: key.aggregation,
            seed,
            counterfactuals: cfs,
        };

        let texts: Vec<String> = set.counterfactuals.iter().map(|c| c.text.clone()).collect();
        let class = original.predicted_class;
        let cf_probs: Vec<f64> = self
            .backend
            .predict(&texts)
            .map_err(|e| fail("predict")(&e))?
            .iter()
            .map(|p| p.probability_of(class))
            .collect();

        let mut batch = Vec::with_capacity(texts.len() + 1);
        batch.push(instance.text.clone());
        batch.extend(texts);
        let vectors = self
            .backend
            .sentence_embed(&batch)
            .map_err(|e| fail("sentence_embed")(&e))?;
        let dists = vectors[1..]
            .iter()
            .map(|v| metrics::cosine_distance(&vectors[0], v))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fail("distance")(&e))?;
        Ok((set, (original.probability_of(class), cf_probs, dists)))
    }
}

fn rank_keys(weights: &[f64], by_abs: bool) -> Vec<f64> {
    if by_abs {
        weights.iter().map(|w| w.abs()).collect()
    } else {
        weights.to_vec()
    }
}

/// Scalar model output used by infidelity.
fn target(p: &Prediction, class: usize, on_logit: bool) -> f64 {
    let q = p.probability_of(class);
    if on_logit {
        let q = q.clamp(1e-12, 1.0 - 1e-12);
        q.ln() - (1.0 - q).ln()
    } else {
        q
    }
}

fn infidelity_for_instance(
    cfg: &RunConfig,
    backend: &dyn Backend,
    instance: &Instance,
    method: &str,
    phi: &[Vec<f64>],
    original: &Prediction,
) -> Result<f64, MetricError> {
    let embeddings = backend.embed(&instance.text)?;
    let mut noise = cfg.noise();
    noise.seed = derive_seed(noise.seed, &[&instance.id, method]);
    let class = original.predicted_class;
    let on_logit = cfg.infidelity.on_logit;
    let est = metrics::infidelity(
        &phi.to_vec(),
        &embeddings,
        |m| Ok(target(&backend.predict_embeddings(m)?, class, on_logit)),
        &noise,
    )?;
    Ok(est.value)
}

/// Runs the full evaluation against `backend`.
///
/// Results depend only on the inputs, the configuration and the backend's
/// answers; the worker count never changes them.
pub fn run_scene(
    cfg: &RunConfig,
    corpus: &[Instance],
    attributions: &[AttributionRecord],
    backend: &dyn Backend,
) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let backend = CachedBackend::new(backend);
    let backend: &dyn Backend = &backend;
    let info = backend.info()?;

    let mut methods: Vec<String> = Vec::new();
    for r in attributions {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    if !cfg.methods.is_empty() {
        if let Some(m) = cfg.methods.iter().find(|m| !methods.contains(m)) {
            return Err(PipelineError::Config(format!("method {m:?} has no attributions")));
        }
        methods = cfg.methods.clone();
    }

    let by_key: HashMap<(&str, &str), &AttributionRecord> = attributions
        .iter()
        .map(|r| ((r.method.as_str(), r.instance_id.as_str()), r))
        .collect();

    let mut rows_keys = Vec::new();
    for m in &methods {
        let records: Vec<&AttributionRecord> = attributions.iter().filter(|r| &r.method == m).collect();
        for &agg in &Aggregation::ALL {
            if !cfg.aggregations.contains(&agg) {
                continue;
            }
            if records.iter().any(|r| agg.accepts(&r.scores)) {
                rows_keys.push(RowKey {
                    method: m.clone(),
                    aggregation: agg,
                });
            }
        }
    }
    if rows_keys.is_empty() {
        return Err(PipelineError::EmptyReport);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;

    info!("predicting {} original instances", corpus.len());
    let texts: Vec<String> = corpus.iter().map(|i| i.text.clone()).collect();
    let originals = if texts.is_empty() {
        Vec::new()
    } else {
        backend.predict(&texts)?
    };

    let mut infidelity_cache: HashMap<String, (Option<f64>, Usage, Vec<Diagnostic>)> = HashMap::new();
    let mut rows = Vec::new();
    let mut all_sets = Vec::new();
    let mut diagnostics = Vec::new();

    for key in &rows_keys {
        info!("evaluating {} / {}", key.method, key.aggregation);
        let members: Vec<(usize, &AttributionRecord)> = corpus
            .iter()
            .enumerate()
            .filter_map(|(i, inst)| by_key.get(&(key.method.as_str(), inst.id.as_str())).map(|r| (i, *r)))
            .collect();
        let ctx = RowContext { cfg, key, backend };
        let results: Vec<(usize, InstanceResult)> = pool.install(|| {
            members
                .par_iter()
                .map(|&(i, rec)| {
                    if key.aggregation.accepts(&rec.scores) {
                        (i, ctx.evaluate(&corpus[i], rec, &originals[i]))
                    } else {
                        let d = diag(
                            key,
                            &corpus[i],
                            DiagnosticKind::Failure,
                            "extraction",
                            "attribution shape does not fit this aggregation",
                        );
                        (
                            i,
                            InstanceResult {
                                set: None,
                                drops: None,
                                ap: None,
                                diagnostics: vec![d],
                            },
                        )
                    }
                })
                .collect()
        });

        let n = members.len();
        let mut orig = Vec::new();
        let mut cf = Vec::new();
        let mut dists = Vec::new();
        let mut aps = Vec::new();
        for (_, r) in results {
            if let Some((p, q, d)) = r.drops {
                orig.push(p);
                cf.push(q);
                dists.push(d);
            }
            if let Some(ap) = r.ap {
                aps.push(ap);
            }
            all_sets.extend(r.set);
            diagnostics.extend(r.diagnostics);
        }

        let validity_soft = if orig.is_empty() {
            None
        } else {
            Some(metrics::validity_soft(&orig, &cf).map_err(|e| PipelineError::Config(e.to_string()))?)
        };
        let (c_soft, c_usage) = match metrics::c_soft(&orig, &cf, &dists) {
            Ok(c) => (
                Some(c.value),
                Usage {
                    used: c.used,
                    skipped: n - c.used,
                },
            ),
            Err(MetricError::Empty) | Err(MetricError::AllExcluded) => (None, Usage { used: 0, skipped: n }),
            Err(e) => return Err(PipelineError::Config(e.to_string())),
        };
        let near_zero = orig.len() - c_usage.used;
        if near_zero > 0 {
            diagnostics.push(Diagnostic {
                method: key.method.clone(),
                aggregation: Some(key.aggregation),
                instance_id: String::new(),
                kind: DiagnosticKind::Skipped,
                stage: "c_soft".into(),
                message: format!("{near_zero} instance(s) with near-zero distance sum excluded"),
            });
        }
        let map = if aps.is_empty() {
            None
        } else {
            Some(aps.iter().sum::<f64>() / aps.len() as f64)
        };

        let (infidelity, inf_usage) = {
            let entry = infidelity_cache.entry(key.method.clone()).or_insert_with(|| {
                method_infidelity(cfg, backend, corpus, &originals, &by_key, &key.method, &pool)
            });
            // Reported once, with the method's first row.
            diagnostics.append(&mut entry.2);
            (entry.0, entry.1)
        };

        let seconds: Vec<f64> = members.iter().filter_map(|(_, r)| r.attribution_seconds).collect();
        let average_time_seconds = if seconds.is_empty() {
            None
        } else {
            Some(seconds.iter().sum::<f64>() / seconds.len() as f64)
        };

        rows.push(ReportRow {
            method: key.method.clone(),
            aggregation: key.aggregation,
            map,
            infidelity,
            validity_soft,
            c_soft,
            average_time_seconds,
            instances: n,
            validity_usage: Usage {
                used: orig.len(),
                skipped: n - orig.len(),
            },
            c_soft_usage: c_usage,
            infidelity_usage: inf_usage,
            map_usage: Usage {
                used: aps.len(),
                skipped: n - aps.len(),
            },
        });
    }

    let correlations = report::correlations(&rows);
    let failures = diagnostics
        .iter()
        .filter(|d| d.kind == DiagnosticKind::Failure)
        .count();
    if failures > 0 {
        warn!("{failures} instance-level failures; see report diagnostics");
    }
    let report = EvaluationReport {
        rows,
        correlations,
        run_config: RunEcho {
            v: cfg.v,
            k: cfg.k,
            candidate_pool: cfg.candidate_pool,
            dedup_retries: cfg.dedup_retries,
            rank_by_abs: cfg.rank_by_abs,
            seed: cfg.seed,
            noise: cfg.infidelity.enabled.then(|| cfg.noise()),
            infidelity_on_logit: cfg.infidelity.on_logit,
            backend: info,
        },
        diagnostics,
    };
    Ok(RunOutput {
        report,
        counterfactuals: all_sets,
    })
}

fn method_infidelity(
    cfg: &RunConfig,
    backend: &dyn Backend,
    corpus: &[Instance],
    originals: &[Prediction],
    by_key: &HashMap<(&str, &str), &AttributionRecord>,
    method: &str,
    pool: &rayon::ThreadPool,
) -> (Option<f64>, Usage, Vec<Diagnostic>) {
    let members: Vec<(usize, &AttributionRecord)> = corpus
        .iter()
        .enumerate()
        .filter_map(|(i, inst)| by_key.get(&(method, inst.id.as_str())).map(|r| (i, *r)))
        .collect();
    let n = members.len();
    let skip = |inst: &Instance, kind, msg: String| Diagnostic {
        method: method.to_string(),
        aggregation: None,
        instance_id: inst.id.clone(),
        kind,
        stage: "infidelity".into(),
        message: msg,
    };
    if !cfg.infidelity.enabled {
        return (None, Usage { used: 0, skipped: n }, Vec::new());
    }
    let results: Vec<Result<f64, Diagnostic>> = pool.install(|| {
        members
            .par_iter()
            .map(|&(i, rec)| {
                let inst = &corpus[i];
                match &rec.scores {
                    AttributionScores::Scalar(_) => Err(skip(
                        inst,
                        DiagnosticKind::Skipped,
                        "scalar attributions; infidelity needs per-dimension scores".into(),
                    )),
                    AttributionScores::Vector(phi) => {
                        infidelity_for_instance(cfg, backend, inst, method, phi, &originals[i])
                            .map_err(|e| skip(inst, DiagnosticKind::Failure, e.to_string()))
                    }
                }
            })
            .collect()
    });
    let mut values = Vec::new();
    let mut diags = Vec::new();
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(d) => diags.push(d),
        }
    }
    let usage = Usage {
        used: values.len(),
        skipped: n - values.len(),
    };
    let value = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
    (value, usage, diags)
}
