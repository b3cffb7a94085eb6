//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.


use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::Value;

use scene_core::backend::{Backend, MockBackend};
use scene_core::cfgen::{self, DEFAULT_K, DEFAULT_V};
use scene_core::domain::{self, Aggregation, AttributionScores, Matrix};
use scene_core::extraction;
use scene_core::metrics::{self, MetricError, NoiseConfig};
use scene_core::pipeline::{self, Column, RunConfig};
use scene_core::reference;

const ORACLE_TOL: f64 = 1e-12;
const ORACLE_BUDGET: Duration = Duration::from_secs(1);
const INFIDELITY_TOL: f64 = 1e-10;
const INFIDELITY_BUDGET: Duration = Duration::from_secs(5);
const PUBLISHED_TOL: f64 = 0.02;
const PUBLISHED_VALIDITY_RHO: f64 = 0.865368;
const PUBLISHED_C_SOFT_RHO: f64 = 0.689991;
const GENERATION_BUDGET: Duration = Duration::from_secs(10);
const E2E_BUDGET: Duration = Duration::from_secs(5);

type Outcome = Result<String, String>;

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn near(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, expected {want} (tolerance {tol})"))
    }
}

fn budget(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    if t <= limit {
        Ok(())
    } else {
        Err(format!("took {t:?}, budget {limit:?}"))
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let e = |r: Result<f64, MetricError>| r.map_err(|e| e.to_string());
    let mut n = 0;
    let mut check = |what: &str, got: f64, want: f64| {
        n += 1;
        near(what, got, want, ORACLE_TOL)
    };

    check("validity single", e(metrics::validity_soft(&[0.9], &[vec![0.7, 0.5]]))?, 0.3)?;
    check("validity no drop", e(metrics::validity_soft(&[0.4, 0.8], &[vec![0.4, 0.4], vec![0.8]]))?, 0.0)?;
    check("validity two", e(metrics::validity_soft(&[0.9, 0.5], &[vec![0.6], vec![0.6]]))?, 0.1)?;

    let cs = metrics::c_soft(&[0.9], &[vec![0.7, 0.5]], &[vec![0.3, 0.2]]).map_err(|e| e.to_string())?;
    check("c_soft ratio", cs.value, 1.2)?;
    let cs = metrics::c_soft(&[0.5], &[vec![0.5, 0.5]], &[vec![0.3, 0.2]]).map_err(|e| e.to_string())?;
    check("c_soft zero drop", cs.value, 0.0)?;
    let cs = metrics::c_soft(&[0.9, 0.9], &[vec![0.7], vec![0.5]], &[vec![0.5], vec![0.0]])
        .map_err(|e| e.to_string())?;
    if cs.excluded != 1 || cs.used != 1 {
        return Err(format!("c_soft exclusion: used {} excluded {}", cs.used, cs.excluded));
    }
    check("c_soft with exclusion", cs.value, 0.4)?;

    check("ap top", e(metrics::average_precision(&[0.9, 0.1, 0.8], &[true, false, true]))?, 1.0)?;
    check(
        "ap mixed",
        e(metrics::average_precision(&[0.9, 0.8, 0.1], &[false, true, true]))?,
        (1.0 / 2.0 + 2.0 / 3.0) / 2.0,
    )?;
    check("ap all positive", e(metrics::average_precision(&[0.1, 0.7, 0.3], &[true; 3]))?, 1.0)?;

    check("spearman up", e(metrics::spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]))?, 1.0)?;
    check("spearman down", e(metrics::spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]))?, -1.0)?;
    if metrics::spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).is_ok() {
        return Err("spearman of a constant column must be an error".into());
    }
    if metrics::average_precision(&[0.3, 0.2], &[false, false]).is_ok() {
        return Err("average precision without positives must be an error".into());
    }
    budget(start, ORACLE_BUDGET)?;
    Ok(format!("{n} hand-computed values within {ORACLE_TOL:e}, {:?}", start.elapsed()))
}

fn infidelity_zero() -> Outcome {
    let start = Instant::now();
    let mock = MockBackend::from_json(
        &std::fs::read_to_string(manifest().join("tests/golden/mock.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for text in ["good film", "a bad plot , good film", "unseen words only"] {
        let emb: Matrix = mock.embed(text).map_err(|e| e.to_string())?;
        let class = mock.predict(&[text.to_string()]).map_err(|e| e.to_string())?[0].predicted_class;
        let phi = mock.linear_coefficients(emb.len(), class).ok_or("mock head is not linear")?;
        for sigma in [0.001, 0.01, 0.1] {
            for samples in [1, 50] {
                let noise = NoiseConfig::new(sigma, samples, 7).map_err(|e| e.to_string())?;
                let est = metrics::infidelity(
                    &phi,
                    &emb,
                    |m| Ok(mock.predict_embeddings(m)?.probability_of(class)),
                    &noise,
                )
                .map_err(|e| e.to_string())?;
                worst = worst.max(est.value);
                runs += 1;
                if est.value > INFIDELITY_TOL {
                    return Err(format!("{text:?} sigma {sigma} S {samples}: {}", est.value));
                }
            }
        }
    }
    budget(start, INFIDELITY_BUDGET)?;
    Ok(format!("{runs} estimates, largest {worst:e}, {:?}", start.elapsed()))
}

fn published_correlations() -> Outcome {
    let path = manifest().join("fixtures/reference_tables/transformer.tsv");
    let rows = reference::parse_table(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?)?;
    let v = reference::correlation(&rows, Column::ValiditySoft).map_err(|e| e.to_string())?;
    let c = reference::correlation(&rows, Column::CSoft).map_err(|e| e.to_string())?;
    near("rho(human agreement, Validity_soft)", v, PUBLISHED_VALIDITY_RHO, PUBLISHED_TOL)?;
    near("rho(human agreement, C_soft)", c, PUBLISHED_C_SOFT_RHO, PUBLISHED_TOL)?;
    Ok(format!("{} rows: Validity_soft rho {v:.6}, C_soft rho {c:.6}", rows.len()))
}

fn scores_from(v: &Value) -> Result<AttributionScores, String> {
    let arr = v.as_array().ok_or("scores must be an array")?;
    let num = |x: &Value| x.as_f64().ok_or_else(|| format!("not a number: {x}"));
    if arr.first().is_some_and(Value::is_array) {
        arr.iter()
            .map(|r| r.as_array().ok_or("ragged scores".to_string())?.iter().map(num).collect())
            .collect::<Result<_, _>>()
            .map(AttributionScores::Vector)
    } else {
        arr.iter().map(num).collect::<Result<_, _>>().map(AttributionScores::Scalar)
    }
}

fn extraction_golden() -> Outcome {
    let text = std::fs::read_to_string(manifest().join("fixtures/extraction_golden.json")).map_err(|e| e.to_string())?;
    let cases: Vec<Value> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    if cases.len() != 20 {
        return Err(format!("expected 20 golden cases, found {}", cases.len()));
    }
    for c in &cases {
        let name = c["name"].as_str().unwrap_or("?");
        let tokens: Vec<String> = serde_json::from_value(c["tokens"].clone()).map_err(|e| e.to_string())?;
        let eligible: Vec<usize> = serde_json::from_value(c["eligible"].clone()).map_err(|e| e.to_string())?;
        let expected: Vec<(usize, f64)> = serde_json::from_value(c["selected"].clone()).map_err(|e| e.to_string())?;
        let mode: Aggregation = c["aggregation"].as_str().ok_or("aggregation")?.parse()?;
        let v = c["v"].as_u64().ok_or("v")? as usize;
        let by_abs = c["rank_by_abs"].as_bool().unwrap_or(false);
        let scores = scores_from(&c["scores"])?;

        let got: Vec<usize> = extraction::filter_candidates(&tokens).into_iter().collect();
        if got != eligible {
            return Err(format!("{name}: eligible {got:?}, expected {eligible:?}"));
        }
        let (_, sel) = extraction::significant_tokens(&tokens, &scores, mode, v, by_abs).map_err(|e| format!("{name}: {e}"))?;
        let positions: Vec<usize> = sel.selected.iter().map(|t| t.position).collect();
        let want: Vec<usize> = expected.iter().map(|e| e.0).collect();
        if positions != want {
            return Err(format!("{name}: selected {positions:?}, expected {want:?}"));
        }
        for (t, e) in sel.selected.iter().zip(&expected) {
            near(name, t.weight, e.1, ORACLE_TOL)?;
        }
        if Some(sel.degenerate) != c["degenerate"].as_bool() {
            return Err(format!("{name}: degenerate flag {}", sel.degenerate));
        }
    }
    Ok(format!("{} cases match exactly", cases.len()))
}

fn export(out: &pipeline::RunOutput) -> Vec<u8> {
    let mut buf = Vec::new();
    pipeline::write_counterfactuals(&mut buf, &out.counterfactuals).expect("in-memory write");
    buf
}

fn generation() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::load(&manifest().join("fixtures/synthetic/scene.toml")).map_err(|e| e.to_string())?;
    if (cfg.k, cfg.v, cfg.seed) != (DEFAULT_K, DEFAULT_V, 7) || (cfg.k, cfg.v) != (10, 5) {
        return Err(format!("config k={} v={} seed={}", cfg.k, cfg.v, cfg.seed));
    }
    let a = pipeline::run_from_config(&cfg).map_err(|e| e.to_string())?;
    let b = pipeline::run_from_config(&cfg).map_err(|e| e.to_string())?;
    if export(&a) != export(&b) {
        return Err("two seed-7 runs exported different bytes".into());
    }
    if a.report.has_failures() {
        return Err(format!("run had failures: {:?}", a.report.diagnostics));
    }
    let corpus = domain::parse_corpus(&cfg.corpus).map_err(|e| e.to_string())?;
    if a.counterfactuals.len() != corpus.len() {
        return Err(format!("{} sets for {} instances", a.counterfactuals.len(), corpus.len()));
    }
    let mut checked = 0;
    for set in &a.counterfactuals {
        let inst = corpus.iter().find(|i| i.id == set.instance_id).ok_or("unknown instance")?;
        if set.counterfactuals.len() != cfg.k {
            return Err(format!("{}: {} counterfactuals", inst.id, set.counterfactuals.len()));
        }
        let spans = cfgen::align_tokens(&inst.text, &inst.tokens).ok_or("corpus text does not align")?;
        for cf in &set.counterfactuals {
            if cf.substitutions.len() != cfg.v {
                return Err(format!("{}: {} substitutions", inst.id, cf.substitutions.len()));
            }
            // Rebuild the expected text from the original and the substitutions alone.
            let mut subs = cf.substitutions.clone();
            subs.sort_by_key(|s| s.position);
            let mut expected = String::new();
            let mut cursor = 0;
            for s in &subs {
                let span = spans[s.position].clone();
                if inst.text[span.clone()] != s.original {
                    return Err(format!("{}: position {} is not {:?}", inst.id, s.position, s.original));
                }
                let r = &s.replacement;
                if !r.chars().all(char::is_alphabetic) || r.to_lowercase() == s.original.to_lowercase() {
                    return Err(format!("{}: bad substitute {r:?} for {:?}", inst.id, s.original));
                }
                expected.push_str(&inst.text[cursor..span.start]);
                expected.push_str(r);
                cursor = span.end;
            }
            expected.push_str(&inst.text[cursor..]);
            if cf.text != expected {
                return Err(format!("{}: {:?} changes text outside the masked spans", inst.id, cf.text));
            }
            checked += 1;
        }
    }
    budget(start, GENERATION_BUDGET)?;
    Ok(format!("{checked} counterfactuals, identical exports, K={} V={}, {:?}", cfg.k, cfg.v, start.elapsed()))
}

/// Cells worked out by hand from the 3-instance fixture tables. Each instance
/// has exactly two usable substitutes per mask and K = 2, so the cells do not
/// depend on the sampling order.
const E2E_CSV: &str = "\
method,aggregation,human_agreement,infidelity,validity_soft,c_soft,average_time_seconds,best
occlusion,direct,1.000000,,0.400000,3.681261,0.600000,human_agreement;validity_soft
lime,direct,0.625000,,0.166667,5.930448,2.500000,c_soft
gradient,mean,0.283333,0.000000,0.020000,5.635643,0.100000,infidelity;average_time_seconds
gradient,l2,0.283333,0.000000,0.020000,5.635643,0.100000,infidelity;average_time_seconds

metric,spearman_rho,rows
validity_soft,1.000000,4
c_soft,-0.333333,4
infidelity,,2
";

fn run_cli(config: &Path, out: &Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_scene"))
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove(pipeline::BACKEND_URL_ENV)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("scene run exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    Ok(())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = manifest().join("fixtures/e2e/scene.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_cli(&config, &a)?;
    run_cli(&config, &b)?;
    let csv = std::fs::read_to_string(a.join("report.csv")).map_err(|e| e.to_string())?;
    if csv != E2E_CSV {
        return Err(format!("report differs from the hand computation:\n{csv}"));
    }
    for f in ["report.json", "report.txt", "report.csv", "counterfactuals.jsonl"] {
        if std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok() {
            return Err(format!("{f} differs between identical runs"));
        }
    }
    budget(start, E2E_BUDGET)?;
    Ok(format!("every cell matches, rerun byte-identical, {:?}", start.elapsed()))
}

fn property_suites() -> Outcome {
    let mut names = Vec::new();
    for (name, prop) in properties::PROPERTIES {
        prop(&mut properties::runner()).map_err(|e| format!("{name}: {e}"))?;
        names.push(name);
    }
    Ok(format!("{} properties x {} cases", names.len(), properties::CASES))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("metric oracles", metric_oracles),
        ("infidelity analytic zero", infidelity_zero),
        ("published correlation fixture", published_correlations),
        ("extraction golden suite", extraction_golden),
        ("generation determinism and locality", generation),
        ("end-to-end mock run", end_to_end),
        ("property suites", property_suites),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
