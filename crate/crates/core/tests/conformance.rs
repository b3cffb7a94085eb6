#![cfg(feature = "http")]

use std::path::PathBuf;
use std::sync::Arc;

use scene_core::backend::conformance::{self, CaseResult, GoldenCase};
use scene_core::backend::{server, MockBackend};

fn golden() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn setup() -> (Vec<GoldenCase>, MockBackend) {
    let cases = conformance::load_cases(&golden().join("cases")).unwrap();
    let mock = MockBackend::from_json(&std::fs::read_to_string(golden().join("mock.json")).unwrap()).unwrap();
    (cases, mock)
}

fn assert_all_pass(results: &[CaseResult]) {
    let failed: Vec<_> = results.iter().filter(|r| r.outcome.is_err()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn golden_files_cover_every_endpoint() {
    let (cases, _) = setup();
    assert_eq!(cases.len(), 15);
    for ep in ["/v1/info", "/v1/predict", "/v1/embed", "/v1/predict_embeddings", "/v1/fill_mask", "/v1/sentence_embed"] {
        assert!(cases.iter().any(|c| c.endpoint == ep && c.status == 200), "{ep}");
    }
    assert!(cases.iter().any(|c| c.consistent_with.is_some()));
}

#[test]
fn mock_matches_golden_responses_in_process() {
    let (cases, mock) = setup();
    let results = conformance::run_suite(&cases, |ep, body| server::handle(&mock, ep, body), true);
    assert_all_pass(&results);
}

#[test]
fn mock_matches_golden_responses_over_http() {
    let (cases, mock) = setup();
    let srv = server::spawn(Arc::new(mock), "127.0.0.1:0", 2).unwrap();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let base = srv.base_url();
    let results = conformance::run_suite(
        &cases,
        |ep, body| {
            let mut r = agent
                .post(&format!("{base}{ep}"))
                .header("Content-Type", "application/json")
                .send(body)
                .unwrap();
            (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
        },
        true,
    );
    assert_all_pass(&results);
}

#[test]
fn structural_checks_catch_bad_answers() {
    let (cases, _) = setup();
    let predict = cases.iter().find(|c| c.name == "predict_batch").unwrap();
    let bad = [
        (200, r#"{"probs":[[0.6,0.6],[0.5,0.5],[0.5,0.5]],"predicted":[0,0,0]}"#),
        (200, r#"{"probs":[[0.4,0.6]],"predicted":[1]}"#),
        (200, r#"{"probs":[[0.4,0.6],[0.4,0.6],[0.4,0.6]],"predicted":[0,1,1]}"#),
        (500, r#"{"error":"boom"}"#),
    ];
    for (status, body) in bad {
        assert!(conformance::check_structure(predict, status, body).is_err(), "{body}");
    }
    let fill = cases.iter().find(|c| c.name == "fill_mask_two").unwrap();
    let unordered = r#"{"masks":[[{"token":"a","score":0.1},{"token":"b","score":0.2}],[]]}"#;
    assert!(conformance::check_structure(fill, 200, unordered).is_err());
    let one_list = r#"{"masks":[[]]}"#;
    assert!(conformance::check_structure(fill, 200, one_list).is_err());

    let mut flaky = 0;
    let results = conformance::run_suite(
        std::slice::from_ref(predict),
        |_, _| {
            flaky += 1;
            let p = if flaky == 1 { "0.25,0.75" } else { "0.2,0.8" };
            (200, format!(r#"{{"probs":[[{p}],[{p}],[{p}]],"predicted":[1,1,1]}}"#))
        },
        false,
    );
    assert!(results[0].outcome.as_ref().unwrap_err().contains("different"));
}
