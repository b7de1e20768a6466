use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use clap::Parser;
use hicem_cli::{execute, server::router, Cli, EXIT_CONFIG, EXIT_STAGE};
use hicem_core::api::Explorer;
use hicem_core::config::RunConfig;
use hicem_core::pipeline::{Pipeline, ServedRun};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// One small finished run shared by every test in this file.
fn run_dir() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let cfg = config_text(&dir);
        std::fs::write(tmp.path().join("run.toml"), &cfg).unwrap();
        Pipeline::new(&RunConfig::from_toml(&cfg).unwrap()).unwrap().report().unwrap();
        (tmp, dir)
    })
    .1
}

fn config_text(dir: &Path) -> String {
    format!(
        r#"
        seed = 1
        artifacts = "{}"
        [world]
        n = 2000
        [cem]
        max_epochs = 40
        [hicem]
        max_epochs = 40
        [split.sae]
        dict_size = 64
        epochs = 40
        batch_size = 128
        [eval]
        trials = 1
        "#,
        dir.display()
    )
}

fn config_path() -> PathBuf {
    run_dir().parent().unwrap().join("run.toml")
}

fn explorer() -> Arc<Explorer> {
    static EX: OnceLock<Arc<Explorer>> = OnceLock::new();
    EX.get_or_init(|| Arc::new(Explorer::new(ServedRun::open(run_dir()).unwrap())))
        .clone()
}

async fn call(method: &str, uri: &str, body: &str) -> (StatusCode, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = router(explorer()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn get_json(uri: &str) -> (StatusCode, Value) {
    let (s, b) = call("GET", uri, "").await;
    (s, serde_json::from_str(&b).unwrap())
}

fn encode(id: &str) -> String {
    id.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

/// First matched positive sub-concept: (concept name, sub id, number of siblings).
fn some_positive_sub(h: &Value) -> (String, String, usize) {
    for c in h["concepts"].as_array().unwrap() {
        let pos = c["positive"].as_array().unwrap();
        if let Some(s) = pos.first() {
            return (
                c["name"].as_str().unwrap().into(),
                s["id"].as_str().unwrap().into(),
                pos.len(),
            );
        }
    }
    panic!("fixture run matched no positive sub-concept");
}

#[tokio::test]
async fn hierarchy_lists_matched_subconcepts() {
    let (s, h) = get_json("/api/hierarchy").await;
    assert_eq!(s, StatusCode::OK);
    let table: Value =
        serde_json::from_slice(&std::fs::read(run_dir().join("match.json")).unwrap()).unwrap();
    let mut matched: Vec<String> = table["body"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|r| r["sub"].as_str().map(String::from))
        .collect();
    matched.sort();
    matched.dedup();
    let mut listed = Vec::new();
    for c in h["concepts"].as_array().unwrap() {
        for side in ["positive", "negative"] {
            for s in c[side].as_array().unwrap() {
                assert!(!s["matched"].as_array().unwrap().is_empty());
                listed.push(s["id"].as_str().unwrap().to_string());
            }
        }
    }
    listed.sort();
    assert!(!listed.is_empty());
    assert_eq!(listed, matched);
}

#[tokio::test]
async fn samples_paging_and_validation() {
    let (s, v) = get_json("/api/samples?limit=7&offset=2").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["split"], "test");
    assert_eq!(v["samples"].as_array().unwrap().len(), 7);
    let (_, all) = get_json("/api/samples?limit=9").await;
    assert_eq!(v["samples"][0], all["samples"][2]);
    let (s, e) = get_json("/api/samples?split=holdout").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["field"], "split");
    let (s, e) = get_json("/api/samples?limit=0").await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::BAD_REQUEST, Some("limit")));
    let (s, e) = get_json("/api/samples?offset=-1").await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::BAD_REQUEST, Some("offset")));
}

#[tokio::test]
async fn prediction_and_lookup_errors() {
    let (_, list) = get_json("/api/samples").await;
    let id = list["samples"][0]["id"].as_u64().unwrap();
    let (s, p) = get_json(&format!("/api/samples/{id}/prediction")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(p["sample"], id);
    assert_eq!(p["task"]["truth"], list["samples"][0]["task"]);
    let probs: f64 = p["task"]["probs"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-12);
    let (s, e) = get_json("/api/samples/999999/prediction").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(e["error"].as_str().unwrap().contains("999999"));
    let (s, e) = get_json("/api/samples/abc/prediction").await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::BAD_REQUEST, Some("id")));
    let (s, _) = get_json("/api/nothing").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, b) = call("DELETE", "/api/hierarchy", "").await;
    assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED);
    assert!(b.contains("\"error\""));
}

#[tokio::test]
async fn positive_sub_present_pattern() {
    let (_, h) = get_json("/api/hierarchy").await;
    let (concept, sub, n_siblings) = some_positive_sub(&h);
    let body = json!({"interventions": [{"level": "sub", "concept": concept, "sub": sub, "present": true}]});
    let (s, p) = call("POST", "/api/samples/0/intervene", &body.to_string()).await;
    assert_eq!(s, StatusCode::OK, "{p}");
    let p: Value = serde_json::from_str(&p).unwrap();
    let c = p["concepts"].as_array().unwrap().iter().find(|c| c["name"] == concept.as_str()).unwrap();
    assert_eq!(c["prob"], 1.0);
    assert_eq!(c["intervened"], true);
    let pos = c["positive"].as_array().unwrap();
    assert_eq!(pos.len(), n_siblings);
    for s in pos {
        let want = if s["id"] == sub.as_str() { 1.0 } else { 0.0 };
        assert_eq!(s["prob"], want);
    }
    // same request twice gives the same bytes
    let (_, a) = call("POST", "/api/samples/0/intervene", &body.to_string()).await;
    let (_, b) = call("POST", "/api/samples/0/intervene", &body.to_string()).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn empty_intervention_equals_prediction() {
    let (_, pred) = get_json("/api/samples/5/prediction").await;
    let (s, iv) = call("POST", "/api/samples/5/intervene", r#"{"interventions":[]}"#).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(serde_json::from_str::<Value>(&iv).unwrap(), pred);
}

#[tokio::test]
async fn malformed_interventions_name_the_field() {
    let cases = [
        ("not json", "body"),
        (r#"{"interventions": 3}"#, "interventions"),
        (r#"{"interventions": [], "extra": 1}"#, "extra"),
        (r#"{"interventions": [{"level": "top", "concept": 0}]}"#, "interventions[0].present"),
        (r#"{"interventions": [{"level": "mid", "concept": 0, "present": true}]}"#, "interventions[0].level"),
        (r#"{"interventions": [{"level": "top", "concept": "nope", "present": true}]}"#, "interventions[0].concept"),
        (r#"{"interventions": [{"level": "top", "concept": 99, "present": true}]}"#, "interventions[0].concept"),
        (r#"{"interventions": [{"level": "top", "concept": 0, "present": true}, {"level": "sub", "concept": 0, "present": true}]}"#, "interventions[1].sub"),
        (r#"{"interventions": [{"level": "sub", "concept": 0, "sub": 0, "present": true}]}"#, "interventions[0].polarity"),
        (r#"{"interventions": [{"level": "sub", "concept": 0, "sub": "zzz", "present": false}]}"#, "interventions[0].sub"),
    ];
    for (body, field) in cases {
        let (s, b) = call("POST", "/api/samples/0/intervene", body).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
        let e: Value = serde_json::from_str(&b).unwrap();
        assert_eq!(e["field"], field, "{body}");
    }
}

#[tokio::test]
async fn prototypes_by_id_and_ordinal() {
    let (_, h) = get_json("/api/hierarchy").await;
    let (_, sub, _) = some_positive_sub(&h);
    let (s, p) = get_json(&format!("/api/subconcepts/{}/prototypes?n=4", encode(&sub))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(p["id"], sub.as_str());
    let list = p["prototypes"].as_array().unwrap();
    assert!(!list.is_empty() && list.len() <= 4);
    let acts: Vec<f64> = list.iter().map(|x| x["activation"].as_f64().unwrap()).collect();
    assert!(acts.windows(2).all(|w| w[0] >= w[1]));
    assert!(list.iter().all(|x| x["bank"].as_object().is_some_and(|m| !m.is_empty())));
    let (_, p2) = get_json(&format!("/api/subconcepts/{}/prototypes?n=2", encode(&sub))).await;
    assert_eq!(p2["prototypes"].as_array().unwrap()[..], list[..2]);
    let ordinal = h["concepts"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|c| c["positive"].as_array().unwrap().iter().chain(c["negative"].as_array().unwrap()))
        .find(|s| s["id"] == sub.as_str())
        .unwrap()["ordinal"]
        .clone();
    let (_, p3) = get_json(&format!("/api/subconcepts/{ordinal}/prototypes?n=4")).await;
    assert_eq!(p3, p);
    let (s, _) = get_json("/api/subconcepts/missing/prototypes").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, e) = get_json(&format!("/api/subconcepts/{}/prototypes?n=x", encode(&sub))).await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::BAD_REQUEST, Some("n")));
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let body = r#"{"interventions":[{"level":"top","concept":1,"present":false}]}"#;
    let tasks: Vec<_> = (0..8)
        .map(|_| tokio::spawn(async move { call("POST", "/api/samples/3/intervene", body).await }))
        .collect();
    let mut outs = Vec::new();
    for t in tasks {
        outs.push(t.await.unwrap());
    }
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(outs[0].0, StatusCode::OK);
}

fn cli(args: &[&str]) -> (Result<(), hicem_cli::CliError>, String) {
    let cli = Cli::try_parse_from(args).unwrap();
    let mut out = Vec::new();
    let r = execute(&cli, &mut out);
    (r, String::from_utf8(out).unwrap())
}

#[tokio::test]
async fn cli_intervene_is_byte_identical_to_post() {
    let (_, h) = get_json("/api/hierarchy").await;
    let (concept, sub, _) = some_positive_sub(&h);
    let specs = [
        json!({"interventions": [{"level": "sub", "concept": concept, "sub": sub, "present": true}]}).to_string(),
        json!({"interventions": [{"level": "top", "concept": 0, "present": false}, {"level": "sub", "concept": concept, "sub": sub, "present": false}]}).to_string(),
        r#"{"interventions":[]}"#.to_string(),
    ];
    let config = config_path();
    for (sample, spec) in [7, 11, 12].into_iter().zip(&specs) {
        let (_, posted) = call("POST", &format!("/api/samples/{sample}/intervene"), spec).await;
        let sample = sample.to_string();
        let (r, printed) = cli(&["hicem", "--config", config.to_str().unwrap(), "intervene", "--sample", &sample, "--spec", spec]);
        r.unwrap();
        assert_eq!(printed.as_bytes(), posted.as_bytes());
    }
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[world]\nkind = \"mnist\"\n").unwrap();
    let (r, _) = cli(&["hicem", "--config", bad.to_str().unwrap(), "gen"]);
    assert_eq!(r.unwrap_err().code, EXIT_CONFIG);

    let empty = dir.path().join("empty");
    let (r, _) = cli(&["hicem", "--artifacts", empty.to_str().unwrap(), "intervene", "--sample", "0", "--spec", "{}"]);
    assert_eq!(r.unwrap_err().code, EXIT_STAGE);

    let config = config_path();
    let (r, _) = cli(&["hicem", "--config", config.to_str().unwrap(), "intervene", "--sample", "0", "--spec", "[]"]);
    assert_eq!(r.unwrap_err().code, EXIT_CONFIG);

    // the real binary maps the same failures to process exit codes
    let bin = env!("CARGO_BIN_EXE_hicem");
    let status = std::process::Command::new(bin)
        .args(["--config", bad.to_str().unwrap(), "gen"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_CONFIG));
    let status = std::process::Command::new(bin).args(["no-such-command"]).output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_CONFIG));
    let status = std::process::Command::new(bin)
        .args(["--artifacts", empty.to_str().unwrap(), "serve"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_STAGE));
}

#[test]
fn cli_stages_reuse_finished_run() {
    let config = config_path();
    let (r, out) = cli(&["hicem", "--config", config.to_str().unwrap(), "curve", "--which", "cem-top"]);
    r.unwrap();
    assert!(out.starts_with("intervened\taccuracy\n0\t"));
    let (r, out) = cli(&["hicem", "--config", config.to_str().unwrap(), "report"]);
    r.unwrap();
    assert!(out.contains("HiCEM  task accuracy"));
}
