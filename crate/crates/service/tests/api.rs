use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use medroute_core::config::EngineConfig;
use medroute_service::{router, Engine};
use serde_json::{json, Value};
use tower::ServiceExt;

fn config(theta: f64) -> EngineConfig {
    EngineConfig {
        theta_init: theta,
        ..EngineConfig::default()
    }
}

fn app(theta: f64) -> Router {
    router(Engine::open(config(theta), None).unwrap(), None, None)
}

/// Two specialists; `agree` makes their texts identical.
fn case(id: &str, confidence: f64, agree: bool, positive: bool) -> Value {
    let label = if positive { "positive" } else { "negative" };
    let other = if agree { label } else if positive { "negative" } else { "positive" };
    let ecg = format!("sinus rhythm with narrow qrs risk_stratification:{label}");
    let echo = if agree {
        ecg.clone()
    } else {
        format!("dilated ventricle severe regurgitation effusion risk_stratification:{other}")
    };
    json!({
        "case_id": id,
        "clinical_info": {"age": "64", "sex": "F"},
        "modality_payloads": [
            {"modality_tag": "ECG", "payload": json!({"diagnosis": ecg, "confidence": confidence}).to_string()},
            {"modality_tag": "ECHO", "payload": json!({"diagnosis": echo, "confidence": confidence}).to_string()},
        ],
        "declared_tasks": ["risk_stratification"],
        "ground_truth": {"risk_stratification": positive},
    })
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_raw(app, method, uri, body.map(|b| b.to_string()), None).await
}

async fn call_raw(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<String>,
    token: Option<&str>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = req
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes)
        .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()));
    (status, value)
}

async fn settled(app: &Router, id: &str) -> Value {
    for _ in 0..500 {
        let (status, v) = call(app, "GET", &format!("/cases/{id}"), None).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        if v["status"] != "processing" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("case {id} never settled");
}

async fn submit(app: &Router, body: Value) -> Value {
    let id = body["case_id"].as_str().unwrap().to_string();
    let (status, v) = call(app, "POST", "/cases", Some(body)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    assert_eq!(v, json!({"case_id": id, "status": "processing"}));
    settled(app, &id).await
}

#[tokio::test]
async fn fresh_server_reports_zero_counts() {
    let app = app(0.5);
    let (s, health) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(health["status"], "ok");
    let (_, m) = call(&app, "GET", "/metrics", None).await;
    assert_eq!(m["n_cases"], 0);
    assert_eq!(m["theta"], 0.5);
    assert!(m["escalation_rate"].is_null());
    let (_, t) = call(&app, "GET", "/threshold", None).await;
    assert_eq!(t["theta"], 0.5);
    assert_eq!(t["history_length"], 0);
    let (_, q) = call(&app, "GET", "/queue", None).await;
    assert_eq!(q, json!([]));
}

#[tokio::test]
async fn submission_errors_map_to_status_codes() {
    let app = app(1.0);
    submit(&app, case("a", 0.9, true, true)).await;
    let (s, v) = call(&app, "POST", "/cases", Some(case("a", 0.9, true, true))).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");

    let (s, _) = call_raw(&app, "POST", "/cases", Some("{not json".into()), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, v) = call(&app, "POST", "/cases", Some(json!({"case_id": "empty"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["violations"].as_array().unwrap().len() >= 1);

    let mut no_tasks = case("b", 0.9, true, true);
    no_tasks.as_object_mut().unwrap().remove("declared_tasks");
    let (s, _) = call(&app, "POST", "/cases", Some(no_tasks)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = call(&app, "GET", "/cases/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn autonomous_case_carries_full_trace() {
    let app = app(1.0);
    let v = submit(&app, case("a", 0.9, true, true)).await;
    assert_eq!(v["status"], "autonomous");
    assert_eq!(v["outcome"]["mode"], "autonomous");
    assert_eq!(v["trace"]["findings"].as_array().unwrap().len(), 2);
    let weights: f64 = v["trace"]["fusion"]["findings"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["weight"].as_f64().unwrap())
        .sum();
    assert!((weights - 1.0).abs() < 1e-9);
    assert!(v["trace"]["routing"].is_object());
    assert!(v["ticket"].is_null());
}

async fn escalated(app: &Router, id: &str) -> Value {
    let v = submit(app, case(id, 0.05, false, true)).await;
    assert_eq!(v["status"], "pending_review", "{v}");
    v
}

#[tokio::test]
async fn accept_raises_threshold_once() {
    let app = app(0.5);
    escalated(&app, "a").await;
    let (_, q) = call(&app, "GET", "/queue", None).await;
    let tickets = q.as_array().unwrap();
    assert_eq!(tickets.len(), 1);
    let t = &tickets[0];
    assert_eq!(t["ticket_id"], "tkt-a");
    assert_eq!(t["status"], "pending");
    let w: f64 = t["evidence"].as_array().unwrap().iter().map(|e| e["weight"].as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-9);
    assert!(t["uncertainty"]["total"].as_f64().unwrap() > 0.5);

    let (s, r) = call(&app, "POST", "/queue/tkt-a/review", Some(json!({"verdict": "accept", "reviewer_id": "dr-k"}))).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(r["theta"], 0.501);
    assert_eq!(r["outcome"]["clinician_modified"], false);
    assert_eq!(r["outcome"]["final_decision"], r["outcome"]["preliminary"]["decision_text"]);
    assert_eq!(r["ticket"]["resolution"]["reviewer_id"], "dr-k");

    let (s, _) = call(&app, "POST", "/queue/tkt-a/review", Some(json!({"verdict": "accept"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, q) = call(&app, "GET", "/queue", None).await;
    assert_eq!(q, json!([]));
    let (_, th) = call(&app, "GET", "/threshold", None).await;
    assert_eq!(th["history_length"], 1);
    let v = settled(&app, "a").await;
    assert_eq!(v["status"], "resolved");
    assert_eq!(v["ticket"]["status"], "resolved");
    assert!(v["trace"]["feedback"].is_object());
}

#[tokio::test]
async fn modify_lowers_threshold_and_needs_text() {
    let app = app(0.5);
    escalated(&app, "a").await;
    let (s, _) = call(&app, "POST", "/queue/tkt-a/review", Some(json!({"verdict": "modify"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/queue/tkt-a/review", Some(json!({"verdict": "maybe"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, r) = call(
        &app,
        "POST",
        "/queue/tkt-a/review",
        Some(json!({"verdict": "modify", "final_decision": "risk_stratification=0.000"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["theta"], 0.499);
    assert_eq!(r["outcome"]["final_decision"], "risk_stratification=0.000");
    let (s, _) = call(&app, "POST", "/queue/tkt-x/review", Some(json!({"verdict": "accept"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn queue_orders_by_uncertainty_then_submission() {
    let app = app(0.0);
    submit(&app, case("low", 0.6, true, true)).await;
    submit(&app, case("high", 0.05, false, true)).await;
    submit(&app, case("low-again", 0.6, true, true)).await;
    let (_, q) = call(&app, "GET", "/queue", None).await;
    let ids: Vec<&str> = q.as_array().unwrap().iter().map(|t| t["case_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["high", "low", "low-again"]);
    let u: Vec<f64> = q.as_array().unwrap().iter().map(|t| t["uncertainty"]["total"].as_f64().unwrap()).collect();
    assert!(u[0] > u[1]);
    assert_eq!(u[1], u[2]);
}

#[tokio::test]
async fn metrics_air_needs_both_splits() {
    let app = app(0.5);
    submit(&app, case("a", 0.95, true, true)).await;
    let (_, m) = call(&app, "GET", "/metrics", None).await;
    assert_eq!(m["autonomous"], 1);
    let task = &m["tasks"]["risk_stratification"];
    assert!(task["evaluation"]["air"].is_null(), "{m}");

    escalated(&app, "b").await;
    call(&app, "POST", "/queue/tkt-b/review", Some(json!({"verdict": "accept"}))).await;
    let (_, m) = call(&app, "GET", "/metrics", None).await;
    assert_eq!(m["resolved"], 1);
    assert_eq!(m["escalation_rate"], 0.5);
    assert_eq!(m["tasks"]["risk_stratification"]["metrics"]["n_total"], 2);
}

#[tokio::test]
async fn threshold_trace_csv_lists_routed_cases() {
    let app = app(0.5);
    submit(&app, case("a", 0.95, true, true)).await;
    escalated(&app, "b").await;
    call(&app, "POST", "/queue/tkt-b/review", Some(json!({"verdict": "accept"}))).await;
    let (s, body) = call(&app, "GET", "/threshold/trace.csv", None).await;
    assert_eq!(s, StatusCode::OK);
    let text = body.as_str().unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "case_index,case_id,u_total,theta_before,mode,clinician_modified,theta_after");
    assert!(lines[1].starts_with("0,a,"));
    assert!(lines[1].contains(",autonomous,,0.5"));
    assert!(lines[2].starts_with("1,b,"));
    assert!(lines[2].ends_with(",escalated,false,0.501"));
}

#[tokio::test]
async fn bearer_token_guards_everything_but_health() {
    let app = router(Engine::open(config(0.5), None).unwrap(), Some("s3cret".into()), None);
    let (s, _) = call_raw(&app, "GET", "/queue", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call_raw(&app, "GET", "/queue", None, Some("wrong")).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call_raw(&app, "GET", "/queue", None, Some("s3cret")).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call_raw(&app, "GET", "/healthz", None, None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn static_dir_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>review</p>").unwrap();
    let app = router(Engine::open(config(0.5), None).unwrap(), None, Some(dir.path().into()));
    let (s, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, "<p>review</p>");
}

async fn populate(dir: &Path) -> (Value, Value, Value, String) {
    let app = router(Engine::open(config(0.5), Some(dir)).unwrap(), None, None);
    submit(&app, case("a", 0.95, true, true)).await;
    escalated(&app, "b").await;
    escalated(&app, "c").await;
    escalated(&app, "d").await;
    call(&app, "POST", "/queue/tkt-b/review", Some(json!({"verdict": "accept"}))).await;
    call(
        &app,
        "POST",
        "/queue/tkt-c/review",
        Some(json!({"verdict": "modify", "final_decision": "risk_stratification=0.000", "reviewer_id": "r1"})),
    )
    .await;
    let (_, th) = call(&app, "GET", "/threshold", None).await;
    let (_, q) = call(&app, "GET", "/queue", None).await;
    let (_, c) = call(&app, "GET", "/cases/c", None).await;
    let (_, csv) = call(&app, "GET", "/threshold/trace.csv", None).await;
    (th, q, c, csv.as_str().unwrap().to_string())
}

#[tokio::test]
async fn restart_restores_threshold_outcomes_and_queue() {
    let dir = tempfile::tempdir().unwrap();
    let (th, q, c, csv) = populate(dir.path()).await;
    assert_eq!(th["theta"], 0.5);
    assert_eq!(th["history_length"], 2);

    let app = router(Engine::open(config(0.5), Some(dir.path())).unwrap(), None, None);
    let (_, health) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(health["replay_divergences"], 0);
    assert_eq!(health["cases"], 4);
    let (_, th2) = call(&app, "GET", "/threshold", None).await;
    assert_eq!(th2, th);
    let (_, q2) = call(&app, "GET", "/queue", None).await;
    assert_eq!(q2, q);
    let (_, c2) = call(&app, "GET", "/cases/c", None).await;
    assert_eq!(c2, c);
    let (_, csv2) = call(&app, "GET", "/threshold/trace.csv", None).await;
    assert_eq!(csv2, csv);
    let (_, a) = call(&app, "GET", "/cases/a", None).await;
    assert_eq!(a["status"], "autonomous");

    // The restored queue keeps working and new ids keep being accepted.
    let (s, r) = call(&app, "POST", "/queue/tkt-d/review", Some(json!({"verdict": "accept"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["theta"], 0.501);
    let (s, _) = call(&app, "POST", "/queue/tkt-b/review", Some(json!({"verdict": "accept"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", "/cases", Some(case("a", 0.9, true, true))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    submit(&app, case("e", 0.95, true, false)).await;
}

#[tokio::test]
async fn tampered_audit_log_is_reported_on_restart() {
    let dir = tempfile::tempdir().unwrap();
    populate(dir.path()).await;
    let path = dir.path().join("audit.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let edited: Vec<String> = text
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            if v["kind"] == "fusion" && v["case_id"] == "a" {
                v["payload"]["findings"][0]["weight"] = json!(0.9);
            }
            v.to_string()
        })
        .collect();
    std::fs::write(&path, edited.join("\n") + "\n").unwrap();
    let engine = Engine::open(config(0.5), Some(dir.path())).unwrap();
    assert!(engine.health().replay_divergences > 0);
}

#[tokio::test]
async fn truncated_case_line_is_dropped_but_corrupt_middle_line_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dir.path().join("cases.jsonl");
    let good = case("a", 0.9, true, true).to_string();
    std::fs::write(&cases, format!("{good}\n{{\"case_id\": \"b\", \"clin")).unwrap();
    let engine = Engine::open(config(0.5), Some(dir.path())).unwrap();
    assert_eq!(engine.health().cases, 1);
    // `a` never reached routing before the "crash".
    let v = engine.case("a").await.unwrap();
    assert_eq!(v.status, medroute_service::CaseStatus::Failed);

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cases.jsonl"), format!("{{oops\n{good}\n")).unwrap();
    let err = Engine::open(config(0.5), Some(dir.path())).err().unwrap();
    assert!(err.to_string().contains("line 1"), "{err}");
}
