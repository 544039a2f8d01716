use std::collections::BTreeMap;
use std::path::Path;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use promptsci::codebook::Criterion;
use promptsci::protocol::{Labels, PhaseKind, Unit};
use promptsci::service::{router, DatasetUpload, GatewayMode, ProjectDir, ProjectSpec, Role, Service, ServiceConfig, Session};
use promptsci::simulation::{probe_generation, simulate, taxonomy_classification, SimulationFixture};

fn session(token: &str, rater: &str, role: Role) -> Session {
    Session { token: token.into(), rater: rater.into(), role, expires_at: None }
}

fn sessions() -> Vec<Session> {
    vec![
        session("t-lead", "senior", Role::Lead),
        session("t-a", "rater-a", Role::Assessor),
        session("t-b", "rater-b", Role::Assessor),
        session("t-out", "outsider", Role::Assessor),
        Session { token: "t-old".into(), rater: "rater-a".into(), role: Role::Assessor, expires_at: Some(1) },
        session("t-tax-lead", "lead", Role::Lead),
    ]
}

fn open(root: &Path) -> (Service, Router) {
    let svc = Service::open(ServiceConfig { root: root.to_path_buf(), sessions: sessions(), gateway: GatewayMode::Replay })
        .unwrap();
    (svc.clone(), router(svc))
}

fn spec(f: &SimulationFixture) -> ProjectSpec {
    ProjectSpec {
        config: f.config.clone(),
        codebook: Some(f.codebook.clone()),
        prompt: Some(f.prompt.clone()),
        dataset: Some(DatasetUpload { id: f.dataset_id.clone(), source: "fixture".into(), jsonl: f.dataset_jsonl.clone() }),
        transcript: f.transcript.clone(),
    }
}

async fn call(app: &Router, method: Method, path: &str, token: Option<&str>, body: Option<Value>, rid: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(path);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    if let Some(r) = rid {
        req = req.header("x-request-id", r);
    }
    let body = body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty);
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

async fn get(app: &Router, path: &str, token: &str) -> (StatusCode, Value) {
    call(app, Method::GET, path, Some(token), None, None).await
}

async fn post(app: &Router, path: &str, token: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, path, Some(token), Some(body), None).await
}

fn code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

fn queue_units(queue: &Value) -> Vec<Unit> {
    queue["units"]
        .as_array()
        .unwrap()
        .iter()
        .map(|u| Unit {
            id: u["id"].as_str().unwrap().into(),
            item_id: u["item_id"].as_str().unwrap().into(),
            text: u["text"].as_str().unwrap().into(),
            model_label: None,
        })
        .collect()
}

/// Scripted labels for `rater` in fixture step `step`.
fn scripted(f: &SimulationFixture, step: usize, rater: &str, round_id: &str, units: &[Unit], criteria: &[Criterion]) -> Labels {
    f.rounds[step].raters[rater]
        .labels_for(round_id, units, criteria, &f.dataset().unwrap(), rater)
        .unwrap()
}

/// Opens a round, fetches both queues, submits scripted labels and gates.
async fn scripted_round(app: &Router, f: &SimulationFixture, step: usize) -> (String, Value) {
    let (s, opened) = post(app, "/projects/probe-generation/rounds", "t-lead", json!({})).await;
    assert_eq!(s, StatusCode::CREATED, "{opened}");
    let rid = opened["round_id"].as_str().unwrap().to_string();
    for (token, rater) in [("t-a", "rater-a"), ("t-b", "rater-b")] {
        let (_, queue) = get(app, &format!("/projects/probe-generation/rounds/{rid}/queue"), token).await;
        let labels = scripted(f, step, rater, &rid, &queue_units(&queue), &f.codebook);
        let (s, ack) = post(app, &format!("/projects/probe-generation/rounds/{rid}/assessments"), token, json!({ "labels": labels })).await;
        assert_eq!(s, StatusCode::OK, "{ack}");
    }
    let (s, gate) = post(app, &format!("/projects/probe-generation/rounds/{rid}/gate"), "t-lead", json!({})).await;
    assert_eq!(s, StatusCode::OK, "{gate}");
    (rid, gate)
}

async fn resolve(app: &Router, f: &SimulationFixture, step: usize, rid: &str) {
    let (_, dis) = get(app, &format!("/projects/probe-generation/rounds/{rid}/disagreements"), "t-lead").await;
    let refs: Vec<Value> = dis["disagreements"].as_array().unwrap().iter().take(5).map(|d| d["unit_id"].clone()).collect();
    let res = f.rounds[step].resolution.as_ref().unwrap();
    let (s, body) = post(
        app,
        &format!("/projects/probe-generation/rounds/{rid}/deliberations"),
        "t-a",
        json!({ "id": format!("d-{rid}"), "participants": res.participants, "disagreed_item_refs": refs,
                "notes": res.notes, "resolution": res.resolution }),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{body}");
    let (s, body) = post(
        app,
        &format!("/projects/probe-generation/rounds/{rid}/revision"),
        "t-a",
        json!({ "deliberation_id": format!("d-{rid}"), "revision": { "changes": res.changes, "kind": "substantive" } }),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{body}");
}

fn event_count(status: &Value) -> u64 {
    status["event_count"].as_u64().unwrap()
}

#[tokio::test]
async fn auth_is_required_and_roles_are_enforced() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, app) = open(tmp.path());
    let body = serde_json::to_value(spec(&probe_generation())).unwrap();

    let (s, v) = call(&app, Method::POST, "/projects", None, Some(body.clone()), None).await;
    assert_eq!((s, code(&v)), (StatusCode::UNAUTHORIZED, "unauthenticated"));
    let (s, v) = post(&app, "/projects", "t-old", body.clone()).await;
    assert_eq!((s, code(&v)), (StatusCode::UNAUTHORIZED, "session_expired"));
    let (s, v) = post(&app, "/projects", "t-a", body.clone()).await;
    assert_eq!((s, code(&v)), (StatusCode::FORBIDDEN, "forbidden"));
    let (s, v) = post(&app, "/projects", "t-lead", body.clone()).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["project_id"], "probe-generation");
    let (s, v) = post(&app, "/projects", "t-lead", body).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "exists"));
    let (s, v) = get(&app, "/projects/nope", "t-a").await;
    assert_eq!((s, code(&v)), (StatusCode::NOT_FOUND, "not_found"));
    let (s, v) = post(&app, "/projects", "t-lead", json!({ "config": 3 })).await;
    assert_eq!((s, code(&v)), (StatusCode::BAD_REQUEST, "bad_request"));
}

#[tokio::test]
async fn labeling_adjudication_and_phase_flow() {
    let f = probe_generation();
    let tmp = tempfile::tempdir().unwrap();
    let (_, app) = open(tmp.path());
    let (s, _) = post(&app, "/projects", "t-lead", serde_json::to_value(spec(&f)).unwrap()).await;
    assert_eq!(s, StatusCode::CREATED);

    let (s, opened) = post(&app, "/projects/probe-generation/rounds", "t-lead", json!({})).await;
    assert_eq!(s, StatusCode::CREATED);
    let rid = opened["round_id"].as_str().unwrap().to_string();
    assert_eq!(rid, "calibration-1");
    let base = format!("/projects/probe-generation/rounds/{rid}");

    // Queue: 50 units with 2 criteria each, no model output beyond the text.
    let (s, queue) = get(&app, &format!("{base}/queue"), "t-a").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(queue["units"].as_array().unwrap().len(), 50);
    assert_eq!(queue["criteria"].as_array().unwrap().len(), 2);
    assert!(queue["units"][0].get("model_label").is_none());
    let (s, v) = get(&app, &format!("{base}/queue"), "t-out").await;
    assert_eq!((s, code(&v)), (StatusCode::FORBIDDEN, "forbidden"));

    let units = queue_units(&queue);
    let criteria: Vec<String> = queue["criteria"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap().into()).collect();
    let scale: Vec<String> = queue["criteria"][0]["labels"].as_array().unwrap().iter().map(|l| l.as_str().unwrap().into()).collect();
    let labels_a = scripted(&f, 0, "rater-a", &rid, &units, &f.codebook);
    // rater-b agrees except on the first criterion of 12 units.
    let mut labels_b = labels_a.clone();
    let flipped: Vec<String> = units.iter().map(|u| u.id.clone()).filter(|u| labels_a[u][&criteria[0]].is_some()).take(12).collect();
    for u in &flipped {
        let cur = labels_b[u][&criteria[0]].clone().unwrap();
        let next = scale[(scale.iter().position(|l| *l == cur).unwrap() + 1) % scale.len()].clone();
        labels_b.get_mut(u).unwrap().insert(criteria[0].clone(), Some(next));
    }

    // Unassigned rater and off-scale labels.
    let (s, v) = post(&app, &format!("{base}/assessments"), "t-out", json!({ "labels": labels_a })).await;
    assert_eq!((s, code(&v)), (StatusCode::FORBIDDEN, "forbidden"));
    let mut bad = labels_a.clone();
    bad.get_mut(&units[3].id).unwrap().insert(criteria[1].clone(), Some("not-a-label".into()));
    let (s, v) = post(&app, &format!("{base}/assessments"), "t-a", json!({ "labels": bad })).await;
    assert_eq!((s, code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, "invalid_labels"));
    assert_eq!(v["error"]["units"], json!([units[3].id]));

    let (_, before) = get(&app, "/projects/probe-generation", "t-lead").await;
    let (s, ack) = post(&app, &format!("{base}/assessments"), "t-a", json!({ "labels": labels_a })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ack["awaiting"], json!(["rater-b"]));
    let (_, after) = get(&app, "/projects/probe-generation", "t-lead").await;
    assert_eq!(event_count(&after), event_count(&before) + 1);
    let (s, v) = post(&app, &format!("{base}/assessments"), "t-a", json!({ "labels": labels_a })).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "already_submitted"));

    // Blindness: no co-rater bytes before closure, own labels round-trip.
    let (s, v) = get(&app, &format!("{base}/labels/rater-b"), "t-a").await;
    assert_eq!((s, code(&v)), (StatusCode::FORBIDDEN, "blindness"));
    assert!(v.get("labels").is_none());
    let (s, v) = get(&app, &format!("{base}/labels/rater-a"), "t-a").await;
    assert_eq!(s, StatusCode::OK);
    let echoed: Labels = serde_json::from_value(v["labels"].clone()).unwrap();
    assert_eq!(echoed, labels_a);
    let (s, v) = get(&app, &format!("{base}/disagreements"), "t-a").await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "not_ready"));

    // Status mid-round names the pending assessor.
    let (_, st) = get(&app, "/projects/probe-generation", "t-b").await;
    assert_eq!(st["phase"], "criteria_calibration");
    assert_eq!(st["round"]["ordinal"], 1);
    assert_eq!(st["round"]["awaiting"], json!(["rater-b"]));

    // A retried submission with the same request id changes state once.
    let path = format!("{base}/assessments");
    let body = json!({ "labels": labels_b });
    let (s1, v1) = call(&app, Method::POST, &path, Some("t-b"), Some(body.clone()), Some("req-1")).await;
    let (s2, v2) = call(&app, Method::POST, &path, Some("t-b"), Some(body), Some("req-1")).await;
    assert_eq!((s1, &v1), (s2, &v2));
    assert_eq!(s1, StatusCode::OK);
    assert_eq!(v1["labeling_closed"], true);
    let (_, st) = get(&app, "/projects/probe-generation", "t-lead").await;
    assert_eq!(event_count(&st), event_count(&after) + 2);

    // Exactly the 12 known disagreements, side by side.
    let (s, dis) = get(&app, &format!("{base}/disagreements"), "t-b").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(dis["count"], 12);
    let listed: Vec<String> = dis["disagreements"].as_array().unwrap().iter().map(|d| d["unit_id"].as_str().unwrap().into()).collect();
    let mut expected = flipped.clone();
    expected.sort();
    let mut listed_sorted = listed.clone();
    listed_sorted.sort();
    assert_eq!(listed_sorted, expected);
    let first = &dis["disagreements"][0];
    let u = first["unit_id"].as_str().unwrap();
    assert_eq!(first["labels"]["rater-a"][&criteria[0]], json!(labels_a[u][&criteria[0]]));
    assert_eq!(first["labels"]["rater-b"][&criteria[0]], json!(labels_b[u][&criteria[0]]));
    let (s, v) = get(&app, &format!("{base}/labels/rater-a"), "t-b").await;
    assert_eq!(s, StatusCode::OK, "{v}");

    // Gate fails on the first criterion.
    let (s, v) = post(&app, &format!("{base}/gate"), "t-a", json!({})).await;
    assert_eq!(s, StatusCode::FORBIDDEN, "{v}");
    let (s, gate) = post(&app, &format!("{base}/gate"), "t-lead", json!({})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(gate["verdict"]["passed"], false, "{gate}");

    // Adjudication.
    let (s, v) = post(&app, &format!("{base}/deliberations"), "t-a",
        json!({ "id": "d1", "participants": ["rater-a", "rater-b"], "disagreed_item_refs": [], "notes": "talked" })).await;
    assert_eq!((s, code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, "invalid_deliberation"));
    let (s, v) = post(&app, &format!("{base}/deliberations"), "t-out",
        json!({ "id": "d1", "participants": ["rater-a", "rater-b"], "disagreed_item_refs": [listed[0]], "notes": "talked" })).await;
    assert_eq!(s, StatusCode::FORBIDDEN, "{v}");
    resolve(&app, &f, 0, &rid).await;

    // Calibration rounds 2 and 3 follow the scripted trajectory.
    let (rid2, gate2) = scripted_round(&app, &f, 1).await;
    assert_eq!(gate2["verdict"]["passed"], false);
    resolve(&app, &f, 1, &rid2).await;
    let (rid3, gate3) = scripted_round(&app, &f, 2).await;
    assert_eq!(gate3["verdict"]["passed"], true, "{gate3}");

    // Revising a passed round conflicts; finalization is the way forward.
    let (s, v) = post(&app, &format!("/projects/probe-generation/rounds/{rid3}/revision"), "t-lead",
        json!({ "deliberation_id": "d-calibration-2", "revision": { "changes": f.rounds[0].resolution.as_ref().unwrap().changes, "kind": "substantive" } })).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "not_failed"));
    let (s, v) = post(&app, "/projects/probe-generation/rounds", "t-lead", json!({})).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "phase_passed"));
    let readability = f.rounds[2].finalize.as_ref().unwrap().readability.clone();
    let (s, v) = post(&app, "/projects/probe-generation/finalize", "t-lead", json!({ "revision": { "changes": readability, "kind": "readability_only" } })).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["phase"], "prompt_development");

    // Prompt development round 1 fails on pass-rate 0.50 against 0.75.
    let (rid4, gate4) = scripted_round(&app, &f, 3).await;
    assert_eq!(gate4["pass_rate"], 0.5);
    let conds = gate4["verdict"]["failed_conditions"].as_array().unwrap();
    assert!(conds.iter().any(|c| c["condition"] == "pass_rate" && c["observed"] == 0.5 && c["threshold"] == 0.75), "{gate4}");
    resolve(&app, &f, 3, &rid4).await;

    // Mid-round status in round 2.
    let (_, opened) = post(&app, "/projects/probe-generation/rounds", "t-lead", json!({})).await;
    let rid5 = opened["round_id"].as_str().unwrap().to_string();
    let (_, queue) = get(&app, &format!("/projects/probe-generation/rounds/{rid5}/queue"), "t-a").await;
    let labels = scripted(&f, 4, "rater-a", &rid5, &queue_units(&queue), &f.codebook);
    post(&app, &format!("/projects/probe-generation/rounds/{rid5}/assessments"), "t-a", json!({ "labels": labels })).await;
    let (_, st) = get(&app, "/projects/probe-generation", "t-lead").await;
    assert_eq!(st["phase"], "prompt_development");
    assert_eq!(st["round"]["ordinal"], 2);
    assert_eq!(st["round"]["awaiting"], json!(["rater-b"]));

    // State survives a restart.
    let (_, before) = get(&app, "/projects/probe-generation", "t-lead").await;
    let (_, app2) = open(tmp.path());
    let (_, reloaded) = get(&app2, "/projects/probe-generation", "t-lead").await;
    assert_eq!(before, reloaded);
    let (s, bundle) = get(&app2, "/projects/probe-generation/export", "t-b").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bundle["status"], "in_progress");
}

/// Writes a simulated engine into `root/<id>` as a service would have.
fn seed_project(root: &Path, f: &SimulationFixture) {
    let out = simulate(f, None).unwrap();
    assert!(out.ok(), "{:?}", out.deviations);
    let dir = ProjectDir::new(root.join(&f.config.id));
    dir.write_events(&out.engine).unwrap();
    dir.save_transcript(&out.transcript).unwrap();
}

#[tokio::test]
async fn complete_project_is_immutable_and_exports() {
    let tmp = tempfile::tempdir().unwrap();
    let f = probe_generation();
    seed_project(tmp.path(), &f);
    let (svc, app) = open(tmp.path());
    assert_eq!(svc.project_ids(), vec!["probe-generation".to_string()]);

    let (_, st) = get(&app, "/projects/probe-generation", "t-a").await;
    assert_eq!(st["phase"], "complete");
    let gate = serde_json::to_value(&f.config.gate).unwrap();
    let (s, v) = call(&app, Method::PUT, "/projects/probe-generation/gate", Some("t-lead"), Some(gate), None).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "immutable"));

    let (s, bundle) = get(&app, "/projects/probe-generation/export", "t-lead").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bundle["status"], "complete");
    assert!(bundle["final_artifacts"].is_object());
    let (s, report) = get(&app, "/projects/probe-generation/report", "t-lead").await;
    assert_eq!(s, StatusCode::OK);
    assert!(report.as_str().unwrap().contains("0.50 → 0.70 → 0.82"));

    let (s, v) = post(&app, "/projects/probe-generation/production", "t-lead", json!({ "scope": "all" })).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["outputs"].as_array().unwrap().len(), 80);
}

#[tokio::test]
async fn validation_with_overlapping_assessors_conflicts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut f = taxonomy_classification();
    f.config.validation_assessors = vec!["coder-a".into(), "coder-c".into()];
    f.rounds.truncate(3);
    f.production = None;
    f.expected_final_phase = PhaseKind::Validation;
    seed_project(tmp.path(), &f);
    let (_, app) = open(tmp.path());
    let id = f.config.id.clone();

    let (s, v) = post(&app, &format!("/projects/{id}/validation"), "t-tax-lead", json!({})).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "no_fresh_assessors"), "{v}");
    let (s, v) = post(&app, &format!("/projects/{id}/production"), "t-tax-lead", json!({})).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "not_ready"), "{v}");
}

#[test]
fn labels_type_is_nested_maps() {
    let l: Labels = BTreeMap::from([("u".to_string(), BTreeMap::from([("c".to_string(), None)]))]);
    assert_eq!(serde_json::to_value(&l).unwrap(), json!({ "u": { "c": null } }));
}
