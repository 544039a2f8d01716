//! HTTP interface over the protocol engine.
//!
//! Every request carries `Authorization: Bearer <token>`; tokens map to
//! static sessions loaded at startup. State-changing requests may carry an
//! `X-Request-Id`; a repeated id from the same rater returns the recorded
//! response without touching the project again. All engine calls go
//! through one lock, so each project has a single writer.

mod store;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::Router;
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audit::{export, render_report, AuditError};
use crate::codebook::{CodebookError, DeliberationRecord};
use crate::corpus::CorpusError;
use crate::gateway::{EnvProviders, Gateway, GatewayError};
use crate::protocol::{Engine, EngineError, GateConfig, Labels, ProductionScope, RevisionRequest};

pub use store::{DatasetUpload, ProjectDir, ProjectSpec, StoreError};

pub const REQUEST_ID_HEADER: &str = "x-request-id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Assessor,
    Lead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub rater: String,
    pub role: Role,
    /// Unix seconds; `None` never expires.
    #[serde(default)]
    pub expires_at: Option<u64>,
}

impl Session {
    /// A session with a fresh 256-bit random token.
    pub fn generate(rater: impl Into<String>, role: Role, expires_at: Option<u64>) -> Self {
        let mut bytes = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut bytes);
        Self { token: hex::encode(bytes), rater: rater.into(), role, expires_at }
    }

    fn expired(&self, now: u64) -> bool {
        self.expires_at.is_some_and(|t| now >= t)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Error body: `{"error": {"code", "message", "units"?}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub units: Vec<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), units: Vec::new() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", message)
    }

    fn body(&self) -> Value {
        let mut err = json!({ "code": self.code, "message": self.message });
        if !self.units.is_empty() {
            err["units"] = json!(self.units);
        }
        json!({ "error": err })
    }
}

fn engine_status(e: &EngineError) -> StatusCode {
    use EngineError as E;
    match e {
        E::Incomplete(_) | E::InvalidConfig(_) => StatusCode::BAD_REQUEST,
        E::Forbidden(_) | E::Blindness => StatusCode::FORBIDDEN,
        E::UnknownRound(_) | E::UnknownDeliberation(_) => StatusCode::NOT_FOUND,
        E::InvalidLabels { .. }
        | E::InvalidDeliberation(_)
        | E::WrongArtifact { .. }
        | E::InsufficientRevision(_)
        | E::SubstantiveAtFinalize
        | E::NoAssessableUnits => StatusCode::UNPROCESSABLE_ENTITY,
        E::Codebook(CodebookError::Immutable(_)) => StatusCode::CONFLICT,
        E::Codebook(_) => StatusCode::UNPROCESSABLE_ENTITY,
        E::Corpus(CorpusError::Exhausted { .. }) => StatusCode::CONFLICT,
        E::Corpus(_) => StatusCode::BAD_REQUEST,
        E::Gateway(GatewayError::CacheMiss(_)) | E::Gateway(GatewayError::AllFailed(_)) => StatusCode::CONFLICT,
        E::Gateway(_) => StatusCode::BAD_GATEWAY,
        E::Log(_) | E::Metrics(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::CONFLICT,
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let units = match &e {
            EngineError::InvalidLabels { units, .. } => units.clone(),
            _ => Vec::new(),
        };
        Self { status: engine_status(&e), code: e.code(), message: e.to_string(), units }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Engine(e) => e.into(),
            StoreError::Gateway(e) => EngineError::Gateway(e).into(),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", other.to_string()),
        }
    }
}

/// A successful response, cached per request id.
#[derive(Debug, Clone)]
enum Reply {
    Json(StatusCode, Value),
    Text(&'static str, String),
}

type Outcome = Result<Reply, ApiError>;

fn render(outcome: Outcome) -> Response {
    match outcome {
        Ok(Reply::Json(status, v)) => (status, axum::Json(v)).into_response(),
        Ok(Reply::Text(ct, body)) => ([(header::CONTENT_TYPE, ct)], body).into_response(),
        Err(e) => (e.status, axum::Json(e.body())).into_response(),
    }
}

fn ok(v: impl Serialize) -> Outcome {
    Ok(Reply::Json(StatusCode::OK, serde_json::to_value(v).expect("responses serialize")))
}

struct Project {
    engine: Engine,
    gateway: Gateway,
    dir: ProjectDir,
    persisted: usize,
}

impl Project {
    /// Appends new events and refreshes the transcript file.
    fn persist(&mut self, transcript_changed: bool) -> Result<(), ApiError> {
        self.persisted = self.dir.append_events(&self.engine, self.persisted)?;
        if transcript_changed {
            self.dir.save_transcript(&self.gateway.transcript())?;
        }
        Ok(())
    }
}

/// How the service reaches models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GatewayMode {
    /// Serve only recorded transcript responses.
    #[default]
    Replay,
    /// Call providers over HTTP with credentials from the environment.
    Live,
}

pub struct ServiceConfig {
    /// Directory holding one subdirectory per project.
    pub root: PathBuf,
    pub sessions: Vec<Session>,
    pub gateway: GatewayMode,
}

struct Inner {
    root: PathBuf,
    mode: GatewayMode,
    sessions: HashMap<String, Session>,
    projects: BTreeMap<String, Project>,
    replies: HashMap<(String, String), Outcome>,
}

impl Inner {
    fn gateway(&self, transcript: crate::gateway::Transcript) -> Gateway {
        match self.mode {
            GatewayMode::Replay => Gateway::replay(transcript),
            GatewayMode::Live => Gateway::live(Arc::new(EnvProviders::new()), transcript),
        }
    }

    fn project(&mut self, id: &str) -> Result<&mut Project, ApiError> {
        self.projects
            .get_mut(id)
            .ok_or_else(|| ApiError::not_found(format!("project {id}")))
    }
}

/// Shared handle; cheap to clone.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Mutex<Inner>>,
}

impl Service {
    /// Opens every started project found under `config.root`.
    pub fn open(config: ServiceConfig) -> Result<Self, StoreError> {
        std::fs::create_dir_all(&config.root)
            .map_err(|source| StoreError::Io { path: config.root.clone(), source })?;
        let mut inner = Inner {
            root: config.root.clone(),
            mode: config.gateway,
            sessions: config.sessions.into_iter().map(|s| (s.token.clone(), s)).collect(),
            projects: BTreeMap::new(),
            replies: HashMap::new(),
        };
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&config.root)
            .map_err(|source| StoreError::Io { path: config.root.clone(), source })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for path in dirs {
            let dir = ProjectDir::new(path);
            let Some(engine) = dir.load_engine()? else { continue };
            let gateway = inner.gateway(dir.load_transcript()?);
            let id = engine.state().config.id.clone();
            let persisted = engine.events().len();
            tracing::info!(project = %id, events = persisted, "project loaded");
            inner.projects.insert(id, Project { engine, gateway, dir, persisted });
        }
        Ok(Self { inner: Arc::new(Mutex::new(inner)) })
    }

    pub fn project_ids(&self) -> Vec<String> {
        self.inner.lock().expect("service lock").projects.keys().cloned().collect()
    }

    /// Authenticates, consults the request-id cache, and runs `op` on a
    /// blocking thread under the service lock.
    async fn exec<F>(&self, headers: HeaderMap, mutating: bool, op: F) -> Response
    where
        F: FnOnce(&mut Inner, &Session) -> Outcome + Send + 'static,
    {
        let inner = self.inner.clone();
        let result = tokio::task::spawn_blocking(move || {
            let mut guard = inner.lock().expect("service lock");
            let session = authenticate(&guard, &headers)?;
            let key = request_id(&headers).filter(|_| mutating).map(|id| (session.rater.clone(), id));
            if let Some(k) = &key {
                if let Some(prior) = guard.replies.get(k) {
                    return prior.clone();
                }
            }
            let outcome = op(&mut guard, &session);
            if let Some(k) = key {
                guard.replies.insert(k, outcome.clone());
            }
            outcome
        })
        .await
        .unwrap_or_else(|e| Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())));
        render(result)
    }
}

fn authenticate(inner: &Inner, headers: &HeaderMap) -> Result<Session, ApiError> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "missing bearer token"))?;
    let session = inner
        .sessions
        .get(token.trim())
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "unknown token"))?;
    if session.expired(unix_now()) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "session_expired", "session has expired"));
    }
    Ok(session.clone())
}

fn request_id(headers: &HeaderMap) -> Option<String> {
    headers
        .get(REQUEST_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

fn require_lead(session: &Session) -> Result<(), ApiError> {
    match session.role {
        Role::Lead => Ok(()),
        Role::Assessor => Err(ApiError::forbidden(format!("{} is not a lead", session.rater))),
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    if body.is_empty() {
        return serde_json::from_str("{}").map_err(|e| ApiError::bad_request(e.to_string()));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

/// Builds the router. Paths:
///
/// | method | path | role |
/// |---|---|---|
/// | POST | `/projects` | lead |
/// | GET | `/projects/{id}` | any |
/// | PUT | `/projects/{id}/gate` | lead |
/// | POST | `/projects/{id}/rounds` | lead |
/// | GET | `/projects/{id}/rounds/{round}/queue` | assignee |
/// | POST | `/projects/{id}/rounds/{round}/assessments` | assignee |
/// | GET | `/projects/{id}/rounds/{round}/labels/{rater}` | assignee or lead |
/// | GET | `/projects/{id}/rounds/{round}/disagreements` | assignee or lead |
/// | POST | `/projects/{id}/rounds/{round}/gate` | lead |
/// | POST | `/projects/{id}/rounds/{round}/deliberations` | assignee or lead |
/// | POST | `/projects/{id}/rounds/{round}/revision` | assignee or lead |
/// | POST | `/projects/{id}/finalize` | lead |
/// | POST | `/projects/{id}/validation` | lead |
/// | POST | `/projects/{id}/production` | lead |
/// | GET | `/projects/{id}/export` | any |
/// | GET | `/projects/{id}/report` | any |
pub fn router(service: Service) -> Router {
    Router::new()
        .route("/projects", post(create_project))
        .route("/projects/:id", get(project_status))
        .route("/projects/:id/gate", put(configure_gate))
        .route("/projects/:id/rounds", post(open_round))
        .route("/projects/:id/rounds/:round/queue", get(fetch_queue))
        .route("/projects/:id/rounds/:round/assessments", post(submit_labels))
        .route("/projects/:id/rounds/:round/labels/:rater", get(read_labels))
        .route("/projects/:id/rounds/:round/disagreements", get(list_disagreements))
        .route("/projects/:id/rounds/:round/gate", post(gate_round))
        .route("/projects/:id/rounds/:round/deliberations", post(post_deliberation))
        .route("/projects/:id/rounds/:round/revision", post(post_revision))
        .route("/projects/:id/finalize", post(finalize))
        .route("/projects/:id/validation", post(run_validation))
        .route("/projects/:id/production", post(production))
        .route("/projects/:id/export", get(export_bundle))
        .route("/projects/:id/report", get(report))
        .with_state(service)
}

async fn create_project(State(svc): State<Service>, headers: HeaderMap, body: Bytes) -> Response {
    svc.exec(headers, true, move |inner, session| {
        require_lead(session)?;
        let spec: ProjectSpec = parse(&body)?;
        let id = spec.config.id.clone();
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(ApiError::bad_request("project id must be non-empty [A-Za-z0-9_-]"));
        }
        if inner.projects.contains_key(&id) {
            return Err(ApiError::new(StatusCode::CONFLICT, "exists", format!("project {id} exists")));
        }
        let dir = ProjectDir::new(inner.root.join(&id));
        let engine = dir.start(&spec, &session.rater)?;
        let gateway = inner.gateway(dir.load_transcript()?);
        let persisted = engine.events().len();
        let status = engine.status();
        inner.projects.insert(id.clone(), Project { engine, gateway, dir, persisted });
        Ok(Reply::Json(StatusCode::CREATED, json!({ "project_id": id, "status": status })))
    })
    .await
}

async fn project_status(State(svc): State<Service>, headers: HeaderMap, UrlPath(id): UrlPath<String>) -> Response {
    svc.exec(headers, false, move |inner, _| ok(inner.project(&id)?.engine.status()))
        .await
}

async fn configure_gate(
    State(svc): State<Service>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Response {
    svc.exec(headers, true, move |inner, session| {
        require_lead(session)?;
        let gate: GateConfig = parse(&body)?;
        let p = inner.project(&id)?;
        p.engine.update_gate(gate, &session.rater)?;
        p.persist(false)?;
        ok(p.engine.status())
    })
    .await
}

#[derive(Deserialize)]
struct SeedBody {
    #[serde(default)]
    seed: Option<u64>,
}

async fn open_round(State(svc): State<Service>, headers: HeaderMap, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    svc.exec(headers, true, move |inner, session| {
        require_lead(session)?;
        let SeedBody { seed } = parse(&body)?;
        let p = inner.project(&id)?;
        let seed = seed.unwrap_or(p.engine.state().rounds.len() as u64);
        let round = p.engine.open_round(&p.gateway, seed, &session.rater)?;
        let reply = json!({ "round_id": round.id, "units": round.units.len(), "assignees": round.assignees });
        p.persist(true)?;
        Ok(Reply::Json(StatusCode::CREATED, reply))
    })
    .await
}

/// Units and rubric for one assessor. Model labels are never included.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Queue {
    pub round_id: String,
    pub version: u64,
    pub submitted: bool,
    pub codebook: String,
    pub criteria: Vec<QueueCriterion>,
    pub units: Vec<QueueUnit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueCriterion {
    pub id: String,
    pub name: String,
    pub definition: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueUnit {
    pub id: String,
    pub item_id: String,
    pub text: String,
}

async fn fetch_queue(
    State(svc): State<Service>,
    headers: HeaderMap,
    UrlPath((id, round_id)): UrlPath<(String, String)>,
) -> Response {
    svc.exec(headers, false, move |inner, session| {
        let p = inner.project(&id)?;
        let state = p.engine.state();
        let round = state.round(&round_id)?;
        if !round.assignees.contains(&session.rater) {
            return Err(EngineError::Forbidden(format!("{} is not assigned to {round_id}", session.rater)).into());
        }
        let codebook = state.store.codebook(round.codebook_version).map_err(EngineError::from)?;
        let criteria = state
            .criteria_for(round)
            .iter()
            .map(|c| QueueCriterion {
                id: c.id.clone(),
                name: c.name.clone(),
                definition: c.definition.clone(),
                labels: c.scale.values().to_vec(),
            })
            .collect();
        ok(Queue {
            round_id: round.id.clone(),
            version: round.version,
            submitted: round.assessments.contains_key(&session.rater),
            codebook: codebook.render(),
            criteria,
            units: round
                .units
                .iter()
                .map(|u| QueueUnit { id: u.id.clone(), item_id: u.item_id.clone(), text: u.text.clone() })
                .collect(),
        })
    })
    .await
}

#[derive(Deserialize)]
struct SubmitBody {
    labels: Labels,
    #[serde(default)]
    expected_version: Option<u64>,
}

async fn submit_labels(
    State(svc): State<Service>,
    headers: HeaderMap,
    UrlPath((id, round_id)): UrlPath<(String, String)>,
    body: Bytes,
) -> Response {
    svc.exec(headers, true, move |inner, session| {
        let SubmitBody { labels, expected_version } = parse(&body)?;
        let p = inner.project(&id)?;
        let ack = p.engine.submit_assessment(&round_id, &session.rater, &labels, expected_version)?;
        p.persist(false)?;
        ok(ack)
    })
    .await
}

async fn read_labels(
    State(svc): State<Service>,
    headers: HeaderMap,
    UrlPath((id, round_id, target)): UrlPath<(String, String, String)>,
) -> Response {
    // Reads are logged, so they go through the same path as writes.
    svc.exec(headers, false, move |inner, session| {
        let p = inner.project(&id)?;
        let labels = p.engine.read_labels(&round_id, &session.rater, &target)?;
        p.persist(false)?;
        ok(json!({ "round_id": round_id, "rater": target, "labels": labels }))
    })
    .await
}

async fn list_disagreements(
    State(svc): State<Service>,
    headers: HeaderMap,
    UrlPath((id, round_id)): UrlPath<(String, String)>,
) -> Response {
    svc.exec(headers, false, move |inner, session| {
        let p = inner.project(&id)?;
        let list = p.engine.disagreements(&round_id, &session.rater)?;
        ok(json!({ "round_id": round_id, "count": list.len(), "disagreements": list }))
    })
    .await
}

async fn gate_round(
    State(svc): State<Service>,
    headers: HeaderMap,
    UrlPath((id, round_id)): UrlPath<(String, String)>,
) -> Response {
    svc.exec(headers, true, move |inner, session| {
        require_lead(session)?;
        let p = inner.project(&id)?;
        let gate = serde_json::to_value(p.engine.gate_round(&round_id, &session.rater)?).expect("gate serializes");
        p.persist(false)?;
        Ok(Reply::Json(StatusCode::OK, gate))
    })
    .await
}

#[derive(Deserialize)]
struct DeliberationBody {
    id: String,
    participants: Vec<String>,
    #[serde(default)]
    disagreed_item_refs: Vec<String>,
    notes: String,
    #[serde(default)]
    resolution: String,
    #[serde(default)]
    lead: Option<String>,
}

fn may_adjudicate(p: &Project, round_id: &str, session: &Session) -> Result<(), ApiError> {
    let round = p.engine.state().round(round_id)?;
    if session.role == Role::Lead || round.assignees.contains(&session.rater) {
        Ok(())
    } else {
        Err(EngineError::Forbidden(format!("{} has no access to {round_id}", session.rater)).into())
    }
}

async fn post_deliberation(
    State(svc): State<Service>,
    headers: HeaderMap,
    UrlPath((id, round_id)): UrlPath<(String, String)>,
    body: Bytes,
) -> Response {
    svc.exec(headers, true, move |inner, session| {
        let b: DeliberationBody = parse(&body)?;
        let p = inner.project(&id)?;
        may_adjudicate(p, &round_id, session)?;
        let record = DeliberationRecord {
            id: b.id,
            round_id,
            participants: b.participants,
            disagreed_item_refs: b.disagreed_item_refs,
            notes: b.notes,
            resolution: b.resolution,
            lead: b.lead,
        };
        let delib_id = record.id.clone();
        p.engine.record_deliberation(record, &session.rater)?;
        p.persist(false)?;
        Ok(Reply::Json(StatusCode::CREATED, json!({ "deliberation_id": delib_id })))
    })
    .await
}

#[derive(Deserialize)]
struct RevisionBody {
    deliberation_id: String,
    revision: RevisionRequest,
}

async fn post_revision(
    State(svc): State<Service>,
    headers: HeaderMap,
    UrlPath((id, round_id)): UrlPath<(String, String)>,
    body: Bytes,
) -> Response {
    svc.exec(headers, true, move |inner, session| {
        let b: RevisionBody = parse(&body)?;
        let p = inner.project(&id)?;
        may_adjudicate(p, &round_id, session)?;
        let revision_id = p
            .engine
            .resolve_fail(&round_id, &b.deliberation_id, b.revision, &session.rater)?
            .to_string();
        p.persist(false)?;
        Ok(Reply::Json(
            StatusCode::CREATED,
            json!({ "revision_id": revision_id, "status": p.engine.status() }),
        ))
    })
    .await
}

#[derive(Deserialize)]
struct FinalizeBody {
    #[serde(default)]
    revision: Option<RevisionRequest>,
}

async fn finalize(State(svc): State<Service>, headers: HeaderMap, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    svc.exec(headers, true, move |inner, session| {
        require_lead(session)?;
        let FinalizeBody { revision } = parse(&body)?;
        let p = inner.project(&id)?;
        let phase = p.engine.finalize_phase(revision, &session.rater)?;
        p.persist(false)?;
        ok(json!({ "phase": phase }))
    })
    .await
}

async fn run_validation(
    State(svc): State<Service>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Response {
    svc.exec(headers, true, move |inner, session| {
        require_lead(session)?;
        let SeedBody { seed } = parse(&body)?;
        let p = inner.project(&id)?;
        let seed = seed.unwrap_or(p.engine.state().rounds.len() as u64);
        let round = p.engine.run_validation(&p.gateway, seed, &session.rater)?;
        let reply = json!({ "round_id": round.id, "units": round.units.len(), "assignees": round.assignees });
        p.persist(true)?;
        Ok(Reply::Json(StatusCode::CREATED, reply))
    })
    .await
}

async fn production(State(svc): State<Service>, headers: HeaderMap, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    svc.exec(headers, true, move |inner, session| {
        require_lead(session)?;
        let raw: Value = parse(&body)?;
        let scope: ProductionScope = if raw.get("scope").is_none() {
            ProductionScope::Holdout
        } else {
            serde_json::from_value(raw).map_err(|e| ApiError::bad_request(format!("invalid scope: {e}")))?
        };
        let p = inner.project(&id)?;
        let export =
            serde_json::to_value(p.engine.production_run(&p.gateway, scope, &session.rater)?).expect("export serializes");
        p.persist(true)?;
        Ok(Reply::Json(StatusCode::CREATED, export))
    })
    .await
}

async fn export_bundle(State(svc): State<Service>, headers: HeaderMap, UrlPath(id): UrlPath<String>) -> Response {
    svc.exec(headers, false, move |inner, _| {
        let bundle = export(&inner.project(&id)?.engine);
        Ok(Reply::Text("application/json", bundle.to_json()))
    })
    .await
}

async fn report(State(svc): State<Service>, headers: HeaderMap, UrlPath(id): UrlPath<String>) -> Response {
    svc.exec(headers, false, move |inner, _| {
        let bundle = export(&inner.project(&id)?.engine);
        match render_report(&bundle) {
            Ok(md) => Ok(Reply::Text("text/markdown; charset=utf-8", md)),
            Err(AuditError::RefusesToRender(v)) => {
                let mut e = ApiError::new(StatusCode::CONFLICT, "audit_violations", format!("{} violations", v.len()));
                e.units = v.iter().map(|v| v.to_string()).collect();
                Err(e)
            }
            Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "audit", e.to_string())),
        }
    })
    .await
}

/// Reads a JSON list of sessions.
pub fn load_sessions(path: &Path) -> Result<Vec<Session>, StoreError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| StoreError::Format { path: path.to_path_buf(), reason: e.to_string() })
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(service: Service, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(service)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_tokens_are_distinct_and_long() {
        let a = Session::generate("a", Role::Assessor, None);
        let b = Session::generate("a", Role::Assessor, None);
        assert_ne!(a.token, b.token);
        assert_eq!(a.token.len(), 64);
    }

    #[test]
    fn expiry_is_inclusive() {
        let s = Session::generate("a", Role::Lead, Some(100));
        assert!(!s.expired(99));
        assert!(s.expired(100));
    }

    #[test]
    fn engine_errors_map_to_statuses() {
        let e: ApiError = EngineError::Blindness.into();
        assert_eq!((e.status, e.code), (StatusCode::FORBIDDEN, "blindness"));
        let e: ApiError = EngineError::InvalidLabels { units: vec!["u1".into()], reason: "x".into() }.into();
        assert_eq!(e.status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(e.body()["error"]["units"], json!(["u1"]));
        let e: ApiError = EngineError::Immutable.into();
        assert_eq!(e.status, StatusCode::CONFLICT);
        let e: ApiError = EngineError::NoFreshAssessors("x".into()).into();
        assert_eq!((e.status, e.code), (StatusCode::CONFLICT, "no_fresh_assessors"));
    }
}
