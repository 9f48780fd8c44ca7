//! Shared state and HTTP handlers.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use smoothbench::dataset::{append_vote, read_vote_log, DatasetManifest, VoteRecord, MANIFEST_FILE};
use smoothbench::grid::{method_label, METHOD_COUNT, PARAM_COUNT};
use smoothbench::{Choice, ImageId};

use crate::{assign, Assignment, Clock, ServiceConfig, ServiceError, DAY_MS, INSTRUCTIONS};

#[derive(Debug, Default)]
struct Session {
    day: u64,
    active_ms: u64,
    last_ms: Option<u64>,
}

#[derive(Debug, Default)]
struct Mutable {
    sessions: HashMap<String, Session>,
    /// Step-1 picks per (volunteer, image): method → parameter.
    picks: HashMap<(String, ImageId), BTreeMap<u32, u32>>,
    /// Final votes already in the log.
    votes: HashMap<(String, ImageId), Choice>,
}

#[derive(Debug, Clone)]
struct ImageFiles {
    source: Option<String>,
    /// Content hash per grid cell, `None` when the file is missing.
    candidates: HashMap<Choice, Option<String>>,
}

/// Everything a request handler needs. Mutable state sits behind one lock,
/// which also serializes vote-log appends.
pub struct Service {
    root: PathBuf,
    vote_log: PathBuf,
    votes_per_image: usize,
    config: ServiceConfig,
    tokens: HashMap<String, String>,
    assignment: Assignment,
    images: BTreeMap<ImageId, ImageFiles>,
    /// Content hash → file path.
    blobs: HashMap<String, PathBuf>,
    clock: Box<dyn Clock>,
    state: Mutex<Mutable>,
}

fn hash_file(path: &FsPath) -> Option<String> {
    let bytes = std::fs::read(path).ok()?;
    Some(hex::encode(Sha256::digest(&bytes)))
}

impl Service {
    /// Loads the manifest at `dataset_dir`, hashes the image files, replays
    /// the existing vote log and computes the assignment.
    pub fn new(dataset_dir: &FsPath, config: ServiceConfig, clock: Box<dyn Clock>) -> Result<Self, ServiceError> {
        config.validate()?;
        let manifest = DatasetManifest::load(&dataset_dir.join(MANIFEST_FILE))?;
        let votes_per_image = config.votes_per_image.unwrap_or(manifest.votes_per_image);
        let vote_log = dataset_dir.join(&manifest.vote_log);
        let existing = read_vote_log(&vote_log)?;
        // Partial logs are fine here; only per-record rules are enforced.
        let mut votes = HashMap::new();
        let ids: std::collections::HashSet<ImageId> = manifest.images.iter().map(|e| e.id).collect();
        for (i, v) in existing.iter().enumerate() {
            let choice = v
                .choice()
                .map_err(|e| ServiceError::Config(format!("vote log line {}: {e}", i + 1)))?;
            if !ids.contains(&v.image) {
                return Err(ServiceError::Config(format!("vote log line {}: unknown image {}", i + 1, v.image)));
            }
            if votes.insert((v.volunteer.clone(), v.image), choice).is_some() {
                return Err(ServiceError::Config(format!(
                    "vote log line {}: second vote by {} on image {}",
                    i + 1,
                    v.volunteer,
                    v.image
                )));
            }
        }

        let mut blobs = HashMap::new();
        let mut images = BTreeMap::new();
        for entry in &manifest.images {
            let mut record = |rel: &str| {
                let path = dataset_dir.join(rel);
                let h = hash_file(&path)?;
                blobs.insert(h.clone(), path);
                Some(h)
            };
            let source = record(&entry.source);
            let mut candidates = HashMap::new();
            for c in &entry.candidates {
                let choice = Choice::new(c.method, c.param)
                    .map_err(|e| ServiceError::Config(format!("image {}: {e}", entry.id)))?;
                candidates.insert(choice, record(&c.path));
            }
            images.insert(entry.id, ImageFiles { source, candidates });
        }

        let names: Vec<String> = config.volunteers.iter().map(|v| v.id.clone()).collect();
        let order: Vec<ImageId> = images.keys().copied().collect();
        let assignment = assign(&order, &names, votes_per_image, config.seed)?;
        let tokens = config.volunteers.iter().map(|v| (v.token.clone(), v.id.clone())).collect();
        Ok(Self {
            root: dataset_dir.to_path_buf(),
            vote_log,
            votes_per_image,
            config,
            tokens,
            assignment,
            images,
            blobs,
            clock,
            state: Mutex::new(Mutable {
                votes,
                ..Default::default()
            }),
        })
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn dataset_dir(&self) -> &FsPath {
        &self.root
    }
}

/// JSON error body with an HTTP status and optional `Retry-After` seconds.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    retry_after: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            retry_after: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(json!({ "error": self.message }))).into_response();
        if let Some(secs) = self.retry_after {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<Service>;

fn static_url(hash: &str) -> String {
    format!("/static/{hash}.png")
}

impl Service {
    /// Resolves the bearer token and checks it belongs to `volunteer`.
    fn authorize(&self, headers: &HeaderMap, volunteer: &str) -> ApiResult<()> {
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token"))?;
        let owner = self
            .tokens
            .get(token)
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unknown token"))?;
        if !self.assignment.contains_key(volunteer) {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown volunteer {volunteer}")));
        }
        if owner != volunteer {
            return Err(ApiError::new(StatusCode::FORBIDDEN, "token belongs to another volunteer"));
        }
        Ok(())
    }

    fn check_assigned(&self, volunteer: &str, image: ImageId) -> ApiResult<()> {
        if !self.images.contains_key(&image) {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown image {image}")));
        }
        if !self.assignment[volunteer].contains(&image) {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                format!("image {image} is not assigned to {volunteer}"),
            ));
        }
        Ok(())
    }

    /// Accounts active time for a session request and refuses it once the
    /// daily allowance is spent.
    fn touch_session(&self, state: &mut Mutable, volunteer: &str) -> ApiResult<()> {
        let now = self.clock.now_ms();
        let day = now / DAY_MS;
        let s = state.sessions.entry(volunteer.to_string()).or_default();
        if s.day != day || s.last_ms.is_none() {
            *s = Session {
                day,
                active_ms: 0,
                last_ms: None,
            };
        }
        if let Some(last) = s.last_ms {
            let gap = now.saturating_sub(last);
            if gap <= self.config.idle_minutes * 60_000 {
                s.active_ms += gap;
            }
        }
        s.last_ms = Some(now);
        if s.active_ms >= self.config.session_minutes * 60_000 {
            let wait_ms = (day + 1) * DAY_MS - now;
            return Err(ApiError {
                status: StatusCode::TOO_MANY_REQUESTS,
                message: format!(
                    "daily session limit of {} minutes reached",
                    self.config.session_minutes
                ),
                retry_after: Some(wait_ms.div_ceil(1000)),
            });
        }
        Ok(())
    }

    fn file_url(&self, hash: &Option<String>, what: impl FnOnce() -> String) -> ApiResult<String> {
        hash.as_deref()
            .map(static_url)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("missing {}", what())))
    }
}

fn validate_choice(method: u32, param: u32) -> ApiResult<Choice> {
    Choice::new(method, param).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))
}

#[derive(Debug, Serialize)]
struct AssignmentBody<'a> {
    volunteer: &'a str,
    assigned: &'a [ImageId],
    pending: Vec<ImageId>,
}

async fn get_assignment(State(svc): State<Shared>, Path(volunteer): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    svc.authorize(&headers, &volunteer)?;
    let assigned = &svc.assignment[&volunteer];
    let state = svc.state.lock().expect("state lock");
    let pending = assigned
        .iter()
        .copied()
        .filter(|t| !state.votes.contains_key(&(volunteer.clone(), *t)))
        .collect();
    Ok(Json(AssignmentBody {
        volunteer: &volunteer,
        assigned,
        pending,
    })
    .into_response())
}

#[derive(Debug, Serialize)]
struct Tile {
    method: u32,
    param: u32,
    label: String,
    url: String,
}

fn cacheable_json(body: serde_json::Value) -> Response {
    let bytes = serde_json::to_vec(&body).expect("json");
    let etag = format!("\"{}\"", &hex::encode(Sha256::digest(&bytes))[..32]);
    (
        [
            (header::CONTENT_TYPE, "application/json".to_string()),
            (header::CACHE_CONTROL, "public, max-age=3600".to_string()),
            (header::ETAG, etag),
        ],
        bytes,
    )
        .into_response()
}

async fn get_grid(State(svc): State<Shared>, Path((image, method)): Path<(ImageId, u32)>) -> ApiResult<Response> {
    if !(1..=METHOD_COUNT as u32).contains(&method) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("method {method} is outside 1..={METHOD_COUNT}"),
        ));
    }
    let files = svc
        .images
        .get(&image)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image {image}")))?;
    let source = svc.file_url(&files.source, || format!("source file of image {image}"))?;
    let candidates = (1..=PARAM_COUNT as u32)
        .map(|param| {
            let choice = Choice::new(method, param).expect("in range");
            Ok(Tile {
                method,
                param,
                label: choice.setting_label(),
                url: svc.file_url(&files.candidates[&choice], || {
                    format!("candidate file {choice} of image {image}")
                })?,
            })
        })
        .collect::<ApiResult<Vec<_>>>()?;
    Ok(cacheable_json(json!({
        "image": image,
        "method": method,
        "method_label": method_label(method),
        "source": source,
        "candidates": candidates,
    })))
}

async fn get_static(State(svc): State<Shared>, Path(file): Path<String>) -> ApiResult<Response> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("no such file {file}"));
    let hash = file.strip_suffix(".png").ok_or_else(not_found)?;
    let path = svc.blobs.get(hash).ok_or_else(not_found)?;
    let bytes = std::fs::read(path).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable".to_string()),
            (header::ETAG, format!("\"{hash}\"")),
        ],
        bytes,
    )
        .into_response())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PickRequest {
    pub volunteer: String,
    pub image: ImageId,
    pub method: u32,
    pub param: u32,
}

async fn post_pick(State(svc): State<Shared>, headers: HeaderMap, Json(req): Json<PickRequest>) -> ApiResult<Response> {
    svc.authorize(&headers, &req.volunteer)?;
    svc.check_assigned(&req.volunteer, req.image)?;
    let choice = validate_choice(req.method, req.param)?;
    let mut state = svc.state.lock().expect("state lock");
    svc.touch_session(&mut state, &req.volunteer)?;
    let key = (req.volunteer.clone(), req.image);
    if state.votes.contains_key(&key) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("final vote for image {} already recorded", req.image),
        ));
    }
    let picks = state.picks.entry(key).or_default();
    picks.insert(choice.method(), choice.param());
    Ok(Json(json!({
        "image": req.image,
        "picks": picks,
        "complete": picks.len() == METHOD_COUNT,
    }))
    .into_response())
}

fn complete_picks(state: &Mutable, volunteer: &str, image: ImageId) -> ApiResult<BTreeMap<u32, u32>> {
    let picks = state
        .picks
        .get(&(volunteer.to_string(), image))
        .cloned()
        .unwrap_or_default();
    if picks.len() < METHOD_COUNT {
        let missing: Vec<u32> = (1..=METHOD_COUNT as u32).filter(|m| !picks.contains_key(m)).collect();
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("step 2 needs a step-1 pick for every method; missing methods {missing:?}"),
        ));
    }
    Ok(picks)
}

async fn get_finalists(
    State(svc): State<Shared>,
    Path((volunteer, image)): Path<(String, ImageId)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    svc.authorize(&headers, &volunteer)?;
    svc.check_assigned(&volunteer, image)?;
    let mut state = svc.state.lock().expect("state lock");
    svc.touch_session(&mut state, &volunteer)?;
    let picks = complete_picks(&state, &volunteer, image)?;
    drop(state);
    let files = &svc.images[&image];
    let finalists = picks
        .iter()
        .map(|(&method, &param)| {
            let choice = Choice::new(method, param).expect("validated");
            Ok(Tile {
                method,
                param,
                label: format!("{} {}", method_label(method), choice.setting_label()),
                url: svc.file_url(&files.candidates[&choice], || {
                    format!("candidate file {choice} of image {image}")
                })?,
            })
        })
        .collect::<ApiResult<Vec<_>>>()?;
    Ok(Json(json!({
        "image": image,
        "source": svc.file_url(&files.source, || format!("source file of image {image}"))?,
        "finalists": finalists,
    }))
    .into_response())
}

async fn post_vote(State(svc): State<Shared>, headers: HeaderMap, Json(req): Json<PickRequest>) -> ApiResult<Response> {
    svc.authorize(&headers, &req.volunteer)?;
    svc.check_assigned(&req.volunteer, req.image)?;
    let choice = validate_choice(req.method, req.param)?;
    let mut state = svc.state.lock().expect("state lock");
    let key = (req.volunteer.clone(), req.image);
    if let Some(&stored) = state.votes.get(&key) {
        return if stored == choice {
            Ok((StatusCode::OK, Json(json!({ "stored": false, "image": req.image, "method": stored.method(), "param": stored.param() }))).into_response())
        } else {
            Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("a different final vote ({stored}) is already recorded for image {}", req.image),
            ))
        };
    }
    svc.touch_session(&mut state, &req.volunteer)?;
    let picks = complete_picks(&state, &req.volunteer, req.image)?;
    if picks.get(&choice.method()) != Some(&choice.param()) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("{choice} is not among the step-1 picks for image {}", req.image),
        ));
    }
    let per_image = state.votes.keys().filter(|(_, t)| *t == req.image).count();
    if per_image >= svc.votes_per_image {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("image {} already has {per_image} votes", req.image),
        ));
    }
    let record = VoteRecord {
        image: req.image,
        volunteer: req.volunteer.clone(),
        method: choice.method(),
        param: choice.param(),
        timestamp_ms: svc.clock.now_ms(),
    };
    // Write-ahead: the record is durable before the vote is acknowledged.
    append_vote(&svc.vote_log, &record).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    state.votes.insert(key.clone(), choice);
    state.picks.remove(&key);
    log::info!("vote {} image {} {}", record.volunteer, record.image, choice);
    Ok((StatusCode::CREATED, Json(json!({ "stored": true, "image": req.image, "method": choice.method(), "param": choice.param() }))).into_response())
}

async fn get_progress(State(svc): State<Shared>) -> ApiResult<Response> {
    let votes = read_vote_log(&svc.vote_log).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let mut counts: BTreeMap<ImageId, usize> = svc.images.keys().map(|&t| (t, 0)).collect();
    for v in &votes {
        *counts.entry(v.image).or_default() += 1;
    }
    let required = svc.votes_per_image * svc.images.len();
    let total: usize = counts.values().map(|&n| n.min(svc.votes_per_image)).sum();
    let images: Vec<_> = counts
        .iter()
        .map(|(t, n)| json!({ "image": t, "votes": n, "required": svc.votes_per_image }))
        .collect();
    Ok(Json(json!({
        "images": images,
        "total_votes": votes.len(),
        "required_votes": required,
        "completion": if required == 0 { 0.0 } else { total as f64 / required as f64 },
    }))
    .into_response())
}

async fn get_instructions(State(svc): State<Shared>) -> Response {
    Json(json!({
        "instructions": INSTRUCTIONS,
        "session_minutes": svc.config.session_minutes,
    }))
    .into_response()
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/assignment/{volunteer}", get(get_assignment))
        .route("/images/{image}/grid/{method}", get(get_grid))
        .route("/static/{file}", get(get_static))
        .route("/picks", post(post_pick))
        .route("/finalists/{volunteer}/{image}", get(get_finalists))
        .route("/votes", post(post_vote))
        .route("/progress", get(get_progress))
        .route("/instructions", get(get_instructions))
        .with_state(service)
}

/// Serves until the process is stopped.
pub async fn serve(addr: std::net::SocketAddr, service: Arc<Service>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}

