//! HTTP API over a [`ReviewStore`]. Request and response bodies are JSON;
//! the routes are documented in `docs/api.md`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use biomarker_core::review::{
    Consensus, ConsensusRecord, CuratorRuling, Decision, DescriptionSet, ReviewSession, ReviewStore, Stage,
};
use biomarker_core::Error;
use serde::{Deserialize, Serialize};

/// Where reveal images and attribution maps live on disk.
#[derive(Debug, Clone)]
pub struct Assets {
    pub images_dir: PathBuf,
    pub maps_dir: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Bearer token required for curator adjudication; open when unset.
    pub curator_token: Option<String>,
}

pub struct AppState {
    store: Mutex<ReviewStore>,
    assets: Assets,
    config: ServerConfig,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    pub fn new(store: ReviewStore, assets: Assets, config: ServerConfig) -> SharedState {
        Arc::new(Self {
            store: Mutex::new(store),
            assets,
            config,
        })
    }

    fn store(&self) -> std::sync::MutexGuard<'_, ReviewStore> {
        // A panic mid-request cannot leave the store half-written: mutations
        // commit only after their log line is durable.
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::NotFound(_) | Error::MissingStep { .. } => (StatusCode::NOT_FOUND, "not_found"),
            Error::Protocol(_) => (StatusCode::CONFLICT, "protocol"),
            Error::Invalid(_) | Error::Shape { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{}", self.0);
        }
        let body = ErrorBody {
            error: kind.into(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub cluster: usize,
    pub label: String,
    pub n_images: usize,
    pub reveal_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub team_id: String,
    pub round: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterView {
    pub cluster: usize,
    pub label: String,
    pub stage: Stage,
    pub initial: Vec<ImageRef>,
    pub submitted: Option<DescriptionSet>,
    pub validation: Vec<ImageRef>,
    pub decision: Option<Decision>,
    pub final_descriptions: Option<DescriptionSet>,
    pub archived: Vec<DescriptionSet>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub team_id: String,
    pub round: String,
    pub seed: u64,
    pub cluster_order: Vec<usize>,
    pub next_cluster: Option<usize>,
    pub complete: bool,
    pub clusters: Vec<ClusterView>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ImageRef {
    pub image_id: String,
    pub image_url: String,
    pub attribution_url: String,
    pub overlay_url: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RevealView {
    pub cluster: usize,
    pub stage: Stage,
    pub images: Vec<ImageRef>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StageView {
    pub cluster: usize,
    pub stage: Stage,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FinalView {
    pub cluster: usize,
    pub stage: Stage,
    pub final_descriptions: DescriptionSet,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Dashboard {
    pub round: String,
    pub records: Vec<ConsensusRecord>,
    pub agree: Vec<usize>,
    pub disagree: Vec<usize>,
    pub heterogeneous: Vec<usize>,
    pub pending: Vec<usize>,
}

fn label(cluster: usize) -> String {
    format!("C{}", cluster + 1)
}

fn image_ref(id: &str) -> ImageRef {
    ImageRef {
        image_id: id.to_owned(),
        image_url: format!("/api/images/{id}"),
        attribution_url: format!("/api/attributions/{id}"),
        overlay_url: format!("/api/overlays/{id}"),
    }
}

fn session_view(s: &ReviewSession) -> SessionView {
    SessionView {
        session_id: s.session_id.clone(),
        team_id: s.team_id.clone(),
        round: s.round.clone(),
        seed: s.seed,
        cluster_order: s.cluster_order.clone(),
        next_cluster: s.next_cluster(),
        complete: s.is_complete(),
        clusters: s
            .clusters
            .iter()
            .map(|c| ClusterView {
                cluster: c.cluster,
                label: label(c.cluster),
                stage: c.stage,
                initial: c.initial.iter().map(|i| image_ref(i)).collect(),
                submitted: c.submitted.clone(),
                validation: c.validation.iter().map(|i| image_ref(i)).collect(),
                decision: c.decision.clone(),
                final_descriptions: c.final_descriptions.clone(),
                archived: c.archived.clone(),
            })
            .collect(),
    }
}

fn dashboard(round: &str, records: Vec<ConsensusRecord>) -> Dashboard {
    let pick = |k: Consensus| records.iter().filter(|r| r.consensus == k).map(|r| r.cluster).collect();
    Dashboard {
        round: round.to_owned(),
        agree: pick(Consensus::Agree),
        disagree: pick(Consensus::Disagree),
        heterogeneous: pick(Consensus::Heterogeneous),
        pending: pick(Consensus::Pending),
        records,
    }
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/api/health", get(|| async { "ok" }))
        .route("/api/clusters", get(clusters))
        .route("/api/clusters/{cluster}/cross-reference", get(cross_reference))
        .route("/api/sessions", get(list_sessions).post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/next", get(next_cluster))
        .route("/api/sessions/{id}/events", get(events))
        .route("/api/sessions/{id}/clusters/{cluster}", get(get_cluster))
        .route("/api/sessions/{id}/clusters/{cluster}/reveal-initial", post(reveal_initial))
        .route("/api/sessions/{id}/clusters/{cluster}/descriptions", post(submit_descriptions))
        .route("/api/sessions/{id}/clusters/{cluster}/reveal-validation", post(reveal_validation))
        .route("/api/sessions/{id}/clusters/{cluster}/finalize", post(finalize))
        .route("/api/rounds/{round}/consensus", get(consensus))
        .route("/api/rounds/{round}/adjudications", post(adjudicate))
        .route("/api/images/{id}", get(image))
        .route("/api/attributions/{id}", get(attribution))
        .route("/api/overlays/{id}", get(overlay))
        .with_state(state)
}

async fn clusters(State(st): State<SharedState>) -> ApiResult<Vec<ClusterInfo>> {
    let store = st.store();
    let cat = store.catalog();
    Ok(Json(
        (0..cat.k())
            .map(|c| ClusterInfo {
                cluster: c,
                label: label(c),
                n_images: cat.clusters[c].len(),
                reveal_size: cat.reveal_size(c),
            })
            .collect(),
    ))
}

async fn cross_reference(
    State(st): State<SharedState>,
    Path(cluster): Path<usize>,
) -> ApiResult<biomarker_core::review::CrossReference> {
    Ok(Json(st.store().cross_reference(cluster)?))
}

async fn list_sessions(State(st): State<SharedState>) -> ApiResult<Vec<SessionView>> {
    Ok(Json(st.store().sessions().map(session_view).collect()))
}

async fn create_session(
    State(st): State<SharedState>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let mut store = st.store();
    let s = store.create_session(&req.team_id, &req.round, req.seed)?;
    Ok((StatusCode::CREATED, Json(session_view(s))))
}

async fn get_session(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<SessionView> {
    Ok(Json(session_view(st.store().session(&id)?)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextCluster {
    pub cluster: Option<usize>,
    pub stage: Option<Stage>,
}

async fn next_cluster(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<NextCluster> {
    let store = st.store();
    let s = store.session(&id)?;
    let cluster = s.next_cluster();
    Ok(Json(NextCluster {
        cluster,
        stage: cluster.map(|c| s.clusters[c].stage),
    }))
}

async fn events(
    State(st): State<SharedState>,
    Path(id): Path<String>,
) -> ApiResult<Vec<biomarker_core::review::ReviewEvent>> {
    Ok(Json(st.store().session(&id)?.events.clone()))
}

async fn get_cluster(State(st): State<SharedState>, Path((id, cluster)): Path<(String, usize)>) -> ApiResult<ClusterView> {
    let store = st.store();
    let s = store.session(&id)?;
    s.cluster(cluster)?;
    let view = session_view(s).clusters.swap_remove(cluster);
    Ok(Json(view))
}

fn stage_of(store: &ReviewStore, id: &str, cluster: usize) -> Result<Stage, Error> {
    Ok(store.session(id)?.cluster(cluster)?.stage)
}

async fn reveal_initial(
    State(st): State<SharedState>,
    Path((id, cluster)): Path<(String, usize)>,
) -> ApiResult<RevealView> {
    let mut store = st.store();
    let ids = store.reveal_initial(&id, cluster)?;
    Ok(Json(RevealView {
        cluster,
        stage: stage_of(&store, &id, cluster)?,
        images: ids.iter().map(|i| image_ref(i)).collect(),
    }))
}

async fn submit_descriptions(
    State(st): State<SharedState>,
    Path((id, cluster)): Path<(String, usize)>,
    Json(d): Json<DescriptionSet>,
) -> ApiResult<StageView> {
    let mut store = st.store();
    store.submit_descriptions(&id, cluster, d)?;
    Ok(Json(StageView {
        cluster,
        stage: stage_of(&store, &id, cluster)?,
    }))
}

async fn reveal_validation(
    State(st): State<SharedState>,
    Path((id, cluster)): Path<(String, usize)>,
) -> ApiResult<RevealView> {
    let mut store = st.store();
    let ids = store.reveal_validation(&id, cluster)?;
    Ok(Json(RevealView {
        cluster,
        stage: stage_of(&store, &id, cluster)?,
        images: ids.iter().map(|i| image_ref(i)).collect(),
    }))
}

async fn finalize(
    State(st): State<SharedState>,
    Path((id, cluster)): Path<(String, usize)>,
    Json(decision): Json<Decision>,
) -> ApiResult<FinalView> {
    let mut store = st.store();
    let final_descriptions = store.finalize(&id, cluster, decision)?;
    Ok(Json(FinalView {
        cluster,
        stage: stage_of(&store, &id, cluster)?,
        final_descriptions,
    }))
}

async fn consensus(State(st): State<SharedState>, Path(round): Path<String>) -> ApiResult<Dashboard> {
    let records = st.store().consensus(&round)?;
    Ok(Json(dashboard(&round, records)))
}

async fn adjudicate(
    State(st): State<SharedState>,
    Path(round): Path<String>,
    headers: HeaderMap,
    Json(ruling): Json<CuratorRuling>,
) -> Result<Json<Dashboard>, Response> {
    if let Some(token) = &st.config.curator_token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            let body = ErrorBody {
                error: "forbidden".into(),
                message: "adjudication requires the curator token".into(),
            };
            return Err((StatusCode::FORBIDDEN, Json(body)).into_response());
        }
    }
    let records = st.store().rule(&round, ruling).map_err(|e| ApiError(e).into_response())?;
    Ok(Json(dashboard(&round, records)))
}

fn png(st: &AppState, id: &str, path: PathBuf) -> Result<Response, ApiError> {
    let known = st.store().catalog().clusters.iter().flatten().any(|m| m.image_id == id);
    if !known {
        return Err(Error::NotFound(format!("image {id}")).into());
    }
    let bytes = std::fs::read(&path).map_err(|_| Error::NotFound(format!("{} for image {id}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn image(State(st): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let p = st.assets.images_dir.join(format!("{id}.png"));
    png(&st, &id, p)
}

async fn attribution(State(st): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let p = st.assets.maps_dir.join(format!("{id}.attr.png"));
    png(&st, &id, p)
}

async fn overlay(State(st): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let p = st.assets.maps_dir.join(format!("{id}.overlay.png"));
    png(&st, &id, p)
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: SharedState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
