//! HTTP/JSON front end for a loaded impact index.
//!
//! | method | path            | body                  | reply                 |
//! |--------|-----------------|-----------------------|-----------------------|
//! | GET    | `/health`       |                       | `Health`              |
//! | GET    | `/index`        |                       | `IndexInfo`           |
//! | POST   | `/search`       | `SearchRequest`       | `SearchResponse`      |
//! | POST   | `/search/batch` | `BatchSearchRequest`  | `BatchSearchResponse` |
//! | POST   | `/eval`         | `EvalRequest`         | `EvalResponse`        |
//!
//! Errors come back as `ErrorBody` with a 4xx/5xx status.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ck_core::api::{
    hits, BatchSearchRequest, BatchSearchResponse, ErrorBody, EvalRequest, EvalResponse, Health, IndexInfo,
    SearchRequest, SearchResponse,
};
use ck_core::checkpoint::Checkpoint;
use ck_core::index::SearchIndex;
use ck_core::trec::{self, Qrels};
use ck_core::{metrics, Config};

/// Largest `k` or batch a single request may ask for.
pub const MAX_K: usize = 10_000;
pub const MAX_BATCH: usize = 10_000;

/// Shared, read-only service state.
#[derive(Clone)]
pub struct AppState {
    pub index: Arc<SearchIndex>,
    pub qrels: Option<Arc<Qrels>>,
}

impl AppState {
    pub fn new(index: SearchIndex, qrels: Option<Qrels>) -> Self {
        Self {
            index: Arc::new(index),
            qrels: qrels.map(Arc::new),
        }
    }
}

/// Files the service starts from.
#[derive(Debug, Clone)]
pub struct ServiceFiles {
    pub index: PathBuf,
    /// When given, the index must have been built from this checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
}

pub fn load_state(files: &ServiceFiles) -> ck_core::Result<AppState> {
    let (hash, max_terms) = match &files.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (Some(ck.model_hash()), ck.model.config.max_query_terms)
        }
        None => (None, Config::default().max_query_terms),
    };
    let index = SearchIndex::load(&files.index, hash, max_terms)?;
    let qrels = files.qrels.as_deref().map(Qrels::load).transpose()?;
    Ok(AppState::new(index, qrels))
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self {
            status: r.status(),
            message: r.body_text(),
        }
    }
}

impl From<ck_core::Error> for ApiError {
    fn from(e: ck_core::Error) -> Self {
        Self::bad_request(e.to_string())
    }
}

fn check_k(k: usize) -> Result<(), ApiError> {
    if k == 0 || k > MAX_K {
        return Err(ApiError::bad_request(format!("k must be in 1..={MAX_K}")));
    }
    Ok(())
}

async fn health(State(st): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        documents: st.index.index.num_docs,
    })
}

async fn index_info(State(st): State<AppState>) -> Json<IndexInfo> {
    Json(IndexInfo::of(&st.index, st.qrels.is_some()))
}

async fn search(
    State(st): State<AppState>,
    body: Result<Json<SearchRequest>, JsonRejection>,
) -> Result<Json<SearchResponse>, ApiError> {
    let Json(req) = body?;
    check_k(req.k)?;
    Ok(Json(SearchResponse {
        hits: hits(st.index.search(&req.query, req.k)),
    }))
}

async fn search_batch(
    State(st): State<AppState>,
    body: Result<Json<BatchSearchRequest>, JsonRejection>,
) -> Result<Json<BatchSearchResponse>, ApiError> {
    let Json(req) = body?;
    check_k(req.k)?;
    if req.queries.len() > MAX_BATCH {
        return Err(ApiError::bad_request(format!("at most {MAX_BATCH} queries per batch")));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(q) = req.queries.iter().find(|q| !seen.insert(q.qid.as_str())) {
        return Err(ApiError::bad_request(format!("duplicate qid `{}`", q.qid)));
    }
    let queries: Vec<(String, String)> = req.queries.into_iter().map(|q| (q.qid, q.text)).collect();
    let run = tokio::task::spawn_blocking(move || st.index.search_all(&queries, req.k))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })?;
    Ok(Json(BatchSearchResponse::from_run(run)))
}

async fn eval(
    State(st): State<AppState>,
    body: Result<Json<EvalRequest>, JsonRejection>,
) -> Result<Json<EvalResponse>, ApiError> {
    let Json(req) = body?;
    trec::validate_run(&req.run)?;
    let run = trec::parse_run(&req.run)?;
    let report = match (&req.qrels, &st.qrels) {
        (Some(text), _) => metrics::evaluate(&run, &Qrels::parse(text)?),
        (None, Some(q)) => metrics::evaluate(&run, q),
        (None, None) => {
            return Err(ApiError::bad_request(
                "no qrels in the request and none loaded by the service",
            ))
        }
    };
    Ok(Json(report.into()))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/index", get(index_info))
        .route("/search", post(search))
        .route("/search/batch", post(search_batch))
        .route("/eval", post(eval))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr()?, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
