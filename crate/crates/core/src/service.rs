//! HTTP API over a database snapshot store: query, confirm, create, plus
//! browse endpoints and an optional static bundle.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::imageio::{decode_image, encode_png};
use crate::net::Model;
use crate::retrieval::{rank_individuals, valid_id, DatabaseStore, EmbeddingDatabase, RetrievalError};
use crate::synth::{image_path, pgm, ImageSample};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Root holding `images/<individual>/<image>.pgm`.
    pub images_dir: PathBuf,
    pub pending_dir: PathBuf,
    pub pending_ttl: Duration,
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub rank: usize,
    pub individual_id: String,
    pub image_id: String,
    pub distance: f64,
    /// URL of the candidate image.
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query_token: String,
    pub db_version: u64,
    pub k: usize,
    pub candidates: Vec<CandidateView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PendingMeta {
    created_at: u64,
    response: QueryResponse,
}

#[derive(Debug, Clone)]
struct Pending {
    meta: PendingMeta,
    image: ImageSample,
}

pub struct AppState {
    pub model: Arc<Model>,
    pub store: Arc<DatabaseStore>,
    config: ServiceConfig,
    pending: Mutex<HashMap<String, Pending>>,
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl AppState {
    /// Fails when the database was built with a different checkpoint.
    /// Unexpired pending queries left on disk are reloaded.
    pub fn new(
        model: Model,
        db: EmbeddingDatabase,
        db_path: Option<PathBuf>,
        config: ServiceConfig,
    ) -> Result<Self, ServiceError> {
        if db.fingerprint() != model.fingerprint {
            return Err(RetrievalError::FingerprintMismatch {
                database: db.fingerprint(),
                model: model.fingerprint,
            }
            .into());
        }
        if db.embedding_dim() != model.embedding_dim() {
            return Err(RetrievalError::Dimension {
                expected: db.embedding_dim(),
                got: model.embedding_dim(),
            }
            .into());
        }
        std::fs::create_dir_all(&config.pending_dir).map_err(io_err(&config.pending_dir))?;
        let state = Self {
            model: Arc::new(model),
            store: Arc::new(DatabaseStore::new(db, db_path)),
            pending: Mutex::new(HashMap::new()),
            config,
        };
        state.reload_pending();
        Ok(state)
    }

    fn reload_pending(&self) {
        let Ok(entries) = std::fs::read_dir(&self.config.pending_dir) else {
            return;
        };
        let mut map = self.pending.lock().unwrap_or_else(|p| p.into_inner());
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Some(token) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
                continue;
            };
            let meta: Option<PendingMeta> = std::fs::read(&path).ok().and_then(|b| serde_json::from_slice(&b).ok());
            let img = pgm::read(&path.with_extension("pgm")).ok();
            if let (Some(meta), Some((width, height, pixels))) = (meta, img) {
                let image = ImageSample {
                    individual_id: String::new(),
                    image_id: String::new(),
                    height,
                    width,
                    pixels,
                };
                map.insert(token, Pending { meta, image });
            }
        }
        drop(map);
        self.purge_expired();
    }

    fn expired(&self, p: &Pending) -> bool {
        now_secs().saturating_sub(p.meta.created_at) >= self.config.pending_ttl.as_secs()
    }

    fn purge_expired(&self) {
        let mut map = self.pending.lock().unwrap_or_else(|p| p.into_inner());
        let dead: Vec<String> = map.iter().filter(|(_, p)| self.expired(p)).map(|(k, _)| k.clone()).collect();
        for t in dead {
            map.remove(&t);
            self.remove_pending_files(&t);
        }
    }

    fn remove_pending_files(&self, token: &str) {
        let base = self.config.pending_dir.join(token);
        let _ = std::fs::remove_file(base.with_extension("json"));
        let _ = std::fs::remove_file(base.with_extension("pgm"));
    }

    fn pending(&self, token: &str) -> Result<Pending, ApiError> {
        let map = self.pending.lock().unwrap_or_else(|p| p.into_inner());
        let p = map
            .get(token)
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown query token {token}")))?;
        if self.expired(&p) {
            return Err(ApiError(StatusCode::GONE, format!("query token {token} expired; query again")));
        }
        Ok(p)
    }

    /// Ranks `image` against the current snapshot and parks it as pending.
    pub fn query(&self, image: &ImageSample, k: usize) -> Result<QueryResponse, ApiError> {
        if k == 0 {
            return Err(ApiError(StatusCode::BAD_REQUEST, "k must be >= 1".into()));
        }
        let snap = self.store.snapshot();
        let vector = self.model.embed_one(image).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
        let candidates = rank_individuals(&snap.db, &vector, k)?
            .into_iter()
            .map(|c| CandidateView {
                thumbnail: format!("/api/image/{}", c.image_id),
                rank: c.rank,
                individual_id: c.individual_id,
                image_id: c.image_id,
                distance: c.distance,
            })
            .collect();
        let token = uuid::Uuid::new_v4().simple().to_string();
        let response = QueryResponse {
            query_token: token.clone(),
            db_version: snap.version,
            k,
            candidates,
        };
        let meta = PendingMeta {
            created_at: now_secs(),
            response: response.clone(),
        };
        let base = self.config.pending_dir.join(&token);
        let pgm_path = base.with_extension("pgm");
        pgm::write(&pgm_path, image.width, image.height, &image.pixels)
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        let json_path = base.with_extension("json");
        std::fs::write(&json_path, serde_json::to_vec(&meta).expect("pending meta serializes"))
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", json_path.display())))?;
        self.purge_expired();
        self.pending
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(token, Pending {
                meta,
                image: image.clone(),
            });
        Ok(response)
    }

    pub fn stored_query(&self, token: &str) -> Result<QueryResponse, ApiError> {
        Ok(self.pending(token)?.meta.response)
    }

    /// Adds the pending image to `individual_id` (existing, or new when
    /// `create`). The image file and the database are both on disk before
    /// this returns.
    pub fn resolve(&self, token: &str, individual_id: &str, create: bool) -> Result<(ResolvedRecord, u64), ApiError> {
        if !valid_id(individual_id) {
            return Err(RetrievalError::InvalidId(individual_id.into()).into());
        }
        let p = self.pending(token)?;
        let image_id = format!("q-{token}");
        let image = ImageSample {
            individual_id: individual_id.into(),
            image_id: image_id.clone(),
            ..p.image
        };
        let added_at = now_secs();
        let images_dir = self.config.images_dir.clone();
        let (_, snap) = self.store.update(|db| {
            let i = db.confirm_identity(&self.model, &image, individual_id, create, added_at)?;
            let path = image_path(&images_dir, individual_id, &image_id);
            let io = |e| RetrievalError::Io {
                path: path.clone(),
                source: e,
            };
            std::fs::create_dir_all(path.parent().expect("image path has a parent")).map_err(io)?;
            std::fs::write(&path, image.to_pgm()).map_err(io)?;
            Ok(i)
        })?;
        self.pending.lock().unwrap_or_else(|p| p.into_inner()).remove(token);
        self.remove_pending_files(token);
        Ok((
            ResolvedRecord {
                individual_id: individual_id.into(),
                image_id,
                added_at,
            },
            snap.version,
        ))
    }

    fn image_png(&self, image_id: &str) -> Result<Vec<u8>, ApiError> {
        let snap = self.store.snapshot();
        let i = snap
            .db
            .find_image(image_id)
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown image {image_id}")))?;
        let rec = &snap.db.records()[i];
        let path = image_path(&self.config.images_dir, &rec.individual_id, &rec.image_id);
        let (width, height, pixels) =
            pgm::read(&path).map_err(|e| ApiError(StatusCode::NOT_FOUND, e.to_string()))?;
        Ok(encode_png(&ImageSample {
            individual_id: rec.individual_id.clone(),
            image_id: rec.image_id.clone(),
            height,
            width,
            pixels,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRecord {
    pub individual_id: String,
    pub image_id: String,
    pub added_at: u64,
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        let status = match &e {
            RetrievalError::UnknownIndividual(_) => StatusCode::NOT_FOUND,
            RetrievalError::DuplicateIndividual(_) | RetrievalError::DuplicateImage(_) => StatusCode::CONFLICT,
            RetrievalError::InvalidId(_) | RetrievalError::ZeroK | RetrievalError::Dimension { .. } => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(e.status(), e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn health(State(s): State<Shared>) -> Json<serde_json::Value> {
    let snap = s.store.snapshot();
    Json(serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "db_version": snap.version,
        "record_count": snap.db.len(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualSummary {
    pub individual_id: String,
    pub image_count: usize,
}

async fn list_individuals(State(s): State<Shared>) -> Json<Vec<IndividualSummary>> {
    Json(
        s.store
            .snapshot()
            .db
            .individuals()
            .into_iter()
            .map(|(individual_id, image_count)| IndividualSummary {
                individual_id,
                image_count,
            })
            .collect(),
    )
}

async fn get_image(State(s): State<Shared>, UrlPath(image_id): UrlPath<String>) -> Result<Response, ApiError> {
    let png = blocking(move || s.image_png(&image_id)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn post_query(State(s): State<Shared>, mut form: Multipart) -> Result<Json<QueryResponse>, ApiError> {
    let bad = |m: String| ApiError(StatusCode::BAD_REQUEST, m);
    let mut bytes = None;
    let mut k = DEFAULT_K;
    while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
        match field.name() {
            Some("image") => bytes = Some(field.bytes().await.map_err(|e| bad(e.to_string()))?),
            Some("k") => {
                let t = field.text().await.map_err(|e| bad(e.to_string()))?;
                k = t.trim().parse().map_err(|_| bad(format!("k: {t:?} is not a positive integer")))?;
            }
            _ => {}
        }
    }
    let bytes = bytes.ok_or_else(|| bad("missing multipart field `image`".into()))?;
    let image = decode_image(&bytes, "", "query").map_err(|e| bad(e.to_string()))?;
    Ok(Json(blocking(move || s.query(&image, k)).await?))
}

async fn get_query(State(s): State<Shared>, UrlPath(token): UrlPath<String>) -> Result<Json<QueryResponse>, ApiError> {
    Ok(Json(s.stored_query(&token)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfirmBody {
    query_token: String,
    individual_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConfirmResponse {
    pub new_record: ResolvedRecord,
    pub db_version: u64,
}

async fn post_confirm(
    State(s): State<Shared>,
    body: Result<Json<ConfirmBody>, JsonRejection>,
) -> Result<Json<ConfirmResponse>, ApiError> {
    let Json(b) = body?;
    let (new_record, db_version) = blocking(move || s.resolve(&b.query_token, &b.individual_id, false)).await?;
    Ok(Json(ConfirmResponse { new_record, db_version }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    query_token: String,
    new_individual_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub individual_id: String,
    pub db_version: u64,
}

async fn post_individual(
    State(s): State<Shared>,
    body: Result<Json<CreateBody>, JsonRejection>,
) -> Result<Json<CreateResponse>, ApiError> {
    let Json(b) = body?;
    let (rec, db_version) = blocking(move || s.resolve(&b.query_token, &b.new_individual_id, true)).await?;
    Ok(Json(CreateResponse {
        individual_id: rec.individual_id,
        db_version,
    }))
}

pub fn router(state: Shared) -> Router {
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/individuals", get(list_individuals).post(post_individual))
        .route("/api/image/{image_id}", get(get_image))
        .route("/api/query", post(post_query))
        .route("/api/query/{token}", get(get_query))
        .route("/api/confirm", post(post_confirm))
        .layer(DefaultBodyLimit::max(16 << 20))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until Ctrl-C.
pub async fn serve(state: Shared, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
