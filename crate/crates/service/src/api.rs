//! Routes and handlers.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use dinoiser_core::denoiser::pipeline::{
    segment_features, BackgroundSource, Pipeline, PipelineConfig, PoolingSource, TeacherSignals,
};
use dinoiser_core::featurizer::{is_background_prompt, DenseEncoder};
use dinoiser_core::palette;
use dinoiser_core::Error;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::rle::{self, Run};
use crate::session::Session;
use crate::state::{AppState, Model};

const OPENAPI: &str = include_str!("openapi.json");
const MAX_PROMPTS: usize = 256;

pub fn router(state: AppState) -> Router {
    let origin = match &state.config().cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => AllowOrigin::any(),
        },
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let limit = state.config().max_upload_bytes;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/spec", get(openapi))
        .route("/v1/sessions", post(create_session).layer(DefaultBodyLimit::max(limit)))
        .route("/v1/sessions/{id}/segment", post(segment))
        .layer(cors)
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) | Error::DegenerateInput(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn loaded(state: &AppState) -> Result<Arc<Model>, ApiError> {
    state
        .model()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model is still loading"))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub backbone_id: Option<String>,
    pub checkpoint_id: Option<String>,
    pub config_hash: String,
}

async fn health(State(state): State<AppState>) -> (StatusCode, Json<Health>) {
    let model = state.model();
    let status = if model.is_some() {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    let body = Health {
        status: if model.is_some() { "ok" } else { "loading" }.into(),
        backbone_id: model.as_ref().map(|m| m.backbone().backbone_id()),
        checkpoint_id: model.as_ref().and_then(|m| m.checkpoint_id().map(String::from)),
        config_hash: state.config_hash().to_string(),
    };
    (status, Json(body))
}

async fn openapi() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json")], OPENAPI)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridInfo {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub grid: GridInfo,
    pub width: u32,
    pub height: u32,
    pub timing_ms: f64,
}

fn new_session_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

async fn create_session(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let model = loaded(&state)?;
    if body.len() > state.config().max_upload_bytes {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "image exceeds the upload limit"));
    }
    let unsupported = |e: image::ImageError| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string());
    let format = image::guess_format(&body).map_err(unsupported)?;
    let image = image::load_from_memory_with_format(&body, format)
        .map_err(unsupported)?
        .to_rgb8();
    let start = Instant::now();
    let session = blocking(move || {
        let pipeline = Pipeline::new(model.backbone(), PipelineConfig::baseline());
        let (prepared, _) = pipeline.prepare(&image, None);
        let features = model.backbone().encode_exact(&prepared)?;
        let teacher_affinity = match model.teacher() {
            Some(t) => Some(t.affinity_for(&prepared, features.grid())?),
            None => None,
        };
        Ok(Session {
            id: new_session_id(),
            features,
            teacher_affinity,
            image_size: image.dimensions(),
            created_at: Instant::now(),
        })
    })
    .await?;
    let grid = session.features.grid();
    let (width, height) = session.image_size;
    let session = state.sessions().insert(session);
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: session.id.clone(),
            grid: GridInfo {
                rows: grid.n_rows,
                cols: grid.n_cols,
                patch_size: grid.patch_size,
            },
            width,
            height,
            timing_ms: start.elapsed().as_secs_f64() * 1e3,
        }),
    ))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub prompts: Vec<String>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    /// Reassign uncertain non-object patches to a `background` query.
    #[serde(default)]
    pub background: bool,
    /// Overrides the server's default pooling source.
    #[serde(default)]
    pub pooling: Option<PoolingSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub prompt: String,
    pub color: String,
    /// Fraction of patches labelled with this prompt.
    pub coverage: f64,
    pub mean_score: f64,
    pub max_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedConfig {
    pub gamma: f64,
    pub delta: f64,
    pub pooling: PoolingSource,
    pub background: BackgroundSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub session_id: String,
    pub grid: GridInfo,
    pub prompts: Vec<String>,
    /// True when the server added the `background` query itself.
    pub background_appended: bool,
    /// Row-major patch labels, indices into `prompts`.
    pub labels: Vec<Run>,
    pub scores: Vec<PromptSummary>,
    pub palette: Vec<String>,
    /// Patches reassigned to background.
    pub reassigned: usize,
    /// Indexed PNG at patch resolution (one pixel per patch).
    pub overlay_png_base64: String,
    pub config: AppliedConfig,
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Segment cached session features. No backbone pass happens here.
pub fn segment_session(
    model: &Model,
    defaults: &PipelineConfig,
    templates: dinoiser_core::templates::TemplateSet,
    session: &Session,
    req: &SegmentRequest,
) -> Result<SegmentResponse, ApiError> {
    let mut prompts: Vec<String> = req.prompts.iter().map(|p| p.trim().to_string()).collect();
    if prompts.is_empty() {
        return Err(ApiError::unprocessable("at least one prompt is required"));
    }
    if prompts.iter().any(|p| p.is_empty()) {
        return Err(ApiError::unprocessable("prompts must be non-empty strings"));
    }
    let mut background_appended = false;
    if req.background && !prompts.iter().any(|p| is_background_prompt(p)) {
        prompts.push("background".into());
        background_appended = true;
    }
    if prompts.len() > MAX_PROMPTS {
        return Err(ApiError::unprocessable(format!("at most {MAX_PROMPTS} prompts")));
    }
    let pooling = req.pooling.unwrap_or_else(|| model.default_pooling());
    if pooling == PoolingSource::Learned && model.heads().is_none() {
        return Err(ApiError::unprocessable("learned pooling needs a checkpoint"));
    }
    if pooling == PoolingSource::Teacher && session.teacher_affinity.is_none() {
        return Err(ApiError::unprocessable("teacher pooling needs a teacher backbone"));
    }
    let background = if req.background {
        if model.heads().is_none() {
            return Err(ApiError::unprocessable("background refinement needs a checkpoint"));
        }
        BackgroundSource::Learned
    } else {
        BackgroundSource::Off
    };
    let config = PipelineConfig {
        gamma: req.gamma.unwrap_or(defaults.gamma),
        delta: req.delta.unwrap_or(defaults.delta),
        pooling,
        background,
        normalize_before_pooling: defaults.normalize_before_pooling,
    };
    config.validate()?;
    let queries = model.queries(&prompts, templates)?;
    let signals = TeacherSignals {
        affinity: session.teacher_affinity.clone(),
        objectness: None,
    };
    let result = segment_features(&session.features, model.heads(), &signals, &queries, &config)?;
    let grid = result.grid();
    let colors: Vec<String> = palette::palette(prompts.len()).into_iter().map(hex).collect();
    let coverage = result.coverage();
    let scores = result.scores();
    let summaries = prompts
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let col = scores.column(k);
            PromptSummary {
                prompt: p.clone(),
                color: colors[k].clone(),
                coverage: coverage[k],
                mean_score: col.sum() / col.len() as f64,
                max_score: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let label_grid = Array2::from_shape_fn((grid.n_rows, grid.n_cols), |(r, c)| {
        result.labels()[grid.index(r, c)] as u32
    });
    let png = palette::indexed_png(&label_grid, prompts.len())?;
    Ok(SegmentResponse {
        session_id: session.id.clone(),
        grid: GridInfo {
            rows: grid.n_rows,
            cols: grid.n_cols,
            patch_size: grid.patch_size,
        },
        background_appended,
        labels: rle::encode(result.labels()),
        scores: summaries,
        palette: colors,
        reassigned: result.overridden().iter().filter(|&&o| o).count(),
        overlay_png_base64: base64::engine::general_purpose::STANDARD.encode(png),
        config: AppliedConfig {
            gamma: config.gamma,
            delta: config.delta,
            pooling: config.pooling,
            background: config.background,
        },
        prompts,
    })
}

async fn segment(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<SegmentRequest>,
) -> Result<Json<SegmentResponse>, ApiError> {
    let model = loaded(&state)?;
    let session = state
        .sessions()
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no live session `{id}`")))?;
    let defaults = state.config().pipeline;
    let templates = state.config().template_set;
    let resp = blocking(move || segment_session(&model, &defaults, templates, &session, &req)).await?;
    Ok(Json(resp))
}
