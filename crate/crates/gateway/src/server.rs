//! JSON-over-HTTP service for the annotation and editing console.
//!
//! Reads run against immutable catalog snapshots. Label and part mutations
//! go through a single writer that saves the catalog to disk before the new
//! snapshot is published, so every successful response is already persisted.

use std::collections::BTreeSet;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ganlocal_core::editor::{edit, evaluate_locality, EditError, EditMode, EditRequest, StyleSource};
use ganlocal_core::metrics::diff_map;
use ganlocal_core::minigen::{build_generator, Generator, GeneratorConfig};
use ganlocal_core::ndio::resample_membership;
use ganlocal_core::semantics::{manifest_digest, save_catalog, SemanticCatalog, SemanticsError, SCHEMA_VERSION};
use ganlocal_core::RgbImage;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use tokio::sync::Mutex;

use crate::commands::{edit_params, q_summary};
use crate::error_code;
use crate::project::Project;

/// Overlay colors for clusters, cycled when K exceeds 15 (Kelly's
/// maximally contrasting set without white and black).
pub const PALETTE: [[u8; 3]; 15] = [
    [0xF3, 0xC3, 0x00],
    [0x87, 0x56, 0x92],
    [0xF3, 0x84, 0x00],
    [0xA1, 0xCA, 0xF1],
    [0xBE, 0x00, 0x32],
    [0xC2, 0xB2, 0x80],
    [0x84, 0x84, 0x82],
    [0x00, 0x88, 0x56],
    [0xE6, 0x8F, 0xAC],
    [0x00, 0x67, 0xA5],
    [0xF9, 0x93, 0x79],
    [0x60, 0x4E, 0x97],
    [0xF6, 0xA6, 0x00],
    [0xB3, 0x44, 0x6C],
    [0xDC, 0xD3, 0x00],
];

pub struct AppState {
    project: Project,
    generator: Generator,
    catalog: RwLock<Arc<SemanticCatalog>>,
    writer: Mutex<()>,
}

impl AppState {
    pub fn load(project: Project) -> anyhow::Result<Self> {
        let catalog = project.load_catalog()?;
        Ok(Self::new(project, catalog))
    }

    pub fn new(project: Project, catalog: SemanticCatalog) -> Self {
        let generator = build_generator(GeneratorConfig::new(catalog.provenance.generator_seed));
        Self {
            project,
            generator,
            catalog: RwLock::new(Arc::new(catalog)),
            writer: Mutex::new(()),
        }
    }

    fn snapshot(&self) -> Arc<SemanticCatalog> {
        self.catalog.read().expect("catalog lock").clone()
    }

    /// Apply a mutation under the writer lock, persist, then publish.
    async fn mutate<T>(
        &self,
        f: impl FnOnce(&SemanticCatalog) -> Result<(SemanticCatalog, T), ApiError>,
    ) -> Result<T, ApiError> {
        let _guard = self.writer.lock().await;
        let (next, value) = f(&self.snapshot())?;
        save_catalog(&next, &self.project.catalog_dir()).map_err(ApiError::internal)?;
        *self.catalog.write().expect("catalog lock") = Arc::new(next);
        Ok(value)
    }
}

pub type SharedState = Arc<AppState>;

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/samples", get(samples))
        .route("/api/samples/{id}/image", get(sample_image))
        .route("/api/samples/{id}/membership", get(sample_membership))
        .route("/api/catalog", get(catalog))
        .route("/api/catalog/labels", put(put_label))
        .route("/api/catalog/parts", post(post_part))
        .route("/api/edit", post(post_edit))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    fields: Map<String, Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            fields: Map::new(),
        }
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        let mut e = Self::new(StatusCode::BAD_REQUEST, "validation", format!("{field}: {message}"));
        e.fields.insert(field.to_string(), Value::String(message));
        e
    }

    fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    fn internal(e: impl Into<anyhow::Error>) -> Self {
        let e = e.into();
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, error_code(&e), format!("{e:#}"))
    }
}

impl From<SemanticsError> for ApiError {
    fn from(e: SemanticsError) -> Self {
        match e {
            SemanticsError::UnknownPart(_) => Self::not_found("unknown_part", e.to_string()),
            SemanticsError::UnknownCluster(_) => Self::not_found("unknown_cluster", e.to_string()),
            SemanticsError::AlreadyAssigned(_) => Self::new(StatusCode::CONFLICT, "already_assigned", e.to_string()),
            SemanticsError::EmptyMerge => Self::field("cluster_ids", "must not be empty"),
            other => Self::internal(other),
        }
    }
}

impl From<EditError> for ApiError {
    fn from(e: EditError) -> Self {
        match e {
            EditError::InvalidParams { field, message } => Self::field(field, message),
            EditError::UnknownPart(_) => Self::not_found("unknown_part", e.to_string()),
            EditError::MissingLayerAttribution(_) => Self::field("layers", e.to_string()),
            other => Self::internal(other),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_json", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": { "code": self.code, "message": self.message, "fields": self.fields }
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn health(State(state): State<SharedState>) -> Json<Value> {
    let cat = state.snapshot();
    Json(json!({
        "status": "ok",
        "k": cat.k,
        "parts": cat.parts.len(),
        "samples": cat.provenance.sample_count,
    }))
}

fn catalog_json(state: &AppState, cat: &SemanticCatalog) -> Value {
    let layers: Vec<Value> = state
        .generator
        .plan()
        .iter()
        .enumerate()
        .map(|(l, s)| json!({ "id": l, "resolution": s.resolution, "channels": s.channels }))
        .collect();
    json!({
        "schema_version": SCHEMA_VERSION,
        "base_layer_id": cat.base_layer_id,
        "k": cat.k,
        "clusters": cat.clusters,
        "parts": cat.parts,
        "provenance": cat.provenance,
        "layers": layers,
        "palette": PALETTE.iter().map(|c| format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])).collect::<Vec<_>>(),
        "manifest_sha256": manifest_digest(&state.project.catalog_dir()).ok(),
    })
}

async fn catalog(State(state): State<SharedState>) -> Json<Value> {
    Json(catalog_json(&state, &state.snapshot()))
}

#[derive(Deserialize)]
struct Page {
    offset: Option<usize>,
    limit: Option<usize>,
}

fn render_sample(state: &AppState, cat: &SemanticCatalog, id: usize) -> ApiResult<RgbImage> {
    if id >= cat.provenance.sample_count {
        return Err(ApiError::not_found("unknown_sample", format!("no sample {id}")));
    }
    Ok(state.generator.render_seed(id as u64, &BTreeSet::new()).image)
}

async fn samples(State(state): State<SharedState>, Query(page): Query<Page>) -> ApiResult<Json<Value>> {
    let cat = state.snapshot();
    let total = cat.provenance.sample_count;
    let offset = page.offset.unwrap_or(0);
    let limit = page.limit.unwrap_or(50);
    if limit == 0 || limit > 500 {
        return Err(ApiError::field("limit", "must lie in 1..=500"));
    }
    let end = (offset + limit).min(total);
    let items = tokio::task::spawn_blocking(move || {
        (offset.min(end)..end)
            .map(|id| {
                let img = state.generator.render_seed(id as u64, &BTreeSet::new()).image;
                json!({ "id": id, "seed": id, "thumbnail_png_base64": BASE64.encode(img.to_png()) })
            })
            .collect::<Vec<_>>()
    })
    .await
    .map_err(ApiError::internal)?;
    Ok(Json(
        json!({ "total": total, "offset": offset, "limit": limit, "items": items }),
    ))
}

async fn sample_image(State(state): State<SharedState>, Path(id): Path<usize>) -> ApiResult<Response> {
    let cat = state.snapshot();
    Ok(png_response(render_sample(&state, &cat, id)?.to_png()))
}

#[derive(Deserialize)]
struct LayerQuery {
    layer: Option<usize>,
}

/// Image blended half-and-half with the palette color of each pixel's cluster.
async fn sample_membership(
    State(state): State<SharedState>,
    Path(id): Path<usize>,
    Query(q): Query<LayerQuery>,
) -> ApiResult<Response> {
    let cat = state.snapshot();
    let image = render_sample(&state, &cat, id)?;
    let layer = q.layer.unwrap_or(cat.base_layer_id);
    let res = state
        .generator
        .plan()
        .get(layer)
        .ok_or_else(|| ApiError::field("layer", format!("no layer {layer}")))?
        .resolution;
    let u = cat.membership.tensor.sample(id);
    let u = ganlocal_core::ndio::MembershipTensor { tensor: u, hard: true };
    let labels = resample_membership(&u, res, res).argmax();
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let cluster = labels[(y * res / h) * res + x * res / w];
            let color = PALETTE[cluster % PALETTE.len()];
            let px = image.pixel(y, x);
            out.set_pixel(
                y,
                x,
                std::array::from_fn(|c| 0.5 * px[c] + 0.5 * color[c] as f32 / 255.0),
            );
        }
    }
    Ok(png_response(out.to_png()))
}

#[derive(Deserialize)]
struct LabelBody {
    cluster_id: usize,
    label: String,
}

async fn put_label(
    State(state): State<SharedState>,
    body: Result<Json<LabelBody>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(body) = body?;
    if body.label.trim().is_empty() {
        return Err(ApiError::field("label", "must not be empty"));
    }
    let cluster = state
        .mutate(|cat| {
            let next = cat.set_label(body.cluster_id, &body.label)?;
            let entry = next.clusters[body.cluster_id].clone();
            Ok((next, entry))
        })
        .await?;
    Ok(Json(json!(cluster)))
}

#[derive(Deserialize)]
struct PartBody {
    label: String,
    cluster_ids: Vec<usize>,
}

async fn post_part(
    State(state): State<SharedState>,
    body: Result<Json<PartBody>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(body) = body?;
    if body.label.trim().is_empty() {
        return Err(ApiError::field("label", "must not be empty"));
    }
    let part = state
        .mutate(|cat| {
            let next = cat.merge_clusters(&body.cluster_ids, &body.label)?;
            let part = next.parts.last().cloned().expect("merge adds a part");
            Ok((next, part))
        })
        .await?;
    Ok((StatusCode::CREATED, Json(json!(part))))
}

#[derive(Deserialize)]
struct EditBody {
    target: u64,
    reference: u64,
    part_id: usize,
    mode: String,
    lambda: Option<f64>,
    epsilon: Option<f64>,
    rho_ratio: Option<f64>,
    layers: Option<BTreeSet<usize>>,
}

async fn post_edit(
    State(state): State<SharedState>,
    body: Result<Json<EditBody>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(body) = body?;
    let mode: EditMode = body.mode.parse().map_err(|e: String| ApiError::field("mode", e))?;
    let params = edit_params(mode, body.lambda, body.epsilon, body.rho_ratio)
        .map_err(|(field, message)| ApiError::field(field, message))?;
    let cat = state.snapshot();
    let request = EditRequest {
        target: StyleSource::Seed(body.target),
        reference: StyleSource::Seed(body.reference),
        part_id: body.part_id,
        params,
        layers: body.layers,
    };
    tokio::task::spawn_blocking(move || -> ApiResult<Json<Value>> {
        let outcome = edit(&request, &cat, &state.generator)?;
        let (_, locality) = evaluate_locality(&outcome, &cat, request.part_id)?;
        let (diff_png, diff_max) = diff_map(&outcome.target.image, &outcome.edited.image)
            .map_err(ApiError::internal)?
            .to_png();
        let summary = q_summary(&cat, request.part_id, &outcome.queries).map_err(ApiError::internal)?;
        Ok(Json(json!({
            "edited_png_base64": BASE64.encode(outcome.edited.image.to_png()),
            "target_png_base64": BASE64.encode(outcome.target.image.to_png()),
            "reference_png_base64": BASE64.encode(outcome.reference.image.to_png()),
            "diff_png_base64": BASE64.encode(diff_png),
            "diff_max": diff_max,
            "locality": locality,
            "q_summary": summary,
        })))
    })
    .await
    .map_err(ApiError::internal)?
}

pub async fn serve(state: SharedState, host: &str, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
