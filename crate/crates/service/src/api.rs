//! HTTP API. Rasters travel as base64-encoded PNG inside JSON bodies.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use sketchmod::pipeline::{sample_with, Components, SampleOptions, SamplerConfig};
use sketchmod::raster::Raster;
use sketchmod::sketch::{derive_masks_with, EncoderConfig, LabelQuery};
use sketchmod::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>, field: Option<&str>) -> Self {
        ApiError {
            code: "invalid_request".into(),
            message: message.into(),
            field: field.map(str::to_string),
            status: 400,
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError {
            code: "component_failure".into(),
            message: message.into(),
            field: None,
            status: 500,
        }
    }

    fn geometry(message: impl Into<String>, field: Option<&str>) -> Self {
        ApiError {
            code: "geometry".into(),
            message: message.into(),
            field: field.map(str::to_string),
            status: 422,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Geometry(m) => ApiError::geometry(m, None),
            Error::Input(m) => ApiError::bad_request(m, None),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    pub components: Arc<Components>,
}

pub fn router(components: Arc<Components>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/config", get(config))
        .route("/v1/generate", post(generate))
        .route("/v1/masks", post(masks))
        .with_state(AppState { components })
}

pub fn encode_png(r: &Raster) -> Result<String, Error> {
    Ok(STANDARD.encode(r.to_png_bytes()?))
}

pub fn decode_png(b64: &str, field: &str) -> ApiResult<Raster> {
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request(format!("{field} is not valid base64: {e}"), Some(field)))?;
    Raster::from_png_bytes(&bytes).map_err(|e| ApiError::bad_request(format!("{field} is not a PNG: {e}"), Some(field)))
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("body is not JSON: {e}"), None))?;
    if !value.is_object() {
        return Err(ApiError::bad_request("body must be a JSON object", None));
    }
    serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|f| f.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
            .map(str::to_string);
        ApiError {
            field,
            ..ApiError::bad_request(msg, None)
        }
    })
}

/// Sketch rasters must cover the encoder grid.
fn check_sketch_geometry(components: &Components, sketch: &Raster) -> ApiResult<()> {
    let g = components.config.encoder.grid;
    if sketch.width < g || sketch.height < g {
        return Err(ApiError::geometry(
            format!(
                "sketch {}x{} is smaller than the {g}x{g} encoder grid",
                sketch.width, sketch.height
            ),
            Some("sketch"),
        ));
    }
    Ok(())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn config(State(state): State<AppState>) -> Json<serde_json::Value> {
    let c = &state.components;
    Json(json!({
        "config": c.config,
        "modnet_parameter_count": c.modnet.parameter_count(),
        "probe_layers": c.config.probe.layers().iter().map(|l| &l.id).collect::<Vec<_>>(),
        "latent_shape": c.backbone.latent_shape(),
        "image_size": c.backbone.image_size(),
    }))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub sketch: String,
    pub caption: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub inference_steps: Option<usize>,
    #[serde(default)]
    pub modulated_fraction: Option<f64>,
    #[serde(default)]
    pub return_overlays: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub t: usize,
    pub modulated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlayPayload {
    pub masks: BTreeMap<String, String>,
    pub attention: BTreeMap<String, String>,
    pub scale_map: String,
    pub shift_map: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub step_trace: Vec<TraceEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlays: Option<OverlayPayload>,
}

async fn generate(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<GenerateResponse>> {
    let req: GenerateRequest = parse_body(&body)?;
    let c = state.components.clone();
    if req.caption.trim().is_empty() {
        return Err(ApiError::bad_request("caption must not be empty", Some("caption")));
    }
    let sampler = SamplerConfig {
        inference_steps: req.inference_steps.unwrap_or(c.config.sampler.inference_steps),
        modulated_fraction: req.modulated_fraction.unwrap_or(c.config.sampler.modulated_fraction),
        seed: req.seed,
    };
    let total = c.backbone.schedule().total_steps();
    if sampler.inference_steps == 0 || sampler.inference_steps > total {
        return Err(ApiError::bad_request(
            format!("inference_steps must lie in 1..={total}"),
            Some("inference_steps"),
        ));
    }
    let f = sampler.modulated_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(ApiError::bad_request(
            "modulated_fraction must lie in (0, 1]",
            Some("modulated_fraction"),
        ));
    }
    let sketch = decode_png(&req.sketch, "sketch")?;
    check_sketch_geometry(&c, &sketch)?;
    let options = SampleOptions {
        overlays: req.return_overlays,
        ..Default::default()
    };
    let caption = req.caption.clone();
    let out = tokio::task::spawn_blocking(move || -> Result<GenerateResponse, Error> {
        let out = sample_with(&sketch, &caption, &sampler, &c, options)?;
        let overlays = match &out.overlays {
            Some(o) => Some(OverlayPayload {
                masks: o
                    .masks
                    .iter()
                    .map(|(k, r)| Ok((k.clone(), encode_png(r)?)))
                    .collect::<Result<_, Error>>()?,
                attention: o
                    .attention
                    .iter()
                    .map(|(k, r)| Ok((k.clone(), encode_png(r)?)))
                    .collect::<Result<_, Error>>()?,
                scale_map: encode_png(&o.scale_map)?,
                shift_map: encode_png(&o.shift_map)?,
            }),
            None => None,
        };
        Ok(GenerateResponse {
            image: encode_png(&out.image)?,
            width: out.image.width,
            height: out.image.height,
            step_trace: out
                .trace
                .iter()
                .map(|s| TraceEntry {
                    step: s.step_index,
                    t: s.t,
                    modulated: s.modulated,
                })
                .collect(),
            overlays,
        })
    })
    .await
    .map_err(|e| ApiError::internal(format!("generation task failed: {e}")))??;
    Ok(Json(out))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasksRequest {
    pub sketch: String,
    pub labels: Vec<String>,
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskPayload {
    pub label: String,
    pub token_index: usize,
    pub count: usize,
    pub bits: Vec<u8>,
    pub mask: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MasksResponse {
    pub height: usize,
    pub width: usize,
    pub threshold: f64,
    pub source: String,
    pub masks: Vec<MaskPayload>,
}

/// Masks for a free label list; label `i` is reported as token `i`.
async fn masks(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<MasksResponse>> {
    let req: MasksRequest = parse_body(&body)?;
    let c = state.components.clone();
    if req.labels.is_empty() {
        return Err(ApiError::bad_request("labels must not be empty", Some("labels")));
    }
    if req.labels.iter().any(|l| l.trim().is_empty()) {
        return Err(ApiError::bad_request(
            "labels must be non-empty strings",
            Some("labels"),
        ));
    }
    let threshold = req.threshold.unwrap_or(c.config.masks.threshold);
    if !(threshold > -1.0 && threshold < 1.0) {
        return Err(ApiError::bad_request(
            "threshold must lie in (-1, 1)",
            Some("threshold"),
        ));
    }
    let sketch = decode_png(&req.sketch, "sketch")?;
    check_sketch_geometry(&c, &sketch)?;
    let labels = req.labels.clone();
    let resp = tokio::task::spawn_blocking(move || -> Result<MasksResponse, Error> {
        let queries = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(LabelQuery {
                    token_index: i,
                    label: l.clone(),
                    embedding: c.backbone.label_embedding(l)?,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let cfg = EncoderConfig {
            frozen_reference: true,
            ..c.encoder_config()
        };
        let grid = c.encoder.encode_sketch(&sketch, &cfg)?;
        let set = derive_masks_with(c.config.execution, &grid, &queries, threshold)?;
        let (_, h, w) = grid.shape();
        let masks = set
            .masks
            .iter()
            .map(|(&tok, m)| {
                let r = Raster::new(m.width, m.height, 1, m.bits.iter().map(|&b| b as f64).collect())?;
                Ok(MaskPayload {
                    label: set.token_labels.get(&tok).cloned().unwrap_or_default(),
                    token_index: tok,
                    count: m.count(),
                    bits: m.bits.clone(),
                    mask: encode_png(&r)?,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(MasksResponse {
            height: h,
            width: w,
            threshold,
            source: "encoder_similarity".into(),
            masks,
        })
    })
    .await
    .map_err(|e| ApiError::internal(format!("mask task failed: {e}")))??;
    Ok(Json(resp))
}
