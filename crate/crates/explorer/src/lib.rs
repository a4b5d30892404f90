//! Read-only JSON service over a finished run: concept reports, served
//! images, classification and on-demand latent manipulation.
//!
//! Every response body, errors included, carries the run's config
//! fingerprint. Images travel as base64-encoded PNG.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ctraj_core::classifier::Classifier;
use ctraj_core::concepts::{concept_montage, ConceptReport};
use ctraj_core::data::{class_name, Split};
use ctraj_core::image_io::{decode_png, encode_png};
use ctraj_core::vae::Vae;
use ctraj_core::Tensor;
use serde::{Deserialize, Serialize};

pub struct ServedImage {
    pub id: String,
    pub split: Split,
    pub class: usize,
    pub image: Tensor<f32>,
}

pub struct ExplorerState {
    classifier: Classifier<f32>,
    vae: Vae<f32>,
    reports: BTreeMap<usize, ConceptReport>,
    images: Vec<ServedImage>,
    index: BTreeMap<String, usize>,
    fingerprint: String,
}

impl ExplorerState {
    pub fn new(
        classifier: Classifier<f32>,
        vae: Vae<f32>,
        reports: BTreeMap<usize, ConceptReport>,
        images: Vec<ServedImage>,
        fingerprint: String,
    ) -> ctraj_core::Result<Self> {
        if classifier.image_size() != vae.image_size() {
            return Err(ctraj_core::Error::ShapeMismatch(format!(
                "classifier takes {} px images, VAE {} px",
                classifier.image_size(),
                vae.image_size()
            )));
        }
        let index = images.iter().enumerate().map(|(i, im)| (im.id.clone(), i)).collect();
        Ok(ExplorerState { classifier, vae, reports, images, index, fingerprint })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub fingerprint: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    fingerprint: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code.into(), message: self.message, fingerprint: self.fingerprint };
        (self.status, Json(body)).into_response()
    }
}

impl ExplorerState {
    fn error(&self, status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError { status, code, message: message.into(), fingerprint: self.fingerprint.clone() }
    }

    fn bad_request(&self, code: &'static str, message: impl Into<String>) -> ApiError {
        self.error(StatusCode::BAD_REQUEST, code, message)
    }

    fn internal(&self, e: impl std::fmt::Display) -> ApiError {
        self.error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub index: usize,
    pub name: String,
    pub has_report: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassesResponse {
    pub fingerprint: String,
    pub latent_dim: usize,
    pub image_size: usize,
    pub classes: Vec<ClassInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub fingerprint: String,
    pub report: ConceptReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub class: usize,
    pub png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagesResponse {
    pub fingerprint: String,
    pub split: String,
    pub images: Vec<ImageInfo>,
}

/// Either `image_id` or `image` (base64 PNG) must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulationRequest {
    #[serde(default)]
    pub image_id: Option<String>,
    #[serde(default)]
    pub image: Option<String>,
    pub dimension: usize,
    pub direction: f64,
    pub target_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelProbabilities {
    pub original: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub manipulated: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationResponse {
    pub fingerprint: String,
    pub dimension: usize,
    pub direction: f64,
    /// Value of the dimension in the encoded latent.
    pub encoded_value: f64,
    pub target_class: usize,
    pub original: String,
    pub reconstruction: String,
    pub manipulated: String,
    pub probabilities: PanelProbabilities,
    /// Target-class probability of the manipulated panel minus that of the
    /// reconstruction.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub fingerprint: String,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
}

#[derive(Debug, Deserialize)]
struct ImagesQuery {
    split: Option<String>,
}

type Shared = Arc<ExplorerState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/classes", get(classes))
        .route("/report/{class}", get(report))
        .route("/images", get(images))
        .route("/manipulate", post(manipulate))
        .route("/classify", post(classify))
        .with_state(state)
}

pub async fn serve(addr: &str, state: Shared) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("explorer listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn png_b64(img: &Tensor<f32>) -> ctraj_core::Result<String> {
    Ok(B64.encode(encode_png(img)?))
}

async fn classes(State(s): State<Shared>) -> Json<ClassesResponse> {
    let classes = (0..s.classifier.num_classes())
        .map(|i| ClassInfo { index: i, name: class_name(i).to_string(), has_report: s.reports.contains_key(&i) })
        .collect();
    Json(ClassesResponse {
        fingerprint: s.fingerprint.clone(),
        latent_dim: s.vae.latent_dim(),
        image_size: s.vae.image_size(),
        classes,
    })
}

/// Accepts a class index or a class name.
async fn report(State(s): State<Shared>, Path(class): Path<String>) -> Result<Json<ReportResponse>, ApiError> {
    let idx = class
        .parse::<usize>()
        .ok()
        .or_else(|| (0..s.classifier.num_classes()).find(|&i| class_name(i).eq_ignore_ascii_case(&class)));
    match idx.and_then(|i| s.reports.get(&i)) {
        Some(r) => Ok(Json(ReportResponse { fingerprint: s.fingerprint.clone(), report: r.clone() })),
        None => Err(s.error(StatusCode::NOT_FOUND, "not_found", format!("no concept report for class `{class}`"))),
    }
}

async fn images(State(s): State<Shared>, Query(q): Query<ImagesQuery>) -> Result<Json<ImagesResponse>, ApiError> {
    let name = q.split.unwrap_or_else(|| "test".into());
    let split: Split = name.parse().map_err(|e: ctraj_core::Error| s.bad_request("bad_split", e.to_string()))?;
    let state = s.clone();
    tokio::task::spawn_blocking(move || {
        let images = state
            .images
            .iter()
            .filter(|im| im.split == split)
            .map(|im| Ok(ImageInfo { id: im.id.clone(), class: im.class, png: png_b64(&im.image)? }))
            .collect::<ctraj_core::Result<Vec<_>>>()
            .map_err(|e| state.internal(e))?;
        Ok(Json(ImagesResponse { fingerprint: state.fingerprint.clone(), split: name, images }))
    })
    .await
    .map_err(|e| s.internal(e))?
}

fn parse_body<T: for<'de> Deserialize<'de>>(s: &ExplorerState, body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| s.bad_request("bad_request", format!("malformed request body: {e}")))
}

fn decode_upload(s: &ExplorerState, b64: &str) -> Result<Tensor<f32>, ApiError> {
    let bytes = B64.decode(b64.trim()).map_err(|e| s.bad_request("bad_image", format!("image is not valid base64: {e}")))?;
    let img: Tensor<f32> = decode_png(&bytes).map_err(|e| s.bad_request("bad_image", e.to_string()))?;
    let size = s.vae.image_size();
    if img.shape() != [3, size, size] {
        return Err(s.bad_request("bad_image", format!("expected a {size}x{size} RGB image, got shape {:?}", img.shape())));
    }
    Ok(img)
}

fn probs(s: &ExplorerState, img: &Tensor<f32>) -> Result<Vec<f64>, ApiError> {
    let p = s.classifier.predict_one(img).map_err(|e| s.internal(e))?;
    Ok(p.into_iter().map(f64::from).collect())
}

impl ExplorerState {
    pub fn manipulate(&self, req: &ManipulationRequest) -> Result<ManipulationResponse, ApiError> {
        let m = self.vae.latent_dim();
        if req.dimension >= m {
            return Err(self.bad_request("dimension_out_of_range", format!("dimension {} out of range (m = {m})", req.dimension)));
        }
        if !req.direction.is_finite() {
            return Err(self.bad_request("bad_direction", "direction must be finite"));
        }
        if req.target_class >= self.classifier.num_classes() {
            return Err(self.bad_request("bad_target", format!("target class {} out of range", req.target_class)));
        }
        let image = match (&req.image_id, &req.image) {
            (Some(id), None) => match self.index.get(id) {
                Some(&i) => self.images[i].image.clone(),
                None => return Err(self.error(StatusCode::NOT_FOUND, "not_found", format!("unknown image id `{id}`"))),
            },
            (None, Some(b64)) => decode_upload(self, b64)?,
            _ => return Err(self.bad_request("bad_request", "give exactly one of image_id and image")),
        };
        let size = self.vae.image_size();
        let latent = self.vae.encode(&image.clone().reshape(&[1, 3, size, size]).map_err(|e| self.internal(e))?).map_err(|e| self.internal(e))?;
        let encoded_value = latent.data()[req.dimension] as f64;
        let [orig, recon, manip] = concept_montage(&self.vae, &image, req.dimension, req.direction).map_err(|e| self.internal(e))?;
        let probabilities =
            PanelProbabilities { original: probs(self, &orig)?, reconstruction: probs(self, &recon)?, manipulated: probs(self, &manip)? };
        let delta = probabilities.manipulated[req.target_class] - probabilities.reconstruction[req.target_class];
        let enc = |t: &Tensor<f32>| png_b64(t).map_err(|e| self.internal(e));
        Ok(ManipulationResponse {
            fingerprint: self.fingerprint.clone(),
            dimension: req.dimension,
            direction: req.direction,
            encoded_value,
            target_class: req.target_class,
            original: enc(&orig)?,
            reconstruction: enc(&recon)?,
            manipulated: enc(&manip)?,
            probabilities,
            delta,
        })
    }

    pub fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, ApiError> {
        let img = decode_upload(self, &req.image)?;
        let p = probs(self, &img)?;
        let predicted_class = p.iter().enumerate().fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
        Ok(ClassifyResponse { fingerprint: self.fingerprint.clone(), probabilities: p, predicted_class })
    }
}

async fn manipulate(State(s): State<Shared>, body: Bytes) -> Result<Json<ManipulationResponse>, ApiError> {
    let req: ManipulationRequest = parse_body(&s, &body)?;
    let state = s.clone();
    tokio::task::spawn_blocking(move || state.manipulate(&req).map(Json)).await.map_err(|e| s.internal(e))?
}

async fn classify(State(s): State<Shared>, body: Bytes) -> Result<Json<ClassifyResponse>, ApiError> {
    let req: ClassifyRequest = parse_body(&s, &body)?;
    let state = s.clone();
    tokio::task::spawn_blocking(move || state.classify(&req).map(Json)).await.map_err(|e| s.internal(e))?
}
