//! Access to the grounding model and the prompt meta-optimizer.
//!
//! Both speak a chat-completions JSON protocol over HTTP ([`http`]). The
//! pipeline only sees the [`Grounder`] and [`MetaOptimizer`] traits, so the
//! offline simulator in [`mock`] and request-capturing wrappers slot in
//! without touching orchestration code.

pub mod http;
pub mod mock;
pub mod parse;

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, ImageDims, TransformSpec};
use crate::viewgen::RasterImage;

pub use http::{ground, ChatClient, ChatMetaOptimizer, HttpGrounder};
pub use mock::{mock_ground, MockGrounder, MockNoise, ScriptedMeta};
pub use parse::{parse_detections, parse_improved_prompt, parse_init_variants};

pub const INIT_VARIANT_COUNT: usize = 5;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("model returned an empty completion")]
    ModelRefusal,
    #[error("could not parse model output ({message}); raw: {raw:?}")]
    Parse { message: String, raw: String },
    #[error("completion lacks <IMPROVED_PROMPT> tags; raw: {raw:?}")]
    TagMissing { raw: String },
    #[error("expected {expected} prompt variants, got {found}")]
    VariantCountMismatch { expected: usize, found: usize },
    #[error("image payload: {0}")]
    Image(String),
    #[error("unknown image {0:?}")]
    UnknownImage(String),
}

impl ClientError {
    pub(crate) fn parse(message: impl Into<String>, raw: &str) -> Self {
        ClientError::Parse {
            message: message.into(),
            raw: raw.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub label: String,
}

/// Boxes emitted by one model call on one view, in that view's pixel frame
/// until back-projected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    /// 0 is the reference (unperturbed) view.
    pub view_index: usize,
    #[serde(default)]
    pub raw_response: String,
    /// Boxes discarded because they had no positive area inside the frame.
    #[serde(default)]
    pub dropped: usize,
    /// Boxes that had to be clamped into the frame.
    #[serde(default)]
    pub clamped: usize,
}

impl DetectionSet {
    pub fn empty(view_index: usize) -> Self {
        Self {
            view_index,
            ..Self::default()
        }
    }

    pub fn from_boxes(boxes: impl IntoIterator<Item = BoundingBox>, view_index: usize) -> Self {
        Self {
            detections: boxes
                .into_iter()
                .map(|bbox| Detection {
                    bbox,
                    label: String::new(),
                })
                .collect(),
            view_index,
            ..Self::default()
        }
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.detections.iter().map(|d| d.bbox).collect()
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Coordinate convention of the model's emitted boxes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoordinateSpace {
    #[default]
    Pixel,
    /// Coordinates in `[0, scale]` relative to the view extent.
    Normalized { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
    pub top_p: Option<f64>,
    pub max_tokens: u32,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub coordinates: CoordinateSpace,
}

impl Default for ModelEndpoint {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model: String::new(),
            timeout_secs: 120.0,
            max_retries: 3,
            temperature: 0.0,
            top_p: None,
            max_tokens: 1024,
            api_key_env: Some("DDL_API_KEY".to_string()),
            coordinates: CoordinateSpace::Pixel,
        }
    }
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            ..Self::default()
        }
    }

    /// Decoding defaults for the meta-optimizer.
    pub fn meta(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            temperature: 0.7,
            top_p: Some(0.9),
            ..Self::new(base_url, model)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.base_url.trim().is_empty() {
            return Err("endpoint base URL is empty".into());
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(format!(
                "timeout must be positive, got {}",
                self.timeout_secs
            ));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaPromptKind {
    /// Seeds the population; generation 0 only.
    Init,
    Contrastive,
    Exploitative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Proposal {
    Variants(Vec<String>),
    Improved(String),
}

/// One grounding call: a view of an image plus the instruction.
#[derive(Debug, Clone)]
pub struct GroundRequest<'a> {
    pub image_id: &'a str,
    pub view_index: usize,
    /// Transform that produced this view. Real models never see it; the
    /// simulator uses it to place boxes.
    pub spec: TransformSpec,
    /// Extent of the view being sent.
    pub dims: ImageDims,
    /// Rendered view, present when the grounder asked for pixels.
    pub image: Option<&'a RasterImage>,
    pub prompt: &'a str,
    pub temperature: f64,
}

pub trait Grounder: Send + Sync {
    fn ground(&self, req: &GroundRequest<'_>) -> Result<DetectionSet, ClientError>;

    /// Whether requests must carry rendered pixels.
    fn needs_pixels(&self) -> bool {
        true
    }
}

pub trait MetaOptimizer: Send + Sync {
    fn propose(&self, kind: MetaPromptKind, context: &str) -> Result<Proposal, ClientError>;
}

/// What a [`CaptureGrounder`] records per call.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedRequest {
    pub image_id: String,
    pub view_index: usize,
    pub spec: TransformSpec,
    pub temperature: f64,
    pub prompt: String,
}

/// Records every request before delegating.
pub struct CaptureGrounder<G> {
    inner: G,
    log: Mutex<Vec<CapturedRequest>>,
}

impl<G: Grounder> CaptureGrounder<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<CapturedRequest> {
        self.log.lock().expect("capture log poisoned").clone()
    }

    pub fn clear(&self) {
        self.log.lock().expect("capture log poisoned").clear();
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

impl<G: Grounder> Grounder for CaptureGrounder<G> {
    fn ground(&self, req: &GroundRequest<'_>) -> Result<DetectionSet, ClientError> {
        self.log
            .lock()
            .expect("capture log poisoned")
            .push(CapturedRequest {
                image_id: req.image_id.to_string(),
                view_index: req.view_index,
                spec: req.spec,
                temperature: req.temperature,
                prompt: req.prompt.to_string(),
            });
        self.inner.ground(req)
    }

    fn needs_pixels(&self) -> bool {
        self.inner.needs_pixels()
    }
}

impl<T: Grounder + ?Sized> Grounder for &T {
    fn ground(&self, req: &GroundRequest<'_>) -> Result<DetectionSet, ClientError> {
        (**self).ground(req)
    }

    fn needs_pixels(&self) -> bool {
        (**self).needs_pixels()
    }
}

impl<T: MetaOptimizer + ?Sized> MetaOptimizer for &T {
    fn propose(&self, kind: MetaPromptKind, context: &str) -> Result<Proposal, ClientError> {
        (**self).propose(kind, context)
    }
}
