//! HTTP adapters speaking a generic JSON contract. Each backend kind is one
//! POST endpoint; vendor-specific mapping belongs in a proxy in front of it.
//!
//! | kind       | request body                                   | response body                         |
//! |------------|------------------------------------------------|---------------------------------------|
//! | model      | `BackendRequest`                               | `{text, usage:{input_tokens,output_tokens}}` |
//! | segmenter  | `{image, prompt}`                              | `{width, height, rle}`                |
//! | scorer     | `{image, box_2d, label}`                       | `{logit}`                             |
//! | captioner  | `{image, prompt}`                              | `{caption}`                           |
//! | detector   | `{image, prompt, scale}`                       | `{boxes:[[y0,x0,y1,x1], ...]}`         |
//! | embedder   | `{text}`                                       | `{embedding:[...]}`                   |

use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendRequest, BackendResponse, ModelBackend, Usage, VerifierScorer};
use crate::context::{Captioner, CoarseDetector};
use crate::error::BackendError;
use crate::geometry::{BinaryMask, BoundingBox, ImageRef, MaskRecord};
use crate::guidelines::Embedder;
use crate::protocol::{SegmenterPrompt, Segmenter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    /// Name of the environment variable holding a bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
}

fn default_timeout() -> u64 {
    60
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key_env: None,
            timeout_s: default_timeout(),
        }
    }
}

/// Blocking JSON-over-HTTP client for one endpoint.
#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    config: EndpointConfig,
    agent: ureq::Agent,
}

impl HttpEndpoint {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn token(&self) -> Result<Option<String>, BackendError> {
        match &self.config.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::Unavailable(format!("environment variable {var} is not set"))),
        }
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, body: &B) -> Result<T, BackendError> {
        let mut req = self.agent.post(&self.config.url);
        if let Some(token) = self.token()? {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Malformed(format!("{e}: {text}")))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteModel(pub HttpEndpoint);

#[derive(Deserialize)]
struct ModelReply {
    text: String,
    #[serde(default)]
    usage: Usage,
}

impl ModelBackend for RemoteModel {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let started = Instant::now();
        let reply: ModelReply = self.0.post(request)?;
        Ok(BackendResponse {
            text: reply.text,
            usage: reply.usage,
            latency_ms: Some(started.elapsed().as_millis() as u64),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RemoteSegmenter(pub HttpEndpoint);

impl Segmenter for RemoteSegmenter {
    fn segment(&self, image: &ImageRef, prompt: &SegmenterPrompt) -> Result<BinaryMask, BackendError> {
        let record: MaskRecord = self.0.post(&json!({"image": image, "prompt": prompt}))?;
        if record.width != image.width || record.height != image.height {
            return Err(BackendError::Malformed(format!(
                "mask is {}x{}, image is {}x{}",
                record.width, record.height, image.width, image.height
            )));
        }
        BinaryMask::try_from(record).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteScorer(pub HttpEndpoint);

#[derive(Deserialize)]
struct LogitReply {
    logit: f64,
}

impl VerifierScorer for RemoteScorer {
    fn score(&self, image: &ImageRef, crop: &BoundingBox, label: &str) -> Result<f64, BackendError> {
        let r: LogitReply = self.0.post(&json!({"image": image, "box_2d": crop, "label": label}))?;
        if !r.logit.is_finite() {
            return Err(BackendError::Malformed("non-finite logit".into()));
        }
        Ok(r.logit)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteCaptioner(pub HttpEndpoint);

#[derive(Deserialize)]
struct CaptionReply {
    caption: String,
}

impl Captioner for RemoteCaptioner {
    fn caption(&self, image: &ImageRef, prompt: &str) -> Result<String, BackendError> {
        let r: CaptionReply = self.0.post(&json!({"image": image, "prompt": prompt}))?;
        Ok(r.caption)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteDetector(pub HttpEndpoint);

#[derive(Deserialize)]
struct BoxesReply {
    boxes: Vec<[f64; 4]>,
}

impl CoarseDetector for RemoteDetector {
    fn detect(&self, image: &ImageRef, prompt: &str, scale: f64) -> Result<Vec<BoundingBox>, BackendError> {
        let r: BoxesReply = self.0.post(&json!({"image": image, "prompt": prompt, "scale": scale}))?;
        let w = (image.width as f64 * scale).round() as u32;
        let h = (image.height as f64 * scale).round() as u32;
        Ok(r
            .boxes
            .into_iter()
            .filter_map(|b| BoundingBox::from_f64_clipped(b, w, h))
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    pub endpoint: HttpEndpoint,
    pub tag: String,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    embedding: Vec<f64>,
}

impl Embedder for RemoteEmbedder {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let r: EmbeddingReply = self.endpoint.post(&json!({"text": text}))?;
        Ok(r.embedding)
    }
}
