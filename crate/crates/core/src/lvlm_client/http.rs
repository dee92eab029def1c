//! Blocking chat-completions client (`POST {base}/v1/chat/completions`).

use std::thread;
use std::time::Duration;

use base64::Engine;
use log::{debug, warn};
use serde::Serialize;
use serde_json::{json, Value};

use super::parse::{parse_detections, parse_improved_prompt, parse_init_variants};
use super::{
    ClientError, DetectionSet, GroundRequest, Grounder, MetaOptimizer, MetaPromptKind,
    ModelEndpoint, Proposal,
};
use crate::viewgen::RasterImage;

const COMPLETIONS_PATH: &str = "/v1/chat/completions";

#[derive(Debug, Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<Value>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_p: Option<f64>,
}

/// One endpoint plus a pooled HTTP client. Cheap to share across threads.
#[derive(Debug, Clone)]
pub struct ChatClient {
    endpoint: ModelEndpoint,
    http: reqwest::blocking::Client,
    backoff: Duration,
}

impl ChatClient {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, ClientError> {
        endpoint.validate().map_err(ClientError::Transport)?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint,
            http,
            backoff: Duration::from_millis(250),
        })
    }

    /// Base delay of the exponential retry schedule.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    fn url(&self) -> String {
        let base = self.endpoint.base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        format!("{base}{COMPLETIONS_PATH}")
    }

    fn token(&self) -> Option<String> {
        let var = self.endpoint.api_key_env.as_deref()?;
        std::env::var(var).ok().filter(|t| !t.is_empty())
    }

    /// Send one user turn and return the assistant text.
    pub fn complete(&self, content: Value, temperature: f64) -> Result<String, ClientError> {
        let body = ChatBody {
            model: &self.endpoint.model,
            messages: vec![json!({ "role": "user", "content": content })],
            temperature,
            max_tokens: self.endpoint.max_tokens,
            top_p: self.endpoint.top_p,
        };
        let url = self.url();
        let token = self.token();
        let mut attempt = 0u32;
        loop {
            match self.send_once(&url, token.as_deref(), &body) {
                Ok(text) => return Ok(text),
                Err(SendError::Fatal(e)) => return Err(e),
                Err(SendError::Transient(msg)) if attempt < self.endpoint.max_retries => {
                    let delay = self.backoff * 2u32.saturating_pow(attempt);
                    warn!(
                        "request to {url} failed ({msg}); retry {} in {delay:?}",
                        attempt + 1
                    );
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(SendError::Transient(msg)) => {
                    return Err(ClientError::Transport(format!(
                        "{msg} (after {} retries)",
                        self.endpoint.max_retries
                    )))
                }
            }
        }
    }

    fn send_once(
        &self,
        url: &str,
        token: Option<&str>,
        body: &ChatBody<'_>,
    ) -> Result<String, SendError> {
        let mut req = self.http.post(url).json(body);
        if let Some(token) = token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| SendError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| SendError::Transient(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(SendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(SendError::Fatal(ClientError::Transport(format!(
                "HTTP {status}: {text}"
            ))));
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| {
            SendError::Fatal(ClientError::parse(
                format!("response is not JSON: {e}"),
                &text,
            ))
        })?;
        let content = completion_text(&value)
            .ok_or_else(|| SendError::Fatal(ClientError::parse("no choices[0].message", &text)))?;
        if content.trim().is_empty() {
            return Err(SendError::Fatal(ClientError::ModelRefusal));
        }
        debug!("completion: {} chars", content.len());
        Ok(content)
    }
}

enum SendError {
    Transient(String),
    Fatal(ClientError),
}

/// `choices[0].message.content`, as a string or as a list of text parts.
fn completion_text(response: &Value) -> Option<String> {
    let content = response
        .get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        Value::Null => Some(String::new()),
        _ => None,
    }
}

fn image_part(image: &RasterImage) -> Result<Value, ClientError> {
    let png = image
        .encode_png()
        .map_err(|e| ClientError::Image(e.to_string()))?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
    Ok(json!({
        "type": "image_url",
        "image_url": { "url": format!("data:image/png;base64,{b64}") }
    }))
}

/// Send `image` and `prompt` as one vision turn and parse the boxes.
pub fn ground(
    client: &ChatClient,
    image: &RasterImage,
    prompt: &str,
    temperature: f64,
) -> Result<DetectionSet, ClientError> {
    let content = json!([image_part(image)?, { "type": "text", "text": prompt }]);
    let raw = client.complete(content, temperature)?;
    parse_detections(&raw, image.dims(), client.endpoint.coordinates)
}

/// [`Grounder`] backed by a remote vision model.
#[derive(Debug, Clone)]
pub struct HttpGrounder {
    client: ChatClient,
}

impl HttpGrounder {
    pub fn new(client: ChatClient) -> Self {
        Self { client }
    }
}

impl Grounder for HttpGrounder {
    fn ground(&self, req: &GroundRequest<'_>) -> Result<DetectionSet, ClientError> {
        let image = req
            .image
            .ok_or_else(|| ClientError::Image(format!("no pixels for {}", req.image_id)))?;
        let mut set = ground(&self.client, image, req.prompt, req.temperature)?;
        set.view_index = req.view_index;
        Ok(set)
    }
}

/// [`MetaOptimizer`] backed by a text-only chat model.
#[derive(Debug, Clone)]
pub struct ChatMetaOptimizer {
    client: ChatClient,
}

impl ChatMetaOptimizer {
    pub fn new(client: ChatClient) -> Self {
        Self { client }
    }
}

impl MetaOptimizer for ChatMetaOptimizer {
    fn propose(&self, kind: MetaPromptKind, context: &str) -> Result<Proposal, ClientError> {
        let temperature = self.client.endpoint.temperature;
        let raw = self
            .client
            .complete(Value::String(context.to_string()), temperature)?;
        match kind {
            MetaPromptKind::Init => parse_init_variants(&raw).map(Proposal::Variants),
            MetaPromptKind::Contrastive | MetaPromptKind::Exploitative => {
                parse_improved_prompt(&raw).map(Proposal::Improved)
            }
        }
    }
}
