//! Model backend contracts.
//!
//! Three capabilities are needed: text completion, image generation, and
//! image analysis. Each has a seeded offline mock ([`mock`]) and an
//! HTTP implementation with retry and timeout handling ([`remote`]).

pub mod fault;
pub mod mock;
pub mod remote;

use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What a text request is for. Remote backends ignore it; the mock uses it
/// to pick a response grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    NarrateScene,
    ExtractScene,
    PlotTwists,
    Summarize,
    ImagePrompt,
    FullStory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f32,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            max_tokens: 2048,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRequest {
    pub task: Task,
    pub system: String,
    pub prompt: String,
    pub params: DecodingParams,
}

impl TextRequest {
    pub fn new(task: Task, system: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            task,
            system: system.into(),
            prompt: prompt.into(),
            params: DecodingParams::default(),
        }
    }
}

/// Opaque reference to a generated or uploaded image: a path relative to
/// the project directory, or a URL.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualDescription {
    pub appearance: String,
    pub clothing: String,
    pub key_features: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider rejected the request with status {status}: {body}")]
    NonRetryable { status: u16, body: String },
    #[error("could not parse vision response: {0}")]
    UnparsableVisionResponse(String),
    #[error("could not parse provider response: {0}")]
    BadResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
}

pub trait TextBackend: Send + Sync {
    fn complete_text(&self, request: &TextRequest) -> Result<String, BackendError>;
}

pub trait ImageBackend: Send + Sync {
    fn generate_image(&self, prompt: &str, style: &str) -> Result<ImageRef, BackendError>;
}

pub trait VisionBackend: Send + Sync {
    fn analyze_image(&self, image: &ImageRef) -> Result<VisualDescription, BackendError>;
}

/// The three backend handles a story session needs.
#[derive(Clone)]
pub struct Backends {
    pub text: Arc<dyn TextBackend>,
    pub image: Arc<dyn ImageBackend>,
    pub vision: Arc<dyn VisionBackend>,
}

impl Backends {
    /// Seeded offline backends. Placeholder images are written under
    /// `image_dir` when given.
    pub fn mock(seed: u64, image_dir: Option<std::path::PathBuf>) -> Self {
        let world = mock::MockWorld::new(seed);
        Self {
            text: Arc::new(world.text()),
            image: Arc::new(world.image(image_dir)),
            vision: Arc::new(world.vision()),
        }
    }

    pub fn with_text(mut self, text: Arc<dyn TextBackend>) -> Self {
        self.text = text;
        self
    }
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Backends { .. }")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Remote,
}

/// Connection settings for one backend. Credentials are never stored here,
/// only the name of the environment variable that holds them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> u64 {
    500
}

impl BackendConfig {
    pub fn mock(seed: u64) -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: String::new(),
            model: String::new(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs > 0.0) {
            return Err(BackendError::InvalidRequest(
                "timeout_secs must be positive".into(),
            ));
        }
        if self.kind == BackendKind::Remote && self.endpoint.trim().is_empty() {
            return Err(BackendError::InvalidRequest(
                "remote backend needs an endpoint".into(),
            ));
        }
        Ok(())
    }
}

/// Settings for all three capabilities; each may point at a different
/// provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSettings {
    pub text: BackendConfig,
    pub image: BackendConfig,
    pub vision: BackendConfig,
}

impl BackendSettings {
    pub fn mock(seed: u64) -> Self {
        Self {
            text: BackendConfig::mock(seed),
            image: BackendConfig::mock(seed),
            vision: BackendConfig::mock(seed),
        }
    }

    /// Builds the handles. Mock images go to `image_dir`.
    pub fn build(&self, image_dir: Option<std::path::PathBuf>) -> Result<Backends, BackendError> {
        for cfg in [&self.text, &self.image, &self.vision] {
            cfg.validate()?;
        }
        let text: Arc<dyn TextBackend> = match self.text.kind {
            BackendKind::Mock => Arc::new(mock::MockWorld::new(self.text.seed).text()),
            BackendKind::Remote => Arc::new(remote::RemoteText::new(self.text.clone())),
        };
        let image: Arc<dyn ImageBackend> = match self.image.kind {
            BackendKind::Mock => Arc::new(mock::MockWorld::new(self.image.seed).image(image_dir)),
            BackendKind::Remote => Arc::new(remote::RemoteImage::new(self.image.clone())),
        };
        let vision: Arc<dyn VisionBackend> = match self.vision.kind {
            BackendKind::Mock => Arc::new(mock::MockWorld::new(self.vision.seed).vision()),
            BackendKind::Remote => Arc::new(remote::RemoteVision::new(self.vision.clone())),
        };
        Ok(Backends {
            text,
            image,
            vision,
        })
    }
}

/// Wraps a text backend and keeps a copy of every request, for inspection
/// and debugging.
pub struct RecordingText {
    inner: Arc<dyn TextBackend>,
    log: Mutex<Vec<TextRequest>>,
}

impl RecordingText {
    pub fn new(inner: Arc<dyn TextBackend>) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<TextRequest> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn requests_for(&self, task: Task) -> Vec<TextRequest> {
        self.requests()
            .into_iter()
            .filter(|r| r.task == task)
            .collect()
    }
}

impl TextBackend for RecordingText {
    fn complete_text(&self, request: &TextRequest) -> Result<String, BackendError> {
        self.log.lock().expect("log lock").push(request.clone());
        self.inner.complete_text(request)
    }
}

/// Returns the body of the first fenced block opened by a line that starts
/// with three backticks (optionally tagged, e.g. json) and closed by a line
/// of three backticks. Also returns the byte offset of the body in `raw`.
pub fn extract_fenced(raw: &str) -> Option<(usize, &str)> {
    let mut offset = 0;
    let mut open: Option<usize> = None;
    for line in raw.split_inclusive('\n') {
        let trimmed = line.trim();
        match open {
            None => {
                if let Some(tag) = trimmed.strip_prefix("```") {
                    let tag = tag.trim();
                    if tag.is_empty() || tag.eq_ignore_ascii_case("json") {
                        open = Some(offset + line.len());
                    }
                }
            }
            Some(start) => {
                if trimmed == "```" {
                    return Some((start, &raw[start..offset]));
                }
            }
        }
        offset += line.len();
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fence_extraction() {
        let raw = "Sure!\n```json\n{\"a\": 1}\n```\ntrailing";
        let (start, body) = extract_fenced(raw).unwrap();
        assert_eq!(body, "{\"a\": 1}\n");
        assert_eq!(&raw[start..start + 3], "{\"a");
        assert!(extract_fenced("no fence here").is_none());
        assert!(extract_fenced("```json\nunterminated").is_none());
        assert!(extract_fenced("```python\nx\n```").is_none());
        assert_eq!(extract_fenced("```\n[]\n```").unwrap().1, "[]\n");
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackendConfig::mock(1);
        assert!(cfg.validate().is_ok());
        cfg.timeout_secs = 0.0;
        assert!(cfg.validate().is_err());
        cfg.timeout_secs = 1.0;
        cfg.kind = BackendKind::Remote;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn settings_deserialize_with_defaults() {
        let doc = r#"{"text":{"kind":"remote","endpoint":"http://localhost:1","model":"m","api_key_env":"KEY"},
            "image":{"kind":"mock","seed":3},"vision":{"kind":"mock"}}"#;
        let s: BackendSettings = serde_json::from_str(doc).unwrap();
        assert_eq!(s.text.max_retries, 3);
        assert_eq!(s.image.seed, 3);
        assert!(s.build(None).is_ok());
    }
}
