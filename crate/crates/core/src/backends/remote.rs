//! HTTP backends for OpenAI-compatible providers.
//!
//! Text uses `POST {endpoint}/chat/completions` and reads
//! `choices[0].message.content`. Images use `POST {endpoint}/images/generations`
//! and read `data[0].url`. Vision is a chat completion with an `image_url`
//! content part whose reply must be a JSON object with `appearance`,
//! `clothing` and `key_features`.
//!
//! Timeouts, transport failures, 429 and 5xx responses are retried with
//! exponential backoff, for at most `max_retries + 1` attempts in total.

use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    extract_fenced, BackendConfig, BackendError, ImageBackend, ImageRef, TextBackend, TextRequest,
    VisionBackend, VisualDescription,
};
use crate::prompts::VISION_SYSTEM;

const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Connection(String),
}

/// One HTTP round-trip. Swappable so retry behavior can be tested without a
/// network.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError>;
}

/// Blocking reqwest client, created on first use so construction is safe
/// inside an async runtime.
#[derive(Debug, Default)]
pub struct ReqwestTransport {
    client: std::sync::OnceLock<reqwest::blocking::Client>,
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let client = self.client.get_or_init(reqwest::blocking::Client::new);
        let mut req = client.post(url).timeout(timeout).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(classify)?;
        Ok(HttpResponse { status, body })
    }
}

fn classify(e: reqwest::Error) -> TransportError {
    if e.is_timeout() {
        TransportError::Timeout
    } else {
        TransportError::Connection(e.to_string())
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Shared request machinery: credentials, transport, and the retry loop.
#[derive(Clone)]
pub struct RemoteClient {
    config: BackendConfig,
    transport: Arc<dyn HttpTransport>,
    sleep: Sleeper,
}

impl RemoteClient {
    pub fn new(config: BackendConfig) -> Self {
        Self::with_transport(config, Arc::new(ReqwestTransport::default()))
    }

    pub fn with_transport(config: BackendConfig, transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            config,
            transport,
            sleep: Arc::new(std::thread::sleep),
        }
    }

    /// Replaces the sleep used between attempts.
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn credential(&self) -> Result<Option<String>, BackendError> {
        match &self.config.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::MissingCredential(var.clone())),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.endpoint.trim_end_matches('/'))
    }

    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let base = Duration::from_millis(self.config.backoff_base_ms);
        base.saturating_mul(2u32.saturating_pow(retry))
            .min(MAX_BACKOFF)
    }

    /// Posts `body` and returns the parsed JSON response of the first
    /// successful attempt.
    pub fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        self.config.validate()?;
        let bearer = self.credential()?;
        let url = self.url(path);
        let timeout = Duration::from_secs_f64(self.config.timeout_secs);
        let max_attempts = self.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let failure = match self
                .transport
                .post_json(&url, bearer.as_deref(), body, timeout)
            {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return serde_json::from_str(&resp.body).map_err(|e| {
                        BackendError::BadResponse(format!("response is not JSON: {e}"))
                    });
                }
                Ok(resp) if resp.status == 429 => BackendError::RateLimited { attempts: attempt },
                Ok(resp) if resp.status >= 500 => BackendError::Transport {
                    attempts: attempt,
                    message: format!("status {}", resp.status),
                },
                Ok(resp) => {
                    return Err(BackendError::NonRetryable {
                        status: resp.status,
                        body: resp.body,
                    })
                }
                Err(TransportError::Timeout) => BackendError::Timeout { attempts: attempt },
                Err(TransportError::Connection(message)) => BackendError::Transport {
                    attempts: attempt,
                    message,
                },
            };
            if attempt >= max_attempts {
                return Err(failure);
            }
            log::warn!("attempt {attempt}/{max_attempts} to {url} failed: {failure}");
            (self.sleep)(self.backoff(attempt - 1));
        }
    }

    fn chat(
        &self,
        messages: Value,
        temperature: f32,
        max_tokens: u32,
        seed: Option<u64>,
    ) -> Result<String, BackendError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens,
        });
        if let Some(seed) = seed {
            body["seed"] = json!(seed);
        }
        let resp = self.post("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))
    }
}

pub struct RemoteText {
    client: RemoteClient,
}

impl RemoteText {
    pub fn new(config: BackendConfig) -> Self {
        Self {
            client: RemoteClient::new(config),
        }
    }

    pub fn from_client(client: RemoteClient) -> Self {
        Self { client }
    }
}

impl TextBackend for RemoteText {
    fn complete_text(&self, request: &TextRequest) -> Result<String, BackendError> {
        if request.prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        let messages = json!([
            {"role": "system", "content": request.system},
            {"role": "user", "content": request.prompt},
        ]);
        let p = &request.params;
        self.client
            .chat(messages, p.temperature, p.max_tokens, p.seed)
    }
}

pub struct RemoteImage {
    client: RemoteClient,
}

impl RemoteImage {
    pub fn new(config: BackendConfig) -> Self {
        Self {
            client: RemoteClient::new(config),
        }
    }

    pub fn from_client(client: RemoteClient) -> Self {
        Self { client }
    }
}

impl ImageBackend for RemoteImage {
    fn generate_image(&self, prompt: &str, style: &str) -> Result<ImageRef, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("image prompt is empty".into()));
        }
        let full = if style.trim().is_empty() {
            prompt.to_string()
        } else {
            format!("{prompt}\nStyle: {style}")
        };
        let body = json!({"model": self.client.config.model, "prompt": full, "n": 1});
        let resp = self.client.post("images/generations", &body)?;
        resp.pointer("/data/0/url")
            .and_then(Value::as_str)
            .map(|u| ImageRef(u.to_string()))
            .ok_or_else(|| BackendError::BadResponse("missing data[0].url".into()))
    }
}

pub struct RemoteVision {
    client: RemoteClient,
}

impl RemoteVision {
    pub fn new(config: BackendConfig) -> Self {
        Self {
            client: RemoteClient::new(config),
        }
    }

    pub fn from_client(client: RemoteClient) -> Self {
        Self { client }
    }
}

impl VisionBackend for RemoteVision {
    fn analyze_image(&self, image: &ImageRef) -> Result<VisualDescription, BackendError> {
        let messages = json!([
            {"role": "system", "content": VISION_SYSTEM},
            {"role": "user", "content": [
                {"type": "text", "text": "Describe this character."},
                {"type": "image_url", "image_url": {"url": image.0}},
            ]},
        ]);
        let reply = self.client.chat(messages, 0.0, 512, None)?;
        parse_vision_reply(&reply)
    }
}

/// Reads the description triple from a reply, fenced or bare.
pub fn parse_vision_reply(reply: &str) -> Result<VisualDescription, BackendError> {
    let body = extract_fenced(reply).map_or(reply, |(_, b)| b);
    let value: Value = serde_json::from_str(body.trim())
        .map_err(|e| BackendError::UnparsableVisionResponse(e.to_string()))?;
    let text = |key: &str| {
        value
            .get(key)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                BackendError::UnparsableVisionResponse(format!("missing string field `{key}`"))
            })
    };
    let key_features = value
        .get("key_features")
        .and_then(Value::as_array)
        .and_then(|a| {
            a.iter()
                .map(|f| f.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
        })
        .ok_or_else(|| {
            BackendError::UnparsableVisionResponse("missing list field `key_features`".into())
        })?;
    Ok(VisualDescription {
        appearance: text("appearance")?,
        clothing: text("clothing")?,
        key_features,
    })
}
