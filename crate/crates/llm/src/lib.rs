//! Online backend over an OpenAI-compatible chat-completions endpoint.
//!
//! [`chat_complete`] is the only function that touches the network. The
//! [`LlmGenerator`] and [`LlmFeedback`] plug-ins wrap it for the loop in
//! `anchorloop_core::orchestrator`.

use std::thread;
use std::time::Duration;

use anchorloop_core::blueprint::metric_whitelist;
use anchorloop_core::orchestrator::{
    fenced_blocks, CalibratorSpec, FeedbackAgent, FeedbackRequest, Generator, GeneratorRequest, GeneratorResponse,
    PluginError, Program,
};
use anchorloop_core::Blueprint;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_MAX_RETRIES: u32 = 3;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

pub const GENERATOR_SYSTEM_PROMPT: &str = include_str!("../prompts/generator_system.txt");
pub const FEEDBACK_SYSTEM_PROMPT: &str = include_str!("../prompts/feedback_system.txt");

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("environment variable {0} is not set")]
    AuthMissing(String),
    #[error("endpoint answered HTTP {status}: {body}")]
    HttpError { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("could not extract {0} from the response")]
    ExtractionFailed(String),
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
}

impl LlmError {
    fn is_transient(&self) -> bool {
        match self {
            LlmError::HttpError { status, .. } => *status == 429 || *status >= 500,
            LlmError::Timeout | LlmError::Transport(_) => true,
            _ => false,
        }
    }
}

impl From<LlmError> for PluginError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::AuthMissing(_) | LlmError::HttpError { status: 401 | 403, .. } => PluginError::Auth(e.to_string()),
            LlmError::HttpError { .. } | LlmError::Timeout | LlmError::Transport(_) => {
                PluginError::Transport(e.to_string())
            }
            _ => PluginError::Failed(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningEffort {
    Low,
    Medium,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `https://host/v1`.
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Overrides the per-plug-in effort when set.
    pub reasoning_effort: Option<ReasoningEffort>,
    /// First retry delay; doubled on every further retry.
    pub backoff_base: Duration,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout: DEFAULT_TIMEOUT,
            max_retries: DEFAULT_MAX_RETRIES,
            reasoning_effort: None,
            backoff_base: Duration::from_secs(1),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.timeout.is_zero() {
            return Err(LlmError::InvalidConfig("timeout must be positive".into()));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(LlmError::InvalidConfig(format!("base_url {:?} is not an http(s) URL", self.base_url)));
        }
        Ok(())
    }

    fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: "user".into(), content: content.into() }
    }
}

/// Request body sent to `/chat/completions`.
pub fn request_body(cfg: &EndpointConfig, messages: &[Message], effort: Option<ReasoningEffort>) -> Value {
    let mut body = json!({ "model": cfg.model, "messages": messages });
    if let Some(effort) = cfg.reasoning_effort.or(effort) {
        body["reasoning_effort"] = json!(effort);
    }
    body
}

/// Sends `messages` and returns the first choice's content.
///
/// Transient failures (timeouts, connection errors, 429 and 5xx) are retried
/// up to `max_retries` times with exponential backoff.
pub fn chat_complete(
    cfg: &EndpointConfig,
    messages: &[Message],
    effort: Option<ReasoningEffort>,
) -> Result<String, LlmError> {
    cfg.validate()?;
    let key = std::env::var(&cfg.api_key_env)
        .ok()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| LlmError::AuthMissing(cfg.api_key_env.clone()))?;
    let client = reqwest::blocking::Client::builder()
        .timeout(cfg.timeout)
        .build()
        .map_err(|e| LlmError::Transport(e.to_string()))?;
    let body = request_body(cfg, messages, effort);
    let mut attempt = 0;
    loop {
        match send_once(&client, cfg, &key, &body) {
            Err(e) if e.is_transient() && attempt < cfg.max_retries => {
                let delay = cfg.backoff_base * 2u32.saturating_pow(attempt);
                warn!("attempt {} failed ({e}); retrying in {delay:?}", attempt + 1);
                thread::sleep(delay);
                attempt += 1;
            }
            other => return other,
        }
    }
}

fn send_once(
    client: &reqwest::blocking::Client,
    cfg: &EndpointConfig,
    key: &str,
    body: &Value,
) -> Result<String, LlmError> {
    let response = client
        .post(cfg.completions_url())
        .bearer_auth(key)
        .json(body)
        .send()
        .map_err(transport_error)?;
    let status = response.status();
    let text = response.text().map_err(transport_error)?;
    if !status.is_success() {
        return Err(LlmError::HttpError { status: status.as_u16(), body: text });
    }
    debug!("response: {} bytes", text.len());
    let value: Value = serde_json::from_str(&text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))
}

fn transport_error(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::Transport(e.to_string())
    }
}

/// Splits a generator answer into the program and optional calibrator
/// settings. The first non-JSON block is the program; the first ```json
/// block is the settings.
pub fn extract_generation(text: &str) -> Result<(String, Option<CalibratorSpec>), LlmError> {
    let blocks = fenced_blocks(text);
    let is_json = |info: &str| info.eq_ignore_ascii_case("json");
    let program = blocks
        .iter()
        .find(|(info, _)| !is_json(info))
        .map(|(_, body)| body.to_string())
        .ok_or_else(|| LlmError::ExtractionFailed("a fenced program block".into()))?;
    let spec = blocks.iter().find(|(info, _)| is_json(info)).and_then(|(_, body)| {
        serde_json::from_str::<CalibratorSpec>(body)
            .map_err(|e| warn!("ignoring unreadable calibrator settings: {e}"))
            .ok()
    });
    Ok((program, spec))
}

/// Program generator backed by the chat endpoint.
pub struct LlmGenerator {
    pub cfg: EndpointConfig,
    pub system_prompt: String,
}

impl LlmGenerator {
    pub fn new(cfg: EndpointConfig) -> Self {
        LlmGenerator { cfg, system_prompt: GENERATOR_SYSTEM_PROMPT.into() }
    }

    /// System, background and instruction zones as ordered messages; the
    /// blueprint and strategies end up in the last one.
    pub fn messages(request: &GeneratorRequest) -> Vec<Message> {
        let layout = &request.layout;
        vec![
            Message::system(&layout.system_zone),
            Message::user(&layout.background_zone),
            Message::user(&layout.instruction_zone),
        ]
    }
}

impl Generator for LlmGenerator {
    fn generate(&mut self, request: &GeneratorRequest) -> Result<GeneratorResponse, PluginError> {
        let text = chat_complete(&self.cfg, &Self::messages(request), Some(ReasoningEffort::Medium))?;
        let (source, calibrator_spec) = extract_generation(&text)?;
        Ok(GeneratorResponse {
            program: Program { id: format!("iter-{:02}", request.iteration), source },
            calibrator_spec,
        })
    }

    fn system_prompt(&self) -> String {
        self.system_prompt.clone()
    }
}

/// Diagnosis agent backed by the chat endpoint. Its raw answer goes to the
/// kernel's validator untouched.
pub struct LlmFeedback {
    pub cfg: EndpointConfig,
    pub system_prompt: String,
}

impl LlmFeedback {
    pub fn new(cfg: EndpointConfig) -> Self {
        LlmFeedback { cfg, system_prompt: FEEDBACK_SYSTEM_PROMPT.into() }
    }

    pub fn messages(&self, request: &FeedbackRequest<'_>) -> Vec<Message> {
        vec![Message::system(&self.system_prompt), Message::user(feedback_prompt(request))]
    }
}

fn feedback_prompt(request: &FeedbackRequest<'_>) -> String {
    let allowed: Vec<String> = metric_whitelist(request.blueprint).into_iter().collect();
    let mut out = format!("Iteration {}.\n\nAllowed metric keys: {}\n", request.iteration, allowed.join(", "));
    out.push_str(&metric_definitions(request.blueprint));
    match request.program {
        Some(p) => out.push_str(&format!("\n## Program {}\n```\n{}\n```\n", p.id, p.source)),
        None => out.push_str("\nNo program was produced this iteration.\n"),
    }
    if let Some(report) = request.report {
        out.push_str(&format!("\n## Metrics\n{}\n", report.summary()));
    }
    if let Some(log) = request.error_log {
        out.push_str(&format!("\n## Error log\n{log}\n"));
    }
    out
}

fn metric_definitions(b: &Blueprint) -> String {
    b.metrics()
        .iter()
        .map(|m| format!("- {} ({:?}): {}\n", m.key, m.direction, m.definition))
        .collect()
}

impl FeedbackAgent for LlmFeedback {
    fn diagnose(&mut self, request: &FeedbackRequest<'_>) -> Result<String, PluginError> {
        Ok(chat_complete(&self.cfg, &self.messages(request), Some(ReasoningEffort::Low))?)
    }
}
