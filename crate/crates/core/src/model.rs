//! Black-box text generation: one prompt in, one completion out.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::{Error, Result};
use crate::transport::{self, RetryPolicy};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Base,
    PostEditor,
    Augmenter,
    Surrogate,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Base => "base",
            ModelRole::PostEditor => "post_editor",
            ModelRole::Augmenter => "augmenter",
            ModelRole::Surrogate => "surrogate",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub role: ModelRole,
    pub endpoint: String,
    pub model_name: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl ModelRef {
    pub fn new(role: ModelRole, endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            role,
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            api_key: None,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!(
                "{} temperature must be >= 0, got {}",
                self.role, self.temperature
            )));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config(format!("{} max_in_flight must be > 0", self.role)));
        }
        if self.endpoint.is_empty() {
            return Err(Error::Config(format!("{} endpoint not configured", self.role)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    pub usage: Usage,
    pub latency: Duration,
}

#[async_trait]
pub trait TextModel: Send + Sync {
    fn name(&self) -> &str;

    async fn generate(&self, prompt: &str) -> Result<GenerationResult>;
}

fn strip_trailing_newlines(mut text: String) -> String {
    while text.ends_with('\n') || text.ends_with('\r') {
        text.pop();
    }
    text
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Chat-completions client carrying the whole prompt in one user message.
pub struct HttpModel {
    config: ModelRef,
    client: reqwest::Client,
    permits: Semaphore,
}

impl HttpModel {
    pub fn new(config: ModelRef) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            client: transport::build_client(config.timeout)?,
            permits: Semaphore::new(config.max_in_flight),
            config,
        })
    }

    pub fn config(&self) -> &ModelRef {
        &self.config
    }
}

#[async_trait]
impl TextModel for HttpModel {
    fn name(&self) -> &str {
        &self.config.model_name
    }

    async fn generate(&self, prompt: &str) -> Result<GenerationResult> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let started = Instant::now();
        let body = ChatRequest {
            model: &self.config.model_name,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let resp: ChatResponse = transport::post_json(
            &self.client,
            &self.config.endpoint,
            self.config.api_key.as_deref(),
            &body,
            &self.config.retry,
        )
        .await?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Upstream {
                status: None,
                message: "response has no choices[0].message.content".into(),
            })?;
        Ok(GenerationResult {
            text: strip_trailing_newlines(text),
            usage: resp.usage.unwrap_or_default(),
            latency: started.elapsed(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    Exact(String),
    Substring(String),
    /// Matches every prompt; all sequence registrations share one FIFO queue.
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reply {
    Text(String),
    Fail(String),
}

impl From<&str> for Reply {
    fn from(s: &str) -> Self {
        Reply::Text(s.to_owned())
    }
}

impl From<String> for Reply {
    fn from(s: String) -> Self {
        Reply::Text(s)
    }
}

#[derive(Debug)]
enum Rule {
    Exact(String, Reply),
    Substring(String, Reply),
    Sequence(VecDeque<Reply>),
}

#[derive(Debug, Default)]
struct ScriptState {
    rules: Vec<Rule>,
    default: Option<Reply>,
    calls: Vec<String>,
}

/// Deterministic offline model: rules are tried in registration order.
#[derive(Debug)]
pub struct ScriptedModel {
    name: String,
    state: Mutex<ScriptState>,
}

impl ScriptedModel {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            state: Mutex::new(ScriptState::default()),
        }
    }

    pub fn with_default(self, reply: impl Into<Reply>) -> Self {
        self.lock().default = Some(reply.into());
        self
    }

    /// Answers every prompt with `reply`.
    pub fn constant(name: impl Into<String>, reply: impl Into<Reply>) -> Self {
        Self::new(name).with_default(reply)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ScriptState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn register_script(&self, matcher: Matcher, reply: impl Into<Reply>) {
        let reply = reply.into();
        let mut state = self.lock();
        match matcher {
            Matcher::Exact(p) => state.rules.push(Rule::Exact(p, reply)),
            Matcher::Substring(p) => state.rules.push(Rule::Substring(p, reply)),
            Matcher::Sequence => {
                let queue = state.rules.iter_mut().find_map(|r| match r {
                    Rule::Sequence(q) => Some(q),
                    _ => None,
                });
                match queue {
                    Some(q) => q.push_back(reply),
                    None => state.rules.push(Rule::Sequence(VecDeque::from([reply]))),
                }
            }
        }
    }

    /// Every prompt received so far, in call order.
    pub fn calls(&self) -> Vec<String> {
        self.lock().calls.clone()
    }

    pub fn call_count(&self) -> usize {
        self.lock().calls.len()
    }

    pub fn from_spec(name: impl Into<String>, spec: &ScriptSpec) -> Self {
        let model = Self::new(name);
        for rule in &spec.rules {
            let matcher = match (&rule.exact, &rule.substring) {
                (Some(e), _) => Matcher::Exact(e.clone()),
                (None, Some(s)) => Matcher::Substring(s.clone()),
                (None, None) => Matcher::Sequence,
            };
            model.register_script(matcher, rule.reply());
        }
        for reply in &spec.sequence {
            model.register_script(Matcher::Sequence, reply.clone());
        }
        if let Some(d) = &spec.default {
            model.lock().default = Some(Reply::Text(d.clone()));
        }
        model
    }

    fn answer(&self, prompt: &str) -> Result<String> {
        let mut state = self.lock();
        state.calls.push(prompt.to_owned());
        let mut chosen = None;
        for rule in state.rules.iter_mut() {
            match rule {
                Rule::Exact(p, r) if p == prompt => chosen = Some(r.clone()),
                Rule::Substring(p, r) if prompt.contains(p.as_str()) => chosen = Some(r.clone()),
                Rule::Sequence(q) => {
                    chosen = Some(q.pop_front().ok_or(Error::ScriptExhausted)?);
                }
                _ => continue,
            }
            break;
        }
        match chosen.or_else(|| state.default.clone()) {
            Some(Reply::Text(t)) => Ok(t),
            Some(Reply::Fail(m)) => Err(Error::ScriptedFailure(m)),
            None => Err(Error::NoScriptMatch),
        }
    }
}

#[async_trait]
impl TextModel for ScriptedModel {
    fn name(&self) -> &str {
        &self.name
    }

    async fn generate(&self, prompt: &str) -> Result<GenerationResult> {
        let started = Instant::now();
        let text = self.answer(prompt)?;
        Ok(GenerationResult {
            text,
            usage: Usage::default(),
            latency: started.elapsed(),
        })
    }
}

/// File form of a scripted model.
///
/// ```json
/// {"rules": [{"substring": "Marcel Maupi", "response": "..."}], "sequence": [], "default": "..."}
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptSpec {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub sequence: Vec<String>,
    #[serde(default)]
    pub default: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub exact: Option<String>,
    #[serde(default)]
    pub substring: Option<String>,
    #[serde(default)]
    pub response: Option<String>,
    /// A failure message instead of a response.
    #[serde(default)]
    pub fail: Option<String>,
}

impl ScriptRule {
    fn reply(&self) -> Reply {
        match (&self.fail, &self.response) {
            (Some(f), _) => Reply::Fail(f.clone()),
            (None, Some(r)) => Reply::Text(r.clone()),
            (None, None) => Reply::Text(String::new()),
        }
    }
}
