//! Chat-completion clients used to generate and verify Q&A pairs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use super::prompts::{extract_delimited, ChatPrompt, V1_SYSTEM, V2_SYSTEM, VERIFY_SYSTEM};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("missing api key in environment variable `{0}`")]
    MissingKey(String),
}

impl ClientError {
    /// Client-side mistakes are not worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Timeout | ClientError::Transport(_) => true,
            ClientError::Status { status, .. } => *status == 429 || *status >= 500,
            ClientError::Malformed(_) | ClientError::MissingKey(_) => false,
        }
    }
}

pub trait ChatClient: Send + Sync {
    /// One completion for `prompt`. `seed` is forwarded to backends that
    /// support seeded sampling.
    fn complete(&self, prompt: &ChatPrompt, seed: u64) -> Result<String, ClientError>;

    fn model_name(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Calls `client` up to `max_attempts` times, sleeping `base · 2^k` between
/// attempts. Returns the last error when every attempt fails.
pub fn complete_with_retries(
    client: &dyn ChatClient,
    prompt: &ChatPrompt,
    seed: u64,
    policy: RetryPolicy,
) -> Result<String, ClientError> {
    let mut attempt = 0;
    loop {
        match client.complete(prompt, seed) {
            Ok(text) => return Ok(text),
            Err(e) => {
                attempt += 1;
                if attempt >= policy.max_attempts || !e.is_retryable() {
                    return Err(e);
                }
                let delay = policy.base_delay.saturating_mul(1 << (attempt - 1).min(16));
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
        }
    }
}

type Script = dyn Fn(&ChatPrompt, usize) -> Result<String, ClientError> + Send + Sync;

/// Test client driven by a closure of `(prompt, call index)`. Keying the
/// script on the prompt keeps it independent of call interleaving.
pub struct ScriptedClient {
    script: Box<Script>,
    calls: AtomicUsize,
    name: String,
}

impl ScriptedClient {
    pub fn new(script: impl Fn(&ChatPrompt, usize) -> Result<String, ClientError> + Send + Sync + 'static) -> Self {
        Self {
            script: Box::new(script),
            calls: AtomicUsize::new(0),
            name: "scripted-mock".into(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, prompt: &ChatPrompt, _seed: u64) -> Result<String, ClientError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        (self.script)(prompt, n)
    }

    fn model_name(&self) -> String {
        self.name.clone()
    }
}

/// Offline stand-in for a chat model: answers every generation prompt with
/// well-formed pairs built from the caption and approves every
/// verification. Output depends only on the prompt and seed.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticClient;

const SHORT_QUESTIONS: [&str; 8] = [
    "What is the mood of the music?",
    "Which instruments can be heard?",
    "How would you describe the tempo?",
    "What genre does this piece belong to?",
    "Is there a singer in this recording?",
    "What kind of setting would suit this music?",
    "How is the sound quality of the recording?",
    "What stands out most in this piece?",
];

const LONG_QUESTIONS: [&str; 3] = [
    "Can you provide a summary of the music?",
    "What are the main features of the music?",
    "Could you briefly describe the music content?",
];

fn sentence(s: &str) -> String {
    let s = s.trim();
    if crate::data::ends_with_terminal_punctuation(s) {
        s.to_string()
    } else {
        format!("{s}.")
    }
}

impl ChatClient for SyntheticClient {
    fn complete(&self, prompt: &ChatPrompt, seed: u64) -> Result<String, ClientError> {
        let caption = extract_delimited(&prompt.user)
            .ok_or_else(|| ClientError::Malformed("prompt has no delimited caption".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if prompt.system == VERIFY_SYSTEM {
            return Ok("Yes".into());
        }
        if prompt.system == V1_SYSTEM {
            let mut qs = SHORT_QUESTIONS.to_vec();
            qs.shuffle(&mut rng);
            let mut obj = serde_json::Map::new();
            for (i, q) in qs.iter().take(5).enumerate() {
                obj.insert(format!("Question {}", i + 1), (*q).into());
                obj.insert(
                    format!("Answer {}", i + 1),
                    format!("Based on the description, {}", sentence(caption)).into(),
                );
            }
            return Ok(serde_json::Value::Object(obj).to_string());
        }
        if prompt.system == V2_SYSTEM {
            let q = LONG_QUESTIONS.choose(&mut rng).copied().unwrap_or(LONG_QUESTIONS[0]);
            let a = format!("Here is an overview of the piece. {}", sentence(caption));
            return Ok(json!({ "Q": q, "A": a }).to_string());
        }
        Err(ClientError::Malformed("unrecognized system prompt".into()))
    }

    fn model_name(&self) -> String {
        "synthetic-mock".into()
    }
}

/// OpenAI-compatible chat-completions endpoint. The API key is read from
/// the named environment variable at call time and never logged.
pub struct HttpChatClient {
    endpoint: String,
    model: String,
    api_key_env: String,
    min_interval: Duration,
    last_request: Mutex<Option<Instant>>,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key_env: impl Into<String>,
        timeout: Duration,
        min_interval: Duration,
    ) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: api_key_env.into(),
            min_interval,
            last_request: Mutex::new(None),
            http,
        })
    }

    /// Blocks until at least `min_interval` has passed since the previous
    /// request from this client.
    fn throttle(&self) {
        let mut last = self.last_request.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &ChatPrompt, seed: u64) -> Result<String, ClientError> {
        let key = std::env::var(&self.api_key_env).map_err(|_| ClientError::MissingKey(self.api_key_env.clone()))?;
        self.throttle();
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            "temperature": 0,
            "seed": seed,
        });
        let resp = self
            .http
            .post(&self.endpoint)
            .bearer_auth(key)
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    ClientError::Timeout
                } else {
                    ClientError::Transport(e.without_url().to_string())
                }
            })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ClientError::Status {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ClientError::Malformed(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ClientError::Malformed("no choices[0].message.content".into()))
    }

    fn model_name(&self) -> String {
        self.model.clone()
    }
}
