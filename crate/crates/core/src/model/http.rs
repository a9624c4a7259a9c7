use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Deserialize;

use super::{ModelBackend, ModelRequest, ModelResponse, TokenUsage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the full-jitter sleep after failed attempt `attempt` (1-based).
    pub fn cap(&self, attempt: u32) -> Duration {
        self.base_delay
            .mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub per_minute: Option<u32>,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            per_minute: None,
        }
    }

    /// Reads `MODEL_ENDPOINT` and `MODEL_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("MODEL_ENDPOINT").map_err(|_| Error::Usage("MODEL_ENDPOINT is not set".into()))?;
        let mut cfg = HttpConfig::new(endpoint);
        cfg.api_key = std::env::var("MODEL_API_KEY").ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }
}

struct Limiter {
    max_in_flight: usize,
    per_minute: Option<u32>,
    state: Mutex<LimiterState>,
    freed: Condvar,
}

struct LimiterState {
    in_flight: usize,
    recent: VecDeque<Instant>,
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().expect("limiter poisoned");
        st.in_flight -= 1;
        self.0.freed.notify_one();
    }
}

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().expect("limiter poisoned");
        loop {
            if st.in_flight >= self.max_in_flight {
                st = self.freed.wait(st).expect("limiter poisoned");
                continue;
            }
            if let Some(budget) = self.per_minute {
                let now = Instant::now();
                while st
                    .recent
                    .front()
                    .is_some_and(|t| now.duration_since(*t) >= Duration::from_secs(60))
                {
                    st.recent.pop_front();
                }
                if st.recent.len() >= budget as usize {
                    let wait = Duration::from_secs(60) - now.duration_since(st.recent[0]);
                    st = self.freed.wait_timeout(st, wait).expect("limiter poisoned").0;
                    continue;
                }
                st.recent.push_back(now);
            }
            st.in_flight += 1;
            return Permit(self);
        }
    }
}

/// Chat-completions client.
pub struct HttpBackend {
    cfg: HttpConfig,
    agent: ureq::Agent,
    limiter: Limiter,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: WireText,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WireText {
    Plain(String),
    Parts(Vec<WireTextPart>),
}

#[derive(Deserialize)]
struct WireTextPart {
    #[serde(default)]
    text: String,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

enum Attempt {
    Done(Result<ModelResponse>),
    Retry(String),
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self> {
        if cfg.endpoint.is_empty() {
            return Err(Error::Usage("empty model endpoint".into()));
        }
        if cfg.max_in_flight == 0 || cfg.retry.max_attempts == 0 {
            return Err(Error::Usage("max_in_flight and max_attempts must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        let limiter = Limiter {
            max_in_flight: cfg.max_in_flight,
            per_minute: cfg.per_minute,
            state: Mutex::new(LimiterState {
                in_flight: 0,
                recent: VecDeque::new(),
            }),
            freed: Condvar::new(),
        };
        Ok(HttpBackend { cfg, agent, limiter })
    }

    fn attempt(&self, body: &[u8]) -> Attempt {
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let mut call = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let resp = match call.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.into_body().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        if status == 429 || status >= 500 {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if !(200..300).contains(&status) {
            return Attempt::Done(Err(Error::Protocol {
                message: format!("HTTP {status}"),
                excerpt: excerpt(&text),
            }));
        }
        let parsed: WireResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => {
                return Attempt::Done(Err(Error::Protocol {
                    message: format!("unexpected response body: {e}"),
                    excerpt: excerpt(&text),
                }))
            }
        };
        let Some(choice) = parsed.choices.into_iter().next() else {
            return Attempt::Done(Err(Error::Protocol {
                message: "response has no choices".into(),
                excerpt: excerpt(&text),
            }));
        };
        let raw_text = match choice.message.content {
            WireText::Plain(s) => s,
            WireText::Parts(parts) => parts.into_iter().map(|p| p.text).collect(),
        };
        Attempt::Done(Ok(ModelResponse {
            raw_text,
            latency_ms,
            token_usage: parsed.usage.map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
            backend_id: self.backend_id(),
        }))
    }
}

impl ModelBackend for HttpBackend {
    fn backend_id(&self) -> String {
        format!("http:{}", self.cfg.endpoint)
    }

    fn complete(&self, req: &ModelRequest) -> Result<ModelResponse> {
        let body = req.wire_body();
        let policy = &self.cfg.retry;
        let mut last = String::new();
        for attempt in 1..=policy.max_attempts {
            match self.attempt(&body) {
                Attempt::Done(r) => return r,
                Attempt::Retry(cause) => {
                    log::warn!("{} attempt {attempt} failed: {cause}", req.request_tag);
                    last = cause;
                }
            }
            if attempt < policy.max_attempts {
                let cap = policy.cap(attempt);
                let sleep = cap.mul_f64(rand::rng().random::<f64>());
                std::thread::sleep(sleep);
            }
        }
        Err(Error::Transport(format!(
            "giving up after {} attempts: {last}",
            policy.max_attempts
        )))
    }
}
