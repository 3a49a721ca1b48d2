//! Chat-completion clients used to rewrite narrative sentences.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use thiserror::Error;

/// Rewrite instructions; `<INPUT CAPTION>` is replaced by the sentence.
pub const PROMPT_TEMPLATE: &str = include_str!("rewrite_prompt.txt");
pub const INPUT_PLACEHOLDER: &str = "<INPUT CAPTION>";
/// Environment variable holding the bearer token for [`HttpLlm`].
pub const TOKEN_ENV: &str = "PIONER_LLM_TOKEN";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("LLM request timed out")]
    Timeout,
    #[error("LLM transport error: {0}")]
    Transport(String),
    #[error("unparseable LLM output: {0:?}")]
    Unparseable(String),
    #[error("no recorded response for {0:?}")]
    MissingFixture(String),
}

pub fn build_prompt(sentence: &str) -> String {
    PROMPT_TEMPLATE.replacen(INPUT_PLACEHOLDER, sentence, 1)
}

/// Recovers the sentence from a prompt built by [`build_prompt`].
pub fn prompt_input(prompt: &str) -> Option<&str> {
    let (head, tail) = PROMPT_TEMPLATE.split_once(INPUT_PLACEHOLDER)?;
    prompt.strip_prefix(head)?.strip_suffix(tail)
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

impl<F> LlmClient for F
where
    F: Fn(&str) -> Result<String, LlmError> + Send + Sync,
{
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self(prompt)
    }
}

/// Replays recorded responses keyed by input sentence. Rejects prompts that
/// were not built from the rewrite template.
#[derive(Debug, Clone, Default)]
pub struct FixtureLlm {
    responses: BTreeMap<String, String>,
}

impl FixtureLlm {
    pub fn new(responses: BTreeMap<String, String>) -> Self {
        Self { responses }
    }

    /// Loads a JSON object `{sentence: raw response}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| LlmError::Transport(e.to_string()))?;
        let responses = serde_json::from_str(&text).map_err(|e| LlmError::Transport(format!("fixture: {e}")))?;
        Ok(Self { responses })
    }
}

impl LlmClient for FixtureLlm {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let input = prompt_input(prompt).ok_or_else(|| LlmError::Transport("prompt does not follow the template".into()))?;
        self.responses.get(input.trim()).cloned().ok_or_else(|| LlmError::MissingFixture(input.to_string()))
    }
}

/// Token bucket: `rate` tokens per second, burst of `capacity`.
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate: f64, capacity: usize) -> Self {
        let capacity = capacity.max(1) as f64;
        Self { rate, capacity, state: Mutex::new((capacity, Instant::now())) }
    }

    /// Blocks until a token is available. A non-positive rate disables limiting.
    pub fn acquire(&self) {
        if self.rate <= 0.0 || !self.rate.is_finite() {
            return;
        }
        loop {
            let wait = {
                let mut s = self.state.lock().expect("token bucket lock");
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.rate).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// OpenAI-compatible `/chat/completions` client, temperature 0.
pub struct HttpLlm {
    url: String,
    model: String,
    token: Option<String>,
    agent: ureq::Agent,
    bucket: TokenBucket,
}

impl HttpLlm {
    /// Reads the bearer token from `PIONER_LLM_TOKEN` when set.
    pub fn new(url: impl Into<String>, model: impl Into<String>, timeout: Duration, rate_per_sec: f64, burst: usize) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().new_agent();
        Self {
            url: url.into(),
            model: model.into(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            agent,
            bucket: TokenBucket::new(rate_per_sec, burst),
        }
    }
}

impl LlmClient for HttpLlm {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.bucket.acquire();
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::Timeout,
            other => LlmError::Transport(other.to_string()),
        })?;
        let value: Value = resp.body_mut().read_json().map_err(|e| LlmError::Transport(e.to_string()))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LlmError::Unparseable(value.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_embeds_sentence_once() {
        let p = build_prompt("A cat sits.");
        assert!(!p.contains(INPUT_PLACEHOLDER));
        assert_eq!(prompt_input(&p), Some("A cat sits."));
        assert!(p.contains("return `<INVALID>`"));
    }

    #[test]
    fn fixture_requires_template() {
        let llm = FixtureLlm::new(BTreeMap::from([("x".to_string(), "{y}".to_string())]));
        assert_eq!(llm.complete(&build_prompt("x")).unwrap(), "{y}");
        assert!(llm.complete("x").is_err());
        assert!(matches!(llm.complete(&build_prompt("z")), Err(LlmError::MissingFixture(_))));
    }

    #[test]
    fn bucket_limits_rate() {
        let b = TokenBucket::new(50.0, 1);
        let t = Instant::now();
        for _ in 0..4 {
            b.acquire();
        }
        assert!(t.elapsed() >= Duration::from_millis(50));
    }
}
