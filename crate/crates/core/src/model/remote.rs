//! Adapter for OpenAI-style `/completions` endpoints that report top-N
//! log-probabilities for the next token.
//!
//! The endpoint never exposes the full vocabulary, so the returned top-N
//! tokens are treated as the entire support and renormalized. Their raw
//! (pre-renormalization) mass is kept for diagnostics.

use std::collections::HashMap;
use std::sync::{Condvar, Mutex, RwLock};
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{LanguageModel, ModelError, NextTokenDistribution, TokenId};
use crate::num::Probability;

pub const ENV_URL: &str = "DLE_REMOTE_URL";
pub const ENV_KEY: &str = "DLE_REMOTE_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteErrorKind {
    Transport,
    Timeout,
    Status(u16),
    Decode,
    NoLogprobs,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("remote request failed after {attempts} attempt(s) ({kind:?}, retryable: {retryable}): {message}")]
pub struct RemoteError {
    pub kind: RemoteErrorKind,
    pub attempts: u32,
    pub retryable: bool,
    pub message: String,
}

impl RemoteError {
    fn new(kind: RemoteErrorKind, message: impl Into<String>) -> Self {
        let retryable = match kind {
            RemoteErrorKind::Transport | RemoteErrorKind::Timeout => true,
            RemoteErrorKind::Status(code) => code == 429 || code >= 500,
            RemoteErrorKind::Decode | RemoteErrorKind::NoLogprobs => false,
        };
        Self {
            kind,
            attempts: 1,
            retryable,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub eos_token: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_in_flight: usize,
    /// Raw top-N mass below which a warning is logged.
    pub low_mass_warning: f64,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: "default".into(),
            eos_token: "<|endoftext|>".into(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            initial_backoff: Duration::from_millis(200),
            max_in_flight: 8,
            low_mass_warning: 0.5,
        }
    }

    pub fn from_env() -> Result<Self, ModelError> {
        let url = std::env::var(ENV_URL)
            .map_err(|_| ModelError::InvalidParameter(format!("{ENV_URL} is not set")))?;
        let mut config = Self::new(url);
        config.api_key = std::env::var(ENV_KEY).ok().filter(|k| !k.is_empty());
        Ok(config)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    active: Mutex<usize>,
    released: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.limit {
            active = self.released.wait(active).unwrap();
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.released.notify_one();
    }
}

/// Token strings discovered so far. Ids are stable once assigned.
#[derive(Debug, Default)]
struct Interner {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Interner {
    fn intern(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = TokenId::from(self.tokens.len());
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }
}

/// Next-token distribution from the endpoint plus its raw top-N mass.
#[derive(Debug, Clone)]
pub struct RemoteDistribution<P> {
    pub dist: NextTokenDistribution<P>,
    pub raw_mass: f64,
}

#[derive(Debug)]
pub struct RemoteClient {
    config: RemoteConfig,
    top_n: usize,
    agent: ureq::Agent,
    vocab: RwLock<Interner>,
    in_flight: InFlight,
    min_raw_mass: Mutex<f64>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Vec<Option<HashMap<String, f64>>>,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig, top_n: usize) -> Result<Self, ModelError> {
        if top_n == 0 {
            return Err(ModelError::InvalidParameter("top_n must be at least 1".into()));
        }
        if config.max_in_flight == 0 {
            return Err(ModelError::InvalidParameter("max_in_flight must be at least 1".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut interner = Interner::default();
        interner.intern(&config.eos_token);
        Ok(Self {
            in_flight: InFlight {
                active: Mutex::new(0),
                released: Condvar::new(),
                limit: config.max_in_flight,
            },
            config,
            top_n,
            agent,
            vocab: RwLock::new(interner),
            min_raw_mass: Mutex::new(1.0),
        })
    }

    /// Smallest raw top-N mass observed so far.
    pub fn min_raw_mass(&self) -> f64 {
        *self.min_raw_mass.lock().unwrap()
    }

    fn render(&self, ids: &[TokenId]) -> String {
        let vocab = self.vocab.read().unwrap();
        ids.iter()
            .filter(|id| id.index() != 0)
            .filter_map(|id| vocab.tokens.get(id.index()))
            .map(String::as_str)
            .collect()
    }

    fn endpoint(&self) -> String {
        format!("{}/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn request_once(&self, prompt: &str) -> Result<Vec<(String, f64)>, RemoteError> {
        let _permit = self.in_flight.acquire();
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": 1,
            "logprobs": self.top_n,
            "temperature": 0.0,
        });
        let mut req = self.agent.post(&self.endpoint()).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body.to_string().as_bytes()).map_err(classify)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(classify)?;
        if !(200..300).contains(&status) {
            return Err(RemoteError::new(RemoteErrorKind::Status(status), text));
        }
        parse_top_logprobs(&text)
    }

    /// Queries the endpoint, retrying retryable failures with exponential
    /// backoff.
    pub fn remote_next_distribution<P: Probability>(
        &self,
        prompt: &[TokenId],
        generated: &[TokenId],
    ) -> Result<RemoteDistribution<P>, RemoteError> {
        let mut text = self.render(prompt);
        text.push_str(&self.render(generated));
        let mut attempt = 0;
        let pairs = loop {
            attempt += 1;
            match self.request_once(&text) {
                Ok(pairs) => break pairs,
                Err(mut e) => {
                    e.attempts = attempt;
                    if !e.retryable || attempt > self.config.max_retries {
                        return Err(e);
                    }
                    let delay = self.config.initial_backoff * 2u32.saturating_pow(attempt - 1);
                    log::debug!("remote attempt {attempt} failed ({:?}); retrying in {delay:?}", e.kind);
                    std::thread::sleep(delay);
                }
            }
        };
        self.to_distribution(pairs)
    }

    fn to_distribution<P: Probability>(&self, mut pairs: Vec<(String, f64)>) -> Result<RemoteDistribution<P>, RemoteError> {
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        pairs.truncate(self.top_n);
        let ids: Vec<TokenId> = {
            let mut vocab = self.vocab.write().unwrap();
            pairs.iter().map(|(t, _)| vocab.intern(t)).collect()
        };
        let size = self.vocab.read().unwrap().tokens.len();
        let max_lp = pairs[0].1;
        let mut weights = vec![0.0f64; size];
        for (id, (_, lp)) in ids.iter().zip(&pairs) {
            weights[id.index()] += (lp - max_lp).exp();
        }
        let raw_mass: f64 = pairs.iter().map(|(_, lp)| lp.exp()).sum();
        {
            let mut min = self.min_raw_mass.lock().unwrap();
            *min = min.min(raw_mass);
        }
        if raw_mass < self.config.low_mass_warning {
            log::warn!(
                "top-{} tokens cover only {raw_mass:.4} of the next-token mass; truncation acts on a restricted support",
                self.top_n
            );
        }
        let total: f64 = weights.iter().sum();
        let dist = NextTokenDistribution::new(weights.iter().map(|w| P::of(w / total)).collect())
            .map_err(|e| RemoteError::new(RemoteErrorKind::Decode, e.to_string()))?;
        Ok(RemoteDistribution { dist, raw_mass })
    }
}

fn classify(e: ureq::Error) -> RemoteError {
    let kind = match &e {
        ureq::Error::Timeout(_) => RemoteErrorKind::Timeout,
        ureq::Error::StatusCode(code) => RemoteErrorKind::Status(*code),
        _ => RemoteErrorKind::Transport,
    };
    RemoteError::new(kind, e.to_string())
}

fn parse_top_logprobs(body: &str) -> Result<Vec<(String, f64)>, RemoteError> {
    let resp: CompletionResponse =
        serde_json::from_str(body).map_err(|e| RemoteError::new(RemoteErrorKind::Decode, e.to_string()))?;
    let logprobs = resp
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.logprobs)
        .ok_or_else(|| RemoteError::new(RemoteErrorKind::NoLogprobs, "response has no logprobs"))?;
    let mut pairs: Vec<(String, f64)> = logprobs
        .top_logprobs
        .into_iter()
        .next()
        .flatten()
        .map(|m| m.into_iter().collect())
        .unwrap_or_default();
    if pairs.is_empty() {
        if let (Some(tok), Some(Some(lp))) = (logprobs.tokens.first(), logprobs.token_logprobs.first()) {
            pairs.push((tok.clone(), *lp));
        }
    }
    if let Some((t, lp)) = pairs.iter().find(|(_, lp)| !lp.is_finite() || *lp > 1e-9) {
        return Err(RemoteError::new(RemoteErrorKind::Decode, format!("invalid logprob {lp} for {t:?}")));
    }
    pairs.retain(|(_, lp)| *lp > f64::NEG_INFINITY);
    if pairs.is_empty() {
        return Err(RemoteError::new(RemoteErrorKind::NoLogprobs, "no log-probabilities returned"));
    }
    Ok(pairs)
}

impl<P: Probability> LanguageModel<P> for RemoteClient {
    fn vocab_size(&self) -> usize {
        self.vocab.read().unwrap().tokens.len()
    }

    fn eos(&self) -> TokenId {
        TokenId(0)
    }

    fn token_str(&self, id: TokenId) -> Option<String> {
        self.vocab.read().unwrap().tokens.get(id.index()).cloned()
    }

    /// Splits text into pieces at whitespace boundaries, keeping each
    /// whitespace run attached to the word that follows it.
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ModelError> {
        let mut pieces: Vec<String> = Vec::new();
        let mut current = String::new();
        let mut prev_ws = false;
        for ch in text.chars() {
            let ws = ch.is_whitespace();
            if !ws && prev_ws && current.chars().any(|c| !c.is_whitespace()) {
                let (head, tail) = split_trailing_ws(&current);
                pieces.push(head);
                current = tail;
            }
            current.push(ch);
            prev_ws = ws;
        }
        if !current.is_empty() {
            pieces.push(current);
        }
        let mut vocab = self.vocab.write().unwrap();
        if pieces.contains(&self.config.eos_token) {
            return Err(ModelError::EosInPrefix);
        }
        Ok(pieces.iter().map(|p| vocab.intern(p)).collect())
    }

    fn detokenize(&self, ids: &[TokenId]) -> String {
        self.render(ids)
    }

    fn next_distribution(
        &self,
        prompt: &[TokenId],
        generated: &[TokenId],
    ) -> Result<NextTokenDistribution<P>, ModelError> {
        if prompt.contains(&TokenId(0)) || generated.contains(&TokenId(0)) {
            return Err(ModelError::EosInPrefix);
        }
        Ok(self.remote_next_distribution(prompt, generated)?.dist)
    }
}

fn split_trailing_ws(s: &str) -> (String, String) {
    let trimmed = s.trim_end();
    (trimmed.to_string(), s[trimmed.len()..].to_string())
}
