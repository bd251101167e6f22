//! Recommendation sources: a chat-completion endpoint behind a bounded,
//! retrying, cache-first dispatcher, and a seeded popularity-biased simulator.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{ItemId, UserId};
use crate::popularity::ItemStats;
use crate::promptgen::{PromptRequest, StrategyKind};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("cannot draw {requested} distinct items from a catalog of {catalog}")]
    ListTooLong { requested: usize, catalog: usize },
    #[error("bias exponent must be finite and non-negative, got {0}")]
    InvalidBias(f64),
    #[error("replay cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl ClientError {
    fn retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Provider { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

fn default_endpoint() -> String {
    "https://api.openai.com/v1/chat/completions".into()
}
fn default_model() -> String {
    "gpt-4o-mini".into()
}
fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    /// Name of the environment variable that holds the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retry_budget: u32,
    /// First backoff delay; doubles on every retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    /// Global cap on request starts per second.
    #[serde(default)]
    pub requests_per_second: Option<f64>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: default_endpoint(),
            model: default_model(),
            api_key_env: default_key_env(),
            max_in_flight: default_in_flight(),
            timeout_secs: default_timeout(),
            retry_budget: default_retries(),
            backoff_base_ms: default_backoff_ms(),
            requests_per_second: None,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(ClientError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ClientError::InvalidConfig("timeout_secs must be positive".into()));
        }
        if matches!(self.requests_per_second, Some(r) if r.is_nan() || r <= 0.0) {
            return Err(ClientError::InvalidConfig("requests_per_second must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Live,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecommendation {
    pub user: UserId,
    pub strategy: StrategyKind,
    pub titles: Vec<String>,
    pub raw_response: String,
    pub provenance: Provenance,
}

impl RawRecommendation {
    /// Nothing could be extracted from the response.
    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }
}

fn strip_enumeration(line: &str) -> Option<&str> {
    for bullet in ["- ", "* ", "• ", "+ "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return Some(rest);
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 && digits <= 3 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return Some(rest);
            }
        }
    }
    None
}

fn clean_title(raw: &str) -> String {
    let mut t = raw.trim();
    // "Title (1999) - some blurb": keep everything up to the year
    if let Some(pos) = find_year_end(t) {
        t = &t[..pos];
    }
    t = t.trim().trim_matches(['*', '_']).trim();
    for (open, close) in [("\"", "\""), ("“", "”"), ("'", "'")] {
        if t.len() >= open.len() + close.len() && t.starts_with(open) && t.ends_with(close) {
            t = t[open.len()..t.len() - close.len()].trim();
        }
    }
    t.trim_end_matches([':', ',']).trim().to_string()
}

/// Byte offset just past the first `(YYYY)` that is followed by more text.
fn find_year_end(t: &str) -> Option<usize> {
    let b = t.as_bytes();
    (0..b.len().saturating_sub(5)).find_map(|i| {
        let is_year = b[i] == b'(' && b[i + 5] == b')' && b[i + 1..i + 5].iter().all(u8::is_ascii_digit);
        (is_year && i + 6 < b.len()).then_some(i + 6)
    })
}

fn looks_like_prose(line: &str) -> bool {
    line.ends_with([':', '.', '!', '?']) || line.chars().count() > 150
}

/// Pull an ordered title list out of a free-text response.
///
/// Numbered (`1.` / `1)`) and bulleted (`-`, `*`) lines are preferred; when
/// the response has any, other lines are treated as commentary. Otherwise
/// each non-empty line that does not read like a sentence is a title. The
/// result is truncated to `limit`; order is never changed.
pub fn extract_titles(text: &str, limit: usize) -> Vec<String> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let enumerated: Vec<&str> = lines.iter().filter_map(|l| strip_enumeration(l)).collect();
    let candidates: Vec<String> = if enumerated.is_empty() {
        lines.iter().filter(|l| !looks_like_prose(l)).map(|l| clean_title(l)).collect()
    } else {
        enumerated.iter().map(|l| clean_title(l)).collect()
    };
    candidates.into_iter().filter(|t| !t.is_empty()).take(limit).collect()
}

/// Text returned by a provider plus whatever decoding parameters it echoed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default)]
    pub model: Option<String>,
}

/// A single-message chat-completion backend.
pub trait Transport: Sync {
    fn complete(&self, prompt: &str) -> Result<Completion>;
}

/// OpenAI-compatible chat-completions endpoint over HTTP.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: String,
}

impl HttpTransport {
    pub fn from_config(config: &ProviderConfig) -> Result<Self> {
        config.validate()?;
        let api_key =
            std::env::var(&config.api_key_env).map_err(|_| ClientError::MissingApiKey(config.api_key_env.clone()))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { agent, endpoint: config.endpoint.clone(), model: config.model.clone(), api_key })
    }
}

/// First text segment of a chat-completion body. Accepts both the
/// `choices[0].message.content` and the `content[0].text` shapes.
pub fn parse_completion_body(body: &str) -> Result<Completion> {
    let value: serde_json::Value = serde_json::from_str(body).map_err(|e| ClientError::BadResponse(e.to_string()))?;
    let text = value
        .pointer("/choices/0/message/content")
        .or_else(|| value.pointer("/content/0/text"))
        .and_then(serde_json::Value::as_str)
        .ok_or_else(|| ClientError::BadResponse("no text content in response".into()))?;
    Ok(Completion { text: text.to_string(), model: value.get("model").and_then(|m| m.as_str()).map(str::to_string) })
}

impl Transport for HttpTransport {
    fn complete(&self, prompt: &str) -> Result<Completion> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ClientError::Provider { status, body: text });
        }
        parse_completion_body(&text)
    }
}

/// Spaces request starts at least `1 / rate` seconds apart across threads.
struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(per_second: f64) -> Self {
        Self { interval: Duration::from_secs_f64(1.0 / per_second), next: Mutex::new(Instant::now()) }
    }

    fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + self.interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Call the transport, retrying transient failures with jittered
/// exponential backoff (base, 2·base, 4·base, ...).
pub fn complete_with_retry(transport: &dyn Transport, prompt: &str, config: &ProviderConfig) -> Result<Completion> {
    let mut attempt = 0u32;
    loop {
        match transport.complete(prompt) {
            Ok(c) => return Ok(c),
            Err(e) if e.retryable() && attempt < config.retry_budget => {
                let base = config.backoff_base_ms.saturating_mul(1u64 << attempt.min(20));
                let jitter = rand::rng().random_range(0.5..=1.0);
                let delay = Duration::from_millis((base as f64 * jitter) as u64);
                warn!("request failed ({e}); retry {} in {delay:?}", attempt + 1);
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Query one prompt and parse the response into titles.
pub fn request_recommendations(
    transport: &dyn Transport,
    prompt: &str,
    user: UserId,
    strategy: StrategyKind,
    list_length: usize,
    config: &ProviderConfig,
) -> Result<RawRecommendation> {
    let completion = complete_with_retry(transport, prompt, config)?;
    Ok(RawRecommendation {
        user,
        strategy,
        titles: extract_titles(&completion.text, list_length),
        raw_response: completion.text,
        provenance: Provenance::Live,
    })
}

/// Cache key for a (model, prompt) pair.
pub fn prompt_hash(model: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub prompt_hash: String,
    pub model: String,
    pub raw_response: String,
    #[serde(default)]
    pub returned_model: Option<String>,
}

/// Append-only JSON-lines store of raw provider responses keyed by prompt
/// hash. Lines that fail to parse (e.g. a write cut short by a crash) are
/// skipped on load.
pub struct ReplayCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, CacheRecord>>,
    file: Mutex<Option<File>>,
}

impl ReplayCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        entries.entry(rec.prompt_hash.clone()).or_insert(rec);
                    }
                    Err(e) => warn!("{}:{}: skipping unreadable cache line ({e})", path.display(), n + 1),
                }
            }
        }
        Ok(Self { path, entries: Mutex::new(entries), file: Mutex::new(None) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, hash: &str) -> Option<CacheRecord> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).get(hash).cloned()
    }

    pub fn insert(&self, record: CacheRecord) -> Result<()> {
        let mut line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
        line.push('\n');
        {
            let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
            if file.is_none() {
                if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
                // a previous writer may have died mid-line
                if f.metadata()?.len() > 0 && !ends_with_newline(&self.path)? {
                    f.write_all(b"\n")?;
                }
                *file = Some(f);
            }
            let f = file.as_mut().expect("opened above");
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).entry(record.prompt_hash.clone()).or_insert(record);
        Ok(())
    }
}

fn ends_with_newline(path: &Path) -> std::io::Result<bool> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path)?;
    f.seek(SeekFrom::End(-1))?;
    let mut last = [0u8];
    f.read_exact(&mut last)?;
    Ok(last[0] == b'\n')
}

/// One prompt to resolve through the dispatcher.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryJob {
    pub user: UserId,
    pub strategy: StrategyKind,
    pub prompt: String,
    pub list_length: usize,
}

/// Outcome of a dispatched job.
#[derive(Debug)]
pub struct QueryOutcome {
    pub recommendation: Result<RawRecommendation>,
    pub from_cache: bool,
    pub returned_model: Option<String>,
}

/// Resolve every job, cache first, with at most `max_in_flight` provider
/// requests outstanding. Results come back in job order.
pub fn dispatch(
    jobs: &[QueryJob],
    transport: &dyn Transport,
    config: &ProviderConfig,
    cache: &ReplayCache,
) -> Result<Vec<QueryOutcome>> {
    config.validate()?;
    let limiter = config.requests_per_second.map(RateLimiter::new);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<QueryOutcome>>> = jobs.iter().map(|_| Mutex::new(None)).collect();

    let run_job = |job: &QueryJob| -> QueryOutcome {
        let hash = prompt_hash(&config.model, &job.prompt);
        let parse = |text: String| RawRecommendation {
            user: job.user,
            strategy: job.strategy,
            titles: extract_titles(&text, job.list_length),
            raw_response: text,
            provenance: Provenance::Live,
        };
        if let Some(hit) = cache.get(&hash) {
            debug!("cache hit for user {} / {}", job.user, job.strategy);
            return QueryOutcome {
                returned_model: hit.returned_model.clone(),
                recommendation: Ok(parse(hit.raw_response)),
                from_cache: true,
            };
        }
        if let Some(l) = &limiter {
            l.acquire();
        }
        let completion = match complete_with_retry(transport, &job.prompt, config) {
            Ok(c) => c,
            Err(e) => return QueryOutcome { recommendation: Err(e), from_cache: false, returned_model: None },
        };
        let record = CacheRecord {
            prompt_hash: hash,
            model: config.model.clone(),
            raw_response: completion.text.clone(),
            returned_model: completion.model.clone(),
        };
        if let Err(e) = cache.insert(record) {
            return QueryOutcome { recommendation: Err(e), from_cache: false, returned_model: None };
        }
        QueryOutcome { recommendation: Ok(parse(completion.text)), from_cache: false, returned_model: completion.model }
    };

    let workers = config.max_in_flight.min(jobs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let outcome = run_job(job);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(outcome);
            });
        }
    });
    Ok(slots.into_iter().map(|s| s.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every job ran")).collect())
}

/// Deterministic per-(seed, user, strategy) RNG seed.
fn simulator_seed(seed: u64, user: UserId, strategy: StrategyKind) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(user.0.to_le_bytes());
    h.update(strategy.name().as_bytes());
    h.finalize().into()
}

/// Draw `list_length` distinct catalog items without replacement with
/// probability proportional to `(count + 1) ^ bias_exponent`.
///
/// Uses Gumbel top-k: each item gets `bias * ln(count + 1) + Gumbel noise`
/// and the largest keys win, which is equivalent to successive weighted
/// draws without replacement.
pub fn simulate_recommendations(
    request: &PromptRequest,
    stats: &ItemStats,
    titles: &BTreeMap<ItemId, String>,
    bias_exponent: f64,
    seed: u64,
) -> Result<RawRecommendation> {
    if !(bias_exponent >= 0.0 && bias_exponent.is_finite()) {
        return Err(ClientError::InvalidBias(bias_exponent));
    }
    let catalog = stats.total_items();
    if request.list_length > catalog || catalog == 0 {
        return Err(ClientError::ListTooLong { requested: request.list_length, catalog });
    }
    let mut rng = ChaCha8Rng::from_seed(simulator_seed(seed, request.user, request.strategy.kind));
    let mut keyed: Vec<(f64, ItemId)> = stats
        .counts()
        .iter()
        .map(|(&item, &count)| {
            let u: f64 = rng.random();
            let gumbel = -(-u.ln()).ln();
            (bias_exponent * ((count + 1) as f64).ln() + gumbel, item)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let titles: Vec<String> = keyed
        .iter()
        .take(request.list_length)
        .map(|&(_, item)| titles.get(&item).cloned().unwrap_or_else(|| format!("item {item}")))
        .collect();
    let raw_response = titles.iter().enumerate().map(|(i, t)| format!("{}. {t}", i + 1)).collect::<Vec<_>>().join("\n");
    Ok(RawRecommendation {
        user: request.user,
        strategy: request.strategy.kind,
        titles,
        raw_response,
        provenance: Provenance::Simulated,
    })
}
