//! Cache-first download client for radar files with an hourly request
//! budget.
//!
//! Every file in the requested window is named from a template and the
//! frame cadence. Cached files are returned without touching the network.
//! Each HTTP attempt (retries included) is logged in the cache directory so
//! the hourly budget holds across processes. When the budget runs out the
//! client stops and returns what it has, flagged as partial.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, TimeDelta, Utc};

use crate::error::{Error, FetchError, Result};

pub const API_KEY_ENV: &str = "NOWCAST_API_KEY";
const LEDGER_FILE: &str = ".requests";

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchConfig {
    pub base_url: String,
    /// Header carrying the API key.
    pub api_key_header: String,
    /// File name pattern; `{stamp}` expands to `YYYYMMDDHHMM`.
    pub file_template: String,
    pub cadence: TimeDelta,
    pub budget_per_hour: u32,
    pub cache_dir: PathBuf,
    pub retry: RetryPolicy,
    /// Minimum pause between consecutive requests.
    pub min_spacing: Duration,
    pub timeout: Duration,
}

impl FetchConfig {
    pub fn new(base_url: impl Into<String>, cache_dir: impl Into<PathBuf>) -> Self {
        FetchConfig {
            base_url: base_url.into(),
            api_key_header: "Authorization".into(),
            file_template: "RAD_NL25_PCP_NA_{stamp}.h5".into(),
            cadence: TimeDelta::minutes(5),
            budget_per_hour: 100,
            cache_dir: cache_dir.into(),
            retry: RetryPolicy::default(),
            min_spacing: Duration::ZERO,
            timeout: Duration::from_secs(30),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget_per_hour == 0 {
            return Err(Error::InvalidConfig("fetch budget_per_hour must be > 0".into()));
        }
        if self.cadence <= TimeDelta::zero() {
            return Err(Error::InvalidConfig("fetch cadence must be positive".into()));
        }
        if !self.file_template.contains("{stamp}") {
            return Err(Error::InvalidConfig("file_template needs a {stamp} placeholder".into()));
        }
        Ok(())
    }

    pub fn file_name(&self, at: DateTime<Utc>) -> String {
        self.file_template
            .replace("{stamp}", &at.format("%Y%m%d%H%M").to_string())
    }

    /// File names for every cadence step in `[from, to]`.
    pub fn window_files(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> Vec<String> {
        let mut out = Vec::new();
        let mut t = from;
        while t <= to {
            out.push(self.file_name(t));
            t += self.cadence;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout(String),
    Other(String),
}

pub trait Transport {
    fn get(&self, url: &str, headers: &[(&str, &str)]) -> std::result::Result<HttpResponse, TransportError>;
}

pub trait Clock {
    fn now(&self) -> DateTime<Utc>;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| FetchError::Exhausted {
                url: String::new(),
                attempts: 0,
                last: e.to_string(),
            })?;
        Ok(ReqwestTransport { client })
    }
}

impl Transport for ReqwestTransport {
    fn get(&self, url: &str, headers: &[(&str, &str)]) -> std::result::Result<HttpResponse, TransportError> {
        let mut req = self.client.get(url);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout(e.to_string())
            } else {
                TransportError::Other(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(|e| TransportError::Other(e.to_string()))?.to_vec();
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FetchOutcome {
    /// Cached paths of every available file, in window order.
    pub files: Vec<PathBuf>,
    pub cache_hits: usize,
    /// HTTP requests issued, retries included.
    pub requests: usize,
    /// Files the server reported as absent (404).
    pub missing: Vec<String>,
    /// The hourly budget ran out before the window was complete.
    pub partial: bool,
}

/// Timestamps of past requests, persisted one UNIX second per line.
struct RequestLedger {
    path: PathBuf,
    stamps: Vec<i64>,
}

impl RequestLedger {
    fn open(cache_dir: &Path) -> Result<Self> {
        let path = cache_dir.join(LEDGER_FILE);
        let stamps = match fs::read_to_string(&path) {
            Ok(s) => s.lines().filter_map(|l| l.trim().parse().ok()).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        Ok(RequestLedger { path, stamps })
    }

    fn used_in_last_hour(&self, now: DateTime<Utc>) -> usize {
        let cutoff = now.timestamp() - 3600;
        self.stamps.iter().filter(|&&s| s > cutoff).count()
    }

    fn record(&mut self, now: DateTime<Utc>) -> Result<()> {
        let cutoff = now.timestamp() - 3600;
        self.stamps.retain(|&s| s > cutoff);
        self.stamps.push(now.timestamp());
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", now.timestamp()).map_err(|e| Error::io(&self.path, e))
    }
}

pub struct FetchClient<T, C> {
    cfg: FetchConfig,
    api_key: Option<String>,
    transport: T,
    clock: C,
}

impl FetchClient<ReqwestTransport, SystemClock> {
    /// Live client reading the credential from `NOWCAST_API_KEY`.
    pub fn from_env(cfg: FetchConfig) -> Result<Self> {
        let transport = ReqwestTransport::new(cfg.timeout)?;
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(FetchClient::new(cfg, key, transport, SystemClock))
    }
}

impl<T: Transport, C: Clock> FetchClient<T, C> {
    pub fn new(cfg: FetchConfig, api_key: Option<String>, transport: T, clock: C) -> Self {
        FetchClient {
            cfg,
            api_key,
            transport,
            clock,
        }
    }

    pub fn config(&self) -> &FetchConfig {
        &self.cfg
    }

    /// Downloads every file in `[from, to]` that is not already cached.
    pub fn fetch_frames(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<FetchOutcome> {
        self.cfg.validate()?;
        if from >= to {
            return Err(Error::InvalidConfig(format!("empty fetch window {from} .. {to}")));
        }
        fs::create_dir_all(&self.cfg.cache_dir).map_err(|e| Error::io(&self.cfg.cache_dir, e))?;
        let mut ledger = RequestLedger::open(&self.cfg.cache_dir)?;
        let mut out = FetchOutcome::default();
        let mut last_request: Option<DateTime<Utc>> = None;

        for name in self.cfg.window_files(from, to) {
            let path = self.cfg.cache_dir.join(&name);
            if path.is_file() {
                out.cache_hits += 1;
                out.files.push(path);
                continue;
            }
            let key = self
                .api_key
                .as_deref()
                .ok_or_else(|| FetchError::MissingCredential(API_KEY_ENV.into()))?;
            let url = format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), name);
            match self.download(&url, key, &mut ledger, &mut last_request, &mut out)? {
                Some(body) => {
                    write_atomic(&path, &body)?;
                    out.files.push(path);
                }
                None if out.partial => break,
                None => out.missing.push(name),
            }
        }
        Ok(out)
    }

    /// `Ok(None)` means 404 or budget exhaustion (`out.partial` set).
    fn download(
        &self,
        url: &str,
        key: &str,
        ledger: &mut RequestLedger,
        last_request: &mut Option<DateTime<Utc>>,
        out: &mut FetchOutcome,
    ) -> Result<Option<Vec<u8>>> {
        let headers = [(self.cfg.api_key_header.as_str(), key)];
        let mut backoff = self.cfg.retry.initial_backoff;
        let attempts = self.cfg.retry.max_attempts.max(1);
        let mut last_err = String::new();
        for attempt in 1..=attempts {
            if ledger.used_in_last_hour(self.clock.now()) >= self.cfg.budget_per_hour as usize {
                out.partial = true;
                return Ok(None);
            }
            if let Some(prev) = *last_request {
                let elapsed = (self.clock.now() - prev).to_std().unwrap_or_default();
                if elapsed < self.cfg.min_spacing {
                    self.clock.sleep(self.cfg.min_spacing - elapsed);
                }
            }
            let now = self.clock.now();
            ledger.record(now)?;
            *last_request = Some(now);
            out.requests += 1;
            match self.transport.get(url, &headers) {
                Ok(r) if r.status == 200 => return Ok(Some(r.body)),
                Ok(r) if r.status == 401 || r.status == 403 => {
                    return Err(FetchError::Auth {
                        status: r.status,
                        url: url.into(),
                    }
                    .into())
                }
                Ok(r) if r.status == 404 => return Ok(None),
                Ok(r) if r.status == 429 || r.status >= 500 => last_err = format!("HTTP {}", r.status),
                Ok(r) => {
                    return Err(FetchError::Http {
                        status: r.status,
                        url: url.into(),
                    }
                    .into())
                }
                Err(TransportError::Timeout(m)) => last_err = format!("timeout: {m}"),
                Err(TransportError::Other(m)) => last_err = m,
            }
            if attempt < attempts {
                self.clock.sleep(backoff);
                backoff = backoff.mul_f64(self.cfg.retry.multiplier);
            }
        }
        Err(FetchError::Exhausted {
            url: url.into(),
            attempts,
            last: last_err,
        }
        .into())
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Convenience wrapper using the live transport and the environment
/// credential.
pub fn fetch_frames(cfg: &FetchConfig, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<FetchOutcome> {
    FetchClient::from_env(cfg.clone())?.fetch_frames(from, to)
}
