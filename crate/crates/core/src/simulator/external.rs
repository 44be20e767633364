//! Search-engine suggestion client. Online mode issues
//! `GET endpoint?client=..&q=..` and expects `[query, [suggestion, ...]]`;
//! offline mode answers only from a fixture map and never opens a socket.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Overrides the configured endpoint when set.
pub const ENDPOINT_ENV: &str = "CIRCLE_SUGGEST_ENDPOINT";

#[derive(Debug, thiserror::Error)]
pub enum ExternalError {
    #[error("transport error contacting {url}: {reason}")]
    Transport { url: String, reason: String },
    #[error("HTTP status {status} from {url}")]
    Status { url: String, status: u16 },
    #[error("unparseable suggestion response: {0}")]
    Parse(String),
    #[error("online mode needs an endpoint (config or {ENDPOINT_ENV})")]
    NoEndpoint,
    #[error("fixture file {path}: {reason}")]
    Fixture { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalConfig {
    pub endpoint: Option<String>,
    /// Value of the `client` query parameter.
    pub client: String,
    pub offline: bool,
    /// JSON map from query to suggestion list.
    pub fixtures: Option<PathBuf>,
    /// Directory of cached responses, one file per query.
    pub cache_dir: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self { endpoint: None, client: "firefox".into(), offline: true, fixtures: None, cache_dir: None, timeout_secs: 10 }
    }
}

/// Parses `[query, [suggestion, ...], ...]`; trailing elements are ignored.
pub fn parse_response(body: &str) -> Result<Vec<String>, ExternalError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| ExternalError::Parse(e.to_string()))?;
    let list = v
        .as_array()
        .and_then(|a| a.get(1))
        .and_then(|s| s.as_array())
        .ok_or_else(|| ExternalError::Parse("expected [query, [suggestions...]]".into()))?;
    list.iter()
        .map(|s| s.as_str().map(str::to_owned).ok_or_else(|| ExternalError::Parse("non-string suggestion".into())))
        .collect()
}

pub fn load_fixtures(path: &Path) -> Result<BTreeMap<String, Vec<String>>, ExternalError> {
    let text = fs::read_to_string(path).map_err(|source| ExternalError::Io { path: path.to_owned(), source })?;
    serde_json::from_str(&text).map_err(|e| ExternalError::Fixture { path: path.to_owned(), reason: e.to_string() })
}

pub struct ExternalClient {
    cfg: ExternalConfig,
    endpoint: Option<String>,
    fixtures: BTreeMap<String, Vec<String>>,
    memo: Mutex<HashMap<String, Vec<String>>>,
    network_calls: AtomicU64,
    agent: ureq::Agent,
}

impl std::fmt::Debug for ExternalClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalClient")
            .field("endpoint", &self.endpoint)
            .field("offline", &self.cfg.offline)
            .field("network_calls", &self.network_calls())
            .finish()
    }
}

impl ExternalClient {
    /// Resolves the endpoint from `CIRCLE_SUGGEST_ENDPOINT`, then the config.
    pub fn new(cfg: ExternalConfig) -> Result<Self, ExternalError> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()).or_else(|| cfg.endpoint.clone());
        Self::with_endpoint(cfg, endpoint)
    }

    pub fn with_endpoint(cfg: ExternalConfig, endpoint: Option<String>) -> Result<Self, ExternalError> {
        if !cfg.offline && endpoint.is_none() {
            return Err(ExternalError::NoEndpoint);
        }
        let fixtures = match &cfg.fixtures {
            Some(p) => load_fixtures(p)?,
            None => BTreeMap::new(),
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, endpoint, fixtures, memo: Mutex::new(HashMap::new()), network_calls: AtomicU64::new(0), agent })
    }

    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    fn cache_path(&self, query: &str) -> Option<PathBuf> {
        let dir = self.cfg.cache_dir.as_ref()?;
        Some(dir.join(format!("{}.json", hex::encode(Sha256::digest(query.as_bytes())))))
    }

    /// Suggestions for `query`; an empty list is a valid answer.
    pub fn suggest(&self, query: &str) -> Result<Vec<String>, ExternalError> {
        if self.cfg.offline {
            return Ok(self.fixtures.get(query).cloned().unwrap_or_default());
        }
        if let Some(hit) = self.memo.lock().expect("memo lock").get(query) {
            return Ok(hit.clone());
        }
        let cache = self.cache_path(query);
        if let Some(p) = cache.as_ref().filter(|p| p.exists()) {
            let text = fs::read_to_string(p).map_err(|source| ExternalError::Io { path: p.clone(), source })?;
            let s: Vec<String> = serde_json::from_str(&text).map_err(|e| ExternalError::Parse(e.to_string()))?;
            self.memo.lock().expect("memo lock").insert(query.to_owned(), s.clone());
            return Ok(s);
        }
        let s = self.fetch(query)?;
        if let Some(p) = cache {
            let io = |source| ExternalError::Io { path: p.clone(), source };
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(io)?;
            }
            fs::write(&p, serde_json::to_string(&s).expect("serialisable")).map_err(io)?;
        }
        self.memo.lock().expect("memo lock").insert(query.to_owned(), s.clone());
        Ok(s)
    }

    fn fetch(&self, query: &str) -> Result<Vec<String>, ExternalError> {
        let url = self.endpoint.clone().ok_or(ExternalError::NoEndpoint)?;
        self.network_calls.fetch_add(1, Ordering::Relaxed);
        let transport = |e: ureq::Error| ExternalError::Transport { url: url.clone(), reason: e.to_string() };
        let mut resp = self
            .agent
            .get(&url)
            .query("client", &self.cfg.client)
            .query("q", query)
            .call()
            .map_err(transport)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(ExternalError::Status { url, status });
        }
        let body = resp.body_mut().read_to_string().map_err(transport)?;
        parse_response(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;

    /// Serves `responses` in order, one connection each, and returns the
    /// request lines it saw.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/complete", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                seen.push(line.trim().to_owned());
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    if h == "\r\n" || h.is_empty() {
                        break;
                    }
                }
                write!(stream, "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len())
                    .unwrap();
            }
            seen
        });
        (url, handle)
    }

    fn online(cache_dir: Option<PathBuf>) -> ExternalConfig {
        ExternalConfig { offline: false, cache_dir, ..Default::default() }
    }

    #[test]
    fn parses_payload() {
        assert_eq!(parse_response(r#"["jag",["jaguar car","jaguar animal"]]"#).unwrap(), ["jaguar car", "jaguar animal"]);
        assert_eq!(parse_response(r#"["jag",[]]"#).unwrap(), Vec::<String>::new());
        assert!(matches!(parse_response("{}"), Err(ExternalError::Parse(_))));
        assert!(matches!(parse_response("not json"), Err(ExternalError::Parse(_))));
    }

    #[test]
    fn offline_fixture_echo() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fx.json");
        fs::write(&p, r#"{"jaguar": ["jaguar car", "jaguar animal"]}"#).unwrap();
        let c = ExternalClient::with_endpoint(ExternalConfig { fixtures: Some(p), ..Default::default() }, None).unwrap();
        assert_eq!(c.suggest("jaguar").unwrap().len(), 2);
        assert!(c.suggest("other").unwrap().is_empty());
        assert_eq!(c.network_calls(), 0);
    }

    #[test]
    fn online_fetch_then_cache() {
        let dir = tempfile::tempdir().unwrap();
        let (url, h) = serve(vec![(200, r#"["jaguar",["jaguar car"]]"#.into())]);
        let c = ExternalClient::with_endpoint(online(Some(dir.path().into())), Some(url.clone())).unwrap();
        assert_eq!(c.suggest("jaguar").unwrap(), ["jaguar car"]);
        assert_eq!(c.suggest("jaguar").unwrap(), ["jaguar car"]);
        assert_eq!(c.network_calls(), 1);
        let seen = h.join().unwrap();
        assert!(seen[0].contains("client=firefox") && seen[0].contains("q=jaguar"), "{seen:?}");
        // a fresh client reads the disk cache instead of the network
        let c2 = ExternalClient::with_endpoint(online(Some(dir.path().into())), Some(url)).unwrap();
        assert_eq!(c2.suggest("jaguar").unwrap(), ["jaguar car"]);
        assert_eq!(c2.network_calls(), 0);
    }

    #[test]
    fn distinguishes_failures() {
        let (url, h) = serve(vec![(500, "oops".into()), (200, "garbage".into())]);
        let c = ExternalClient::with_endpoint(online(None), Some(url)).unwrap();
        assert!(matches!(c.suggest("a"), Err(ExternalError::Status { status: 500, .. })));
        assert!(matches!(c.suggest("b"), Err(ExternalError::Parse(_))));
        h.join().unwrap();
        let dead = ExternalClient::with_endpoint(online(None), Some("http://127.0.0.1:1/x".into())).unwrap();
        assert!(matches!(dead.suggest("a"), Err(ExternalError::Transport { .. })));
        assert!(matches!(ExternalClient::with_endpoint(online(None), None), Err(ExternalError::NoEndpoint)));
    }
}
