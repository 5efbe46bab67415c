use super::{aggregate_plausibility, normalize_distribution, ScoringError, TokenScoreSet};
use crate::data::report::to_json_line;
use crate::data::{BeliefDistribution, BeliefRole, DataError, Instance};
use crate::reasoner::{score_choices, ReasonerRole, ReasonerState};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

/// Retries after the first attempt, for timeouts and refused connections.
pub const HTTP_RETRIES: usize = 2;
pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    File,
    Http,
    Builtin,
}

/// Where beliefs come from: a precomputed file, a scoring service, or a
/// builtin reasoner state (`location: None` means the zero state).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub location: Option<String>,
    pub timeout_ms: u64,
}

impl BackendSpec {
    pub fn builtin() -> Self {
        BackendSpec {
            kind: BackendKind::Builtin,
            location: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }

    pub fn file(path: impl Into<String>) -> Self {
        BackendSpec {
            kind: BackendKind::File,
            location: Some(path.into()),
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }

    pub fn http(url: impl Into<String>, timeout: Duration) -> Self {
        BackendSpec {
            kind: BackendKind::Http,
            location: Some(url.into()),
            timeout_ms: timeout.as_millis() as u64,
        }
    }

    /// Loads files and builds clients. Builtin specs without a location open
    /// as the zero reasoner.
    pub fn open(&self) -> Result<Backend, ScoringError> {
        let need_location = || {
            self.location
                .clone()
                .ok_or_else(|| ScoringError::InvalidBackendSpec(self.to_string()))
        };
        match self.kind {
            BackendKind::File => Ok(Backend::File(FileBackend::load(Path::new(&need_location()?))?)),
            BackendKind::Http => Ok(Backend::Http(HttpBackend::new(
                &need_location()?,
                Duration::from_millis(self.timeout_ms),
            )?)),
            BackendKind::Builtin => Ok(Backend::Builtin(match &self.location {
                Some(path) => ReasonerState::load(Path::new(path))?,
                None => ReasonerState::zero(ReasonerRole::Prior),
            })),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            BackendKind::File => "file",
            BackendKind::Http => "http",
            BackendKind::Builtin => "builtin",
        };
        match &self.location {
            Some(loc) => write!(f, "{kind}:{loc}"),
            None => f.write_str(kind),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = ScoringError;

    /// Parses `file:PATH`, `http:URL`, a bare `http://` URL, `builtin` or
    /// `builtin:STATE`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(BackendSpec::http(s, Duration::from_millis(DEFAULT_TIMEOUT_MS)));
        }
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k, Some(r)),
            None => (s, None),
        };
        let kind = match kind {
            "file" => BackendKind::File,
            "http" => BackendKind::Http,
            "builtin" => BackendKind::Builtin,
            _ => return Err(ScoringError::InvalidBackendSpec(s.to_string())),
        };
        let location = rest.filter(|r| !r.is_empty()).map(str::to_string);
        Ok(BackendSpec {
            kind,
            location,
            timeout_ms: DEFAULT_TIMEOUT_MS,
        })
    }
}

/// An opened backend. Scoring is read-only and safe to call from many threads.
#[derive(Debug)]
pub enum Backend {
    File(FileBackend),
    Http(HttpBackend),
    Builtin(ReasonerState),
}

impl Backend {
    pub fn score_instance(
        &self,
        instance: &Instance,
        role: BeliefRole,
    ) -> Result<BeliefDistribution, ScoringError> {
        let beliefs = match self {
            Backend::File(fb) => fb.get(&instance.id, role)?.clone(),
            Backend::Http(hb) => {
                let tokens = hb.score(instance)?;
                normalize_distribution(&aggregate_plausibility(&tokens)?, role)?
            }
            Backend::Builtin(state) => normalize_distribution(&score_choices(state, instance)?, role)?,
        };
        if beliefs.k() != instance.k() {
            return Err(ScoringError::ChoiceCountMismatch {
                instance_id: instance.id.clone(),
                expected: instance.k(),
                found: beliefs.k(),
            });
        }
        Ok(beliefs)
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::File(_) => BackendKind::File,
            Backend::Http(_) => BackendKind::Http,
            Backend::Builtin(_) => BackendKind::Builtin,
        }
    }
}

/// Beliefs loaded from a JSONL file, indexed by `(instance_id, role)`.
///
/// Each line holds either `probs` (a stored distribution) or
/// `per_choice_token_logprobs` (aggregated and normalized on load).
#[derive(Debug, Clone)]
pub struct FileBackend {
    path: PathBuf,
    index: HashMap<(String, BeliefRole), BeliefDistribution>,
    order: Vec<(String, BeliefRole)>,
}

#[derive(Deserialize)]
struct LogprobLine {
    instance_id: String,
    role: BeliefRole,
    per_choice_token_logprobs: Vec<Vec<f64>>,
}

impl FileBackend {
    pub fn load(path: &Path) -> Result<Self, ScoringError> {
        let file = File::open(path).map_err(|e| DataError::io(path, e))?;
        let malformed = |line: usize, message: String| ScoringError::MalformedBackendResponse {
            source_name: format!("{}:{line}", path.display()),
            message,
        };
        let mut index = HashMap::new();
        let mut order = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| DataError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value =
                serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
            let beliefs = if value.get("probs").is_some() {
                let b: BeliefDistribution =
                    serde_json::from_value(value).map_err(|e| malformed(line_no, e.to_string()))?;
                BeliefDistribution::new(b.instance_id, b.role, b.probs)?
            } else if value.get("per_choice_token_logprobs").is_some() {
                let l: LogprobLine =
                    serde_json::from_value(value).map_err(|e| malformed(line_no, e.to_string()))?;
                let tokens = TokenScoreSet {
                    instance_id: l.instance_id,
                    per_choice_token_logprobs: l.per_choice_token_logprobs,
                };
                normalize_distribution(&aggregate_plausibility(&tokens)?, l.role)?
            } else {
                return Err(malformed(
                    line_no,
                    "expected `probs` or `per_choice_token_logprobs`".into(),
                ));
            };
            let key = (beliefs.instance_id.clone(), beliefs.role);
            if index.contains_key(&key) {
                return Err(malformed(
                    line_no,
                    format!("duplicate entry for {:?} ({})", key.0, key.1),
                ));
            }
            order.push(key.clone());
            index.insert(key, beliefs);
        }
        Ok(FileBackend {
            path: path.to_path_buf(),
            index,
            order,
        })
    }

    pub fn get(&self, id: &str, role: BeliefRole) -> Result<&BeliefDistribution, ScoringError> {
        self.index
            .get(&(id.to_string(), role))
            .ok_or_else(|| ScoringError::MissingInstanceInFile {
                id: id.to_string(),
                role,
                path: self.path.clone(),
            })
    }

    /// Stored distributions of one role, in file order.
    pub fn beliefs(&self, role: BeliefRole) -> impl Iterator<Item = &BeliefDistribution> {
        self.order
            .iter()
            .filter(move |(_, r)| *r == role)
            .map(|key| &self.index[key])
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Writes distributions in the belief JSONL form the file backend reads.
pub fn write_beliefs(path: &Path, beliefs: &[BeliefDistribution]) -> Result<(), DataError> {
    let mut text = String::new();
    for b in beliefs {
        text.push_str(&to_json_line(b));
        text.push('\n');
    }
    crate::data::report::write_text(path, &text)
}

#[derive(Debug, Serialize)]
pub struct ScoreRequest<'a> {
    pub question: &'a str,
    pub choices: &'a [String],
    pub rationales: &'a [String],
}

#[derive(Deserialize)]
struct ScoreResponse {
    per_choice_token_logprobs: Vec<Vec<f64>>,
}

/// Client for a stateless `POST <base>/score` service.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    url: String,
    timeout: Duration,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base: &str, timeout: Duration) -> Result<Self, ScoringError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .connect_timeout(timeout)
            .build()
            .map_err(|e| ScoringError::BackendUnavailable {
                url: base.to_string(),
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpBackend {
            url: format!("{}/score", base.trim_end_matches('/')),
            timeout,
            client,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Posts one instance. Timeouts and connection failures are retried; any
    /// answered request (including non-200) is final.
    pub fn score(&self, instance: &Instance) -> Result<TokenScoreSet, ScoringError> {
        let request = ScoreRequest {
            question: &instance.question,
            choices: &instance.choices,
            rationales: &instance.rationales,
        };
        let attempts = HTTP_RETRIES + 1;
        let mut last_err = None;
        for attempt in 1..=attempts {
            match self.client.post(&self.url).json(&request).send() {
                Ok(resp) => return self.decode(instance, resp),
                Err(e) => {
                    log::debug!("{}: attempt {attempt}/{attempts} failed: {e}", self.url);
                    last_err = Some(e);
                }
            }
        }
        let err = last_err.expect("at least one attempt");
        if err.is_timeout() {
            Err(ScoringError::BackendTimeout {
                url: self.url.clone(),
                timeout: self.timeout,
                attempts,
            })
        } else {
            Err(ScoringError::BackendUnavailable {
                url: self.url.clone(),
                attempts,
                message: err.to_string(),
            })
        }
    }

    fn decode(
        &self,
        instance: &Instance,
        resp: reqwest::blocking::Response,
    ) -> Result<TokenScoreSet, ScoringError> {
        let malformed = |message: String| ScoringError::MalformedBackendResponse {
            source_name: self.url.clone(),
            message,
        };
        let status = resp.status();
        if status != reqwest::StatusCode::OK {
            return Err(malformed(format!("HTTP status {status}")));
        }
        let body: ScoreResponse = resp
            .json()
            .map_err(|e| malformed(format!("undecodable body: {e}")))?;
        if body.per_choice_token_logprobs.len() != instance.k() {
            return Err(malformed(format!(
                "{} choices scored, expected {}",
                body.per_choice_token_logprobs.len(),
                instance.k()
            )));
        }
        let tokens = TokenScoreSet {
            instance_id: instance.id.clone(),
            per_choice_token_logprobs: body.per_choice_token_logprobs,
        };
        tokens.validate().map_err(|e| malformed(e.to_string()))?;
        Ok(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_specs() {
        let s: BackendSpec = "file:/tmp/b.jsonl".parse().unwrap();
        assert_eq!(s.kind, BackendKind::File);
        assert_eq!(s.location.as_deref(), Some("/tmp/b.jsonl"));
        let s: BackendSpec = "http:http://127.0.0.1:9/x".parse().unwrap();
        assert_eq!(s.kind, BackendKind::Http);
        assert_eq!(s.location.as_deref(), Some("http://127.0.0.1:9/x"));
        let s: BackendSpec = "http://h:1".parse().unwrap();
        assert_eq!(s.kind, BackendKind::Http);
        let s: BackendSpec = "builtin".parse().unwrap();
        assert_eq!(s, BackendSpec::builtin());
        assert_eq!(s.to_string(), "builtin");
        assert!("gpu:0".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn file_and_http_need_location() {
        let spec: BackendSpec = "file".parse().unwrap();
        assert!(matches!(spec.open(), Err(ScoringError::InvalidBackendSpec(_))));
    }
}
