//! Text-generation backends: scripted fixtures, closures, and a remote
//! chat-completions client.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::embed::HashingEmbedder;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend request failed: {0}")]
    Request(String),
    #[error("backend returned an unusable response: {0}")]
    Response(String),
    #[error("scripted backend has no response left for this prompt")]
    Exhausted,
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BackendError {
    /// Transient failures worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Request(_) | BackendError::Response(_))
    }
}

/// A language model that completes prompts and embeds text.
pub trait GenerationBackend: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, BackendError>;

    /// Fixed-dimension embedding. Defaults to the hashing embedder.
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(HashingEmbedder::default().embed(text))
    }

    /// Maximum concurrent requests callers should issue.
    fn max_in_flight(&self) -> usize {
        1
    }

    /// Points the backend at a new model checkpoint.
    fn load_checkpoint(&self, _checkpoint: &str) -> Result<(), BackendError> {
        Ok(())
    }
}

impl<T: GenerationBackend + ?Sized> GenerationBackend for Arc<T> {
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).generate(prompt)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
    fn load_checkpoint(&self, checkpoint: &str) -> Result<(), BackendError> {
        (**self).load_checkpoint(checkpoint)
    }
}

impl<T: GenerationBackend + ?Sized> GenerationBackend for Box<T> {
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).generate(prompt)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
    fn load_checkpoint(&self, checkpoint: &str) -> Result<(), BackendError> {
        (**self).load_checkpoint(checkpoint)
    }
}

/// One line of a scripted fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub response: String,
    /// Entries marked `repeat` are not consumed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repeat: bool,
}

impl FixtureEntry {
    pub fn any(response: impl Into<String>) -> Self {
        Self {
            pattern: None,
            response: response.into(),
            repeat: false,
        }
    }

    pub fn matching(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pattern: Some(pattern.into()),
            response: response.into(),
            repeat: false,
        }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }
}

/// Replays fixture responses in order.
///
/// Each call takes the earliest remaining entry whose `match` substring
/// occurs in the prompt (entries without `match` accept any prompt) and
/// consumes it unless it is marked `repeat`.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    entries: Mutex<VecDeque<FixtureEntry>>,
    prompts: Mutex<Vec<String>>,
    delay: Duration,
    checkpoint: Mutex<Option<String>>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        Self {
            entries: Mutex::new(entries.into_iter().collect()),
            ..Self::default()
        }
    }

    /// Responses returned in order regardless of prompt.
    pub fn from_responses<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self::new(responses.into_iter().map(FixtureEntry::any))
    }

    pub fn from_jsonl(text: &str) -> Result<Self, BackendError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(line)
                .map_err(|e| BackendError::Config(format!("fixture line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Sleeps for `delay` before every response.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    /// Every prompt received so far.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }

    pub fn checkpoint(&self) -> Option<String> {
        self.checkpoint.lock().unwrap().clone()
    }
}

impl GenerationBackend for ScriptedBackend {
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let mut entries = self.entries.lock().unwrap();
        let idx = entries
            .iter()
            .position(|e| e.pattern.as_deref().is_none_or(|p| prompt.contains(p)))
            .ok_or(BackendError::Exhausted)?;
        if entries[idx].repeat {
            return Ok(entries[idx].response.clone());
        }
        Ok(entries.remove(idx).expect("index in bounds").response)
    }

    fn load_checkpoint(&self, checkpoint: &str) -> Result<(), BackendError> {
        *self.checkpoint.lock().unwrap() = Some(checkpoint.to_string());
        Ok(())
    }
}

type GenerateFn = dyn Fn(&str) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure; handy for programmatic scripts and fuzzing.
pub struct FnBackend {
    generate: Box<GenerateFn>,
    delay: Duration,
}

impl FnBackend {
    pub fn new(f: impl Fn(&str) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        Self {
            generate: Box::new(f),
            delay: Duration::ZERO,
        }
    }

    /// Always answers with the same text.
    pub fn constant(response: impl Into<String>) -> Self {
        let response = response.into();
        Self::new(move |_| Ok(response.clone()))
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

impl std::fmt::Debug for FnBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnBackend").field("delay", &self.delay).finish()
    }
}

impl GenerationBackend for FnBackend {
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        (self.generate)(prompt)
    }
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_in_flight() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub temperature: Option<f64>,
}

/// Chat-completions client over HTTP.
pub struct RemoteBackend {
    config: RemoteConfig,
    model: RwLock<String>,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("base_url", &self.config.base_url)
            .field("model", &*self.model.read().unwrap())
            .finish()
    }
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self {
            model: RwLock::new(config.model.clone()),
            config,
            api_key,
            agent,
        })
    }

    pub fn model(&self) -> String {
        self.model.read().unwrap().clone()
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }
}

/// Pulls the generated text out of a chat- or text-completions response.
fn completion_text(body: &Value) -> Option<&str> {
    let choice = body.get("choices")?.get(0)?;
    choice
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .or_else(|| choice.get("text").and_then(Value::as_str))
}

impl GenerationBackend for RemoteBackend {
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        let mut body = json!({
            "model": self.model(),
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(n) = self.config.max_tokens {
            body["max_tokens"] = json!(n);
        }
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        let mut req = self.agent.post(&self.endpoint());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| BackendError::Request(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Request(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Request(format!("HTTP {status}: {text}")));
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Response(e.to_string()))?;
        completion_text(&value)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Response("no completion text in response".into()))
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight.max(1)
    }

    fn load_checkpoint(&self, checkpoint: &str) -> Result<(), BackendError> {
        *self.model.write().unwrap() = checkpoint.to_string();
        Ok(())
    }
}

/// Backend selection as stored in a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BackendConfig {
    Mock {
        fixture: PathBuf,
        #[serde(default)]
        delay_ms: u64,
    },
    Remote(RemoteConfig),
}

impl BackendConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<(Self, PathBuf), BackendError> {
        let path = path.as_ref();
        let config: Self = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((config, base))
    }

    /// Instantiates the backend. Relative fixture paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Arc<dyn GenerationBackend>, BackendError> {
        match self {
            BackendConfig::Mock { fixture, delay_ms } => {
                let path = if fixture.is_absolute() {
                    fixture.clone()
                } else {
                    base_dir.join(fixture)
                };
                Ok(Arc::new(
                    ScriptedBackend::from_file(path)?.with_delay(Duration::from_millis(*delay_ms)),
                ))
            }
            BackendConfig::Remote(cfg) => Ok(Arc::new(RemoteBackend::new(cfg.clone())?)),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Arc<dyn GenerationBackend>, BackendError> {
        let (config, base) = Self::from_file(path)?;
        config.build(&base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_backend_consumes_in_order_with_matching() {
        let b = ScriptedBackend::new([
            FixtureEntry::matching("judge", "true"),
            FixtureEntry::any("first"),
            FixtureEntry::any("second"),
        ]);
        assert_eq!(b.generate("hello").unwrap(), "first");
        assert_eq!(b.generate("please judge this").unwrap(), "true");
        assert_eq!(b.generate("judge again").unwrap(), "second");
        assert!(matches!(b.generate("x"), Err(BackendError::Exhausted)));
        assert_eq!(b.prompts().len(), 4);
    }

    #[test]
    fn repeating_entries_are_not_consumed() {
        let b = ScriptedBackend::from_jsonl(
            "{\"match\":\"why\",\"response\":\"because\",\"repeat\":true}\n{\"response\":\"once\"}",
        )
        .unwrap();
        for _ in 0..3 {
            assert_eq!(b.generate("why?").unwrap(), "because");
        }
        assert_eq!(b.generate("x").unwrap(), "once");
        assert_eq!(b.remaining(), 1);
    }

    #[test]
    fn fixture_jsonl_parsing() {
        let b = ScriptedBackend::from_jsonl(
            "{\"match\": \"hot\", \"response\": \"cool it\"}\n\n{\"response\": \"ok\"}\n",
        )
        .unwrap();
        assert_eq!(b.remaining(), 2);
        assert_eq!(b.generate("so hot").unwrap(), "cool it");
        assert!(ScriptedBackend::from_jsonl("{not json}").is_err());
    }

    #[test]
    fn default_embedding_is_hashing() {
        let b = FnBackend::constant("x");
        assert_eq!(b.embed("a b").unwrap().len(), 256);
        assert_eq!(b.max_in_flight(), 1);
    }

    #[test]
    fn completion_text_shapes() {
        let chat = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(completion_text(&chat), Some("hi"));
        let text = json!({"choices": [{"text": "yo"}]});
        assert_eq!(completion_text(&text), Some("yo"));
        assert_eq!(completion_text(&json!({})), None);
    }

    #[test]
    fn backend_config_parses_both_variants() {
        let mock: BackendConfig =
            serde_json::from_str(r#"{"type":"mock","fixture":"f.jsonl"}"#).unwrap();
        assert_eq!(
            mock,
            BackendConfig::Mock {
                fixture: "f.jsonl".into(),
                delay_ms: 0
            }
        );
        let remote: BackendConfig = serde_json::from_str(
            r#"{"type":"remote","base_url":"http://x/v1","model":"m","api_key_env":"K"}"#,
        )
        .unwrap();
        match remote {
            BackendConfig::Remote(cfg) => {
                assert_eq!(cfg.timeout_secs, 60);
                assert_eq!(cfg.api_key_env.as_deref(), Some("K"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_api_key_variable_is_a_config_error() {
        let cfg = RemoteConfig {
            base_url: "http://127.0.0.1:9".into(),
            model: "m".into(),
            api_key_env: Some("THOUGHTFUL_TEST_UNSET_KEY_VAR".into()),
            timeout_secs: 1,
            max_in_flight: 2,
            max_tokens: None,
            temperature: None,
        };
        assert!(matches!(RemoteBackend::new(cfg), Err(BackendError::Config(_))));
    }
}
