//! Chat-completion gateway: request/response types, a scripted mock, a
//! response cache, retry with exponential backoff, an in-flight limiter and
//! an OpenAI-compatible remote client.

mod cache;
mod limit;
mod mock;
mod remote;
mod retry;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, CachedGateway};
pub use limit::InFlightLimit;
pub use mock::{Matcher, MockGateway, MockReply, MockRule, MockScript};
#[cfg(feature = "remote")]
pub use remote::ReqwestTransport;
pub use remote::{map_top_logprobs, HttpTransport, RemoteConfig, RemoteGateway};
pub use retry::{RetryPolicy, Retrying};

/// Log-probability assigned to candidate labels the endpoint did not report.
/// Sorts below any real log-probability.
pub const LABEL_SENTINEL: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Ordered role-tagged messages.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChatPrompt {
    pub messages: Vec<ChatMessage>,
}

impl ChatPrompt {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self { messages }
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Canonical plain-text rendering: each message as `<|role|>`, a newline,
    /// the content and a newline. Used for golden files and mock matching.
    pub fn render(&self) -> String {
        render_messages(&self.messages)
    }
}

pub fn render_messages(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str("<|");
        out.push_str(m.role.as_str());
        out.push_str("|>\n");
        out.push_str(&m.content);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub want_label_logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_labels: Option<Vec<char>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(prompt: &ChatPrompt, temperature: f64, max_new_tokens: u32) -> Self {
        Self {
            messages: prompt.messages.clone(),
            temperature,
            max_new_tokens,
            want_label_logprobs: false,
            candidate_labels: None,
            seed: None,
        }
    }

    pub fn with_label_logprobs(mut self, labels: Vec<char>) -> Self {
        self.want_label_logprobs = true;
        self.candidate_labels = Some(labels);
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: String| Err(GatewayError::InvalidRequest(m));
        if self.messages.is_empty() {
            return invalid("no messages".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return invalid(format!("temperature {} is not >= 0", self.temperature));
        }
        if self.max_new_tokens == 0 {
            return invalid("max_new_tokens must be positive".into());
        }
        let last = self.messages.len() - 1;
        for (i, m) in self.messages.iter().enumerate() {
            let trailing_cue = i == last && m.role == Role::Assistant;
            if m.content.is_empty() && !trailing_cue {
                return invalid(format!("message {i} is empty"));
            }
        }
        if self.want_label_logprobs {
            match &self.candidate_labels {
                Some(labels) if !labels.is_empty() => {}
                _ => return invalid("label logprobs requested without candidate labels".into()),
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        render_messages(&self.messages)
    }

    /// Candidate labels that matter for the response (none unless logprobs
    /// were requested).
    pub fn effective_labels(&self) -> Option<&[char]> {
        if self.want_label_logprobs {
            self.candidate_labels.as_deref()
        } else {
            None
        }
    }

    /// Content hash over model name, messages, decoding parameters and
    /// candidate labels.
    pub fn cache_key(&self, model_name: &str) -> String {
        #[derive(Serialize)]
        struct KeyParts<'a> {
            model_name: &'a str,
            messages: &'a [ChatMessage],
            temperature: f64,
            max_new_tokens: u32,
            candidate_labels: Option<&'a [char]>,
        }
        let parts = KeyParts {
            model_name,
            messages: &self.messages,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            candidate_labels: self.effective_labels(),
        };
        let bytes = serde_json::to_vec(&parts).expect("key parts serialize");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_logprobs: Option<BTreeMap<char, f64>>,
    pub model_name: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {message}")]
    Transport { message: String, transient: bool },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("model {model} does not report token log-probabilities")]
    LogprobsUnsupported { model: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<GatewayError>,
    },
}

impl GatewayError {
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport {
                transient: true,
                ..
            }
        )
    }

    /// True for the missing-logprob-support error, also when wrapped.
    pub fn is_logprobs_unsupported(&self) -> bool {
        match self {
            GatewayError::LogprobsUnsupported { .. } => true,
            GatewayError::RetriesExhausted { last, .. } => last.is_logprobs_unsupported(),
            _ => false,
        }
    }
}

pub trait ChatGateway: Send + Sync {
    fn model_name(&self) -> &str;
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<G: ChatGateway + ?Sized> ChatGateway for Arc<G> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat(req)
    }
}

impl<G: ChatGateway + ?Sized> ChatGateway for Box<G> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat(req)
    }
}

impl<G: ChatGateway + ?Sized> ChatGateway for &G {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat(req)
    }
}

/// First standalone occurrence of one of `labels` in `text`: an uppercase
/// letter not adjacent to other alphanumerics. `"Answer: C"` yields `C`.
pub fn first_label_token(text: &str, labels: &[char]) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    chars.iter().enumerate().find_map(|(i, &c)| {
        let standalone = (i == 0 || !chars[i - 1].is_alphanumeric())
            && chars.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
        (standalone && labels.contains(&c)).then_some(c)
    })
}

/// Restrict a label→logprob map to `labels`, filling gaps with the sentinel.
pub fn fill_label_logprobs(found: &BTreeMap<char, f64>, labels: &[char]) -> BTreeMap<char, f64> {
    labels
        .iter()
        .map(|l| (*l, found.get(l).copied().unwrap_or(LABEL_SENTINEL)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> ChatRequest {
        ChatRequest::new(
            &ChatPrompt::new(vec![ChatMessage::system("s"), ChatMessage::user("u")]),
            0.0,
            16,
        )
    }

    #[test]
    fn key_depends_on_every_part() {
        let base = req();
        let k = base.cache_key("m");
        assert_eq!(k, req().cache_key("m"));
        assert_ne!(k, base.cache_key("other"));
        let mut t = req();
        t.temperature = 0.5;
        assert_ne!(k, t.cache_key("m"));
        let mut n = req();
        n.max_new_tokens = 17;
        assert_ne!(k, n.cache_key("m"));
        let l = req().with_label_logprobs(vec!['A', 'B']);
        assert_ne!(k, l.cache_key("m"));
        let mut msg = req();
        msg.messages[1].content.push('!');
        assert_ne!(k, msg.cache_key("m"));
    }

    #[test]
    fn validation() {
        assert!(req().validate().is_ok());
        let mut r = req();
        r.want_label_logprobs = true;
        assert!(r.validate().is_err());
        let mut r = req();
        r.messages.push(ChatMessage::assistant(""));
        assert!(r.validate().is_ok());
        r.messages.push(ChatMessage::user(""));
        assert!(r.validate().is_err());
    }

    #[test]
    fn label_tokens() {
        let labels = ['A', 'B', 'C'];
        assert_eq!(first_label_token("Answer: C", &labels), Some('C'));
        assert_eq!(first_label_token("B. because", &labels), Some('B'));
        assert_eq!(first_label_token("(A)", &labels), Some('A'));
        assert_eq!(first_label_token("Answer: D", &labels), None);
        assert_eq!(first_label_token("", &labels), None);
    }

    #[test]
    fn rendering() {
        let p = ChatPrompt::new(vec![ChatMessage::user("hi"), ChatMessage::assistant("")]);
        assert_eq!(p.render(), "<|user|>\nhi\n<|assistant|>\n\n");
    }

    #[test]
    fn response_json_uses_letter_keys() {
        let r = ChatResponse {
            text: "x".into(),
            label_logprobs: Some(BTreeMap::from([('A', -0.5), ('B', LABEL_SENTINEL)])),
            model_name: "m".into(),
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"A\":-0.5"), "{json}");
        assert_eq!(serde_json::from_str::<ChatResponse>(&json).unwrap(), r);
    }
}
