use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{fill_label_logprobs, ChatGateway, ChatRequest, ChatResponse, GatewayError, Role};

/// Minimal blocking HTTP surface used by [`RemoteGateway`].
pub trait HttpTransport: Send + Sync {
    /// POST a JSON body; returns the status code and response body, or a
    /// transport failure message with a transient flag.
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
    ) -> Result<(u16, String), (String, bool)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: u8,
    /// Ask the server to continue a trailing assistant message instead of
    /// opening a new turn (vLLM-style `continue_final_message`).
    #[serde(default)]
    pub assistant_prefill: bool,
}

fn default_top_logprobs() -> u8 {
    20
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            top_logprobs: default_top_logprobs(),
            assistant_prefill: false,
        }
    }
}

/// Chat-completions client for OpenAI-compatible endpoints.
pub struct RemoteGateway<T> {
    config: RemoteConfig,
    api_key: Option<String>,
    transport: T,
}

impl<T: HttpTransport> RemoteGateway<T> {
    /// Reads the API key from `config.api_key_env` when set.
    pub fn new(config: RemoteConfig, transport: T) -> Result<Self, GatewayError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::Auth(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        Ok(Self {
            config,
            api_key,
            transport,
        })
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    fn url(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.endpoint.trim_end_matches('/')
        )
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        if req.want_label_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(self.config.top_logprobs);
        }
        let trailing_assistant = req
            .messages
            .last()
            .is_some_and(|m| m.role == Role::Assistant);
        if self.config.assistant_prefill && trailing_assistant {
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
        body
    }

    fn parse(&self, req: &ChatRequest, body: &str) -> Result<ChatResponse, GatewayError> {
        let malformed = |what: &str| GatewayError::Transport {
            message: format!("malformed response: {what}"),
            transient: false,
        };
        let v: Value = serde_json::from_str(body).map_err(|e| malformed(&e.to_string()))?;
        let choice = v["choices"].get(0).ok_or_else(|| malformed("no choices"))?;
        let text = choice["message"]["content"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        let label_logprobs = match req.effective_labels() {
            None => None,
            Some(labels) => {
                let top = choice["logprobs"]["content"]
                    .get(0)
                    .and_then(|first| first["top_logprobs"].as_array())
                    .ok_or_else(|| GatewayError::LogprobsUnsupported {
                        model: self.config.model.clone(),
                    })?;
                let pairs: Vec<(String, f64)> = top
                    .iter()
                    .filter_map(|t| {
                        Some((t["token"].as_str()?.to_string(), t["logprob"].as_f64()?))
                    })
                    .collect();
                Some(map_top_logprobs(&pairs, labels))
            }
        };
        Ok(ChatResponse {
            text,
            label_logprobs,
            model_name: v["model"]
                .as_str()
                .unwrap_or(&self.config.model)
                .to_string(),
        })
    }
}

/// Map first-position top-logprob alternatives onto candidate labels. One
/// leading space is stripped from each token and the remainder must equal
/// the label exactly; unreported labels get the sentinel.
pub fn map_top_logprobs(top: &[(String, f64)], labels: &[char]) -> BTreeMap<char, f64> {
    let mut found: BTreeMap<char, f64> = BTreeMap::new();
    for (token, logprob) in top {
        let token = token.strip_prefix(' ').unwrap_or(token);
        let mut chars = token.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if labels.contains(&c) {
                let slot = found.entry(c).or_insert(f64::NEG_INFINITY);
                *slot = slot.max(*logprob);
            }
        }
    }
    fill_label_logprobs(&found, labels)
}

impl<T: HttpTransport> ChatGateway for RemoteGateway<T> {
    fn model_name(&self) -> &str {
        &self.config.model
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let body = self.request_body(req);
        let (status, text) = self
            .transport
            .post_json(&self.url(), self.api_key.as_deref(), &body)
            .map_err(|(message, transient)| GatewayError::Transport { message, transient })?;
        match status {
            200..=299 => self.parse(req, &text),
            401 | 403 => Err(GatewayError::Auth(format!("HTTP {status}: {text}"))),
            408 | 409 | 429 | 500..=599 => Err(GatewayError::Transport {
                message: format!("HTTP {status}: {text}"),
                transient: true,
            }),
            _ if req.want_label_logprobs && text.contains("logprobs") => {
                Err(GatewayError::LogprobsUnsupported {
                    model: self.config.model.clone(),
                })
            }
            _ => Err(GatewayError::InvalidRequest(format!(
                "HTTP {status}: {text}"
            ))),
        }
    }
}

#[cfg(feature = "remote")]
pub use reqwest_transport::ReqwestTransport;

#[cfg(feature = "remote")]
mod reqwest_transport {
    use std::time::Duration;

    use serde_json::Value;

    use super::HttpTransport;

    pub struct ReqwestTransport {
        client: reqwest::blocking::Client,
    }

    impl ReqwestTransport {
        pub fn new(timeout: Duration) -> Result<Self, String> {
            let client = reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .map_err(|e| e.to_string())?;
            Ok(Self { client })
        }
    }

    impl HttpTransport for ReqwestTransport {
        fn post_json(
            &self,
            url: &str,
            bearer: Option<&str>,
            body: &Value,
        ) -> Result<(u16, String), (String, bool)> {
            let mut request = self.client.post(url).json(body);
            if let Some(key) = bearer {
                request = request.bearer_auth(key);
            }
            let response = request.send().map_err(|e| {
                (
                    e.to_string(),
                    e.is_timeout() || e.is_connect() || e.is_request(),
                )
            })?;
            let status = response.status().as_u16();
            let text = response.text().map_err(|e| (e.to_string(), true))?;
            Ok((status, text))
        }
    }
}
