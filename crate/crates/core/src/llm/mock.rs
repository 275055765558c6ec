use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    fill_label_logprobs, first_label_token, hex_digest, ChatGateway, ChatRequest, ChatResponse,
    GatewayError, LABEL_SENTINEL,
};

/// How a rule selects requests, applied to the canonical rendering of the
/// request messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Exact(String),
    Contains(String),
}

impl Matcher {
    fn matches(&self, rendered: &str) -> bool {
        match self {
            Matcher::Exact(s) => rendered == s,
            Matcher::Contains(s) => rendered.contains(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockReply {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_logprobs: Option<BTreeMap<char, f64>>,
}

impl MockReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label_logprobs: None,
        }
    }

    pub fn with_logprobs(mut self, logprobs: impl IntoIterator<Item = (char, f64)>) -> Self {
        self.label_logprobs = Some(logprobs.into_iter().collect());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(flatten)]
    pub matcher: Matcher,
    #[serde(flatten)]
    pub reply: MockReply,
}

impl MockRule {
    pub fn contains(needle: impl Into<String>, reply: MockReply) -> Self {
        Self {
            matcher: Matcher::Contains(needle.into()),
            reply,
        }
    }

    pub fn exact(rendered: impl Into<String>, reply: MockReply) -> Self {
        Self {
            matcher: Matcher::Exact(rendered.into()),
            reply,
        }
    }
}

fn default_model() -> String {
    "mock".to_string()
}

fn default_true() -> bool {
    true
}

/// JSON script for a [`MockGateway`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub fallback_seed: u64,
    #[serde(default = "default_true")]
    pub supports_logprobs: bool,
    #[serde(default)]
    pub rules: Vec<MockRule>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            model: default_model(),
            fallback_seed: 0,
            supports_logprobs: true,
            rules: Vec::new(),
        }
    }
}

/// Deterministic scripted gateway. The first matching rule answers; anything
/// unmatched gets a fallback derived from the seed and the request hash.
#[derive(Debug)]
pub struct MockGateway {
    script: MockScript,
    calls: AtomicUsize,
}

impl MockGateway {
    pub fn new(rules: Vec<MockRule>, fallback_seed: u64) -> Self {
        Self::from_script(MockScript {
            rules,
            fallback_seed,
            ..MockScript::default()
        })
    }

    pub fn from_script(script: MockScript) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
        }
    }

    /// Simulate an endpoint that cannot return token log-probabilities.
    pub fn without_logprobs(mut self) -> Self {
        self.script.supports_logprobs = false;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn fallback(&self, req: &ChatRequest) -> (String, BTreeMap<char, f64>) {
        let key = req.cache_key(&self.script.model);
        let digest = hex_digest(format!("{}:{key}", self.script.fallback_seed).as_bytes());
        let text = format!("mock response {}", &digest[..12]);
        let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = req.effective_labels().unwrap_or(&[]);
        let uniform = -(labels.len().max(1) as f64).ln();
        let logprobs = labels
            .iter()
            .map(|&l| (l, uniform + rng.random_range(-0.01..0.01)))
            .collect();
        (text, logprobs)
    }
}

impl ChatGateway for MockGateway {
    fn model_name(&self) -> &str {
        &self.script.model
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        if req.want_label_logprobs && !self.script.supports_logprobs {
            return Err(GatewayError::LogprobsUnsupported {
                model: self.script.model.clone(),
            });
        }
        let rendered = req.render();
        let rule = self
            .script
            .rules
            .iter()
            .find(|r| r.matcher.matches(&rendered));
        let (text, label_logprobs) = match rule {
            Some(rule) => {
                let text = rule.reply.text.clone();
                let logprobs = req.effective_labels().map(|labels| {
                    match &rule.reply.label_logprobs {
                        Some(map) => fill_label_logprobs(map, labels),
                        // Derive from the scripted text: its label is certain.
                        None => match first_label_token(&text, labels) {
                            Some(found) => labels
                                .iter()
                                .map(|&l| (l, if l == found { 0.0 } else { LABEL_SENTINEL }))
                                .collect(),
                            None => self.fallback(req).1,
                        },
                    }
                });
                (text, logprobs)
            }
            None => {
                let (text, logprobs) = self.fallback(req);
                (text, req.want_label_logprobs.then_some(logprobs))
            }
        };
        Ok(ChatResponse {
            text,
            label_logprobs,
            model_name: self.script.model.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, ChatPrompt};

    fn request(user: &str) -> ChatRequest {
        ChatRequest::new(
            &ChatPrompt::new(vec![
                ChatMessage::user(user),
                ChatMessage::assistant("Answer:"),
            ]),
            0.0,
            8,
        )
    }

    #[test]
    fn substring_rule_answers() {
        let gw = MockGateway::new(
            vec![MockRule::contains(
                "Question:\nQ1",
                MockReply::text("Answer: B"),
            )],
            0,
        );
        let resp = gw
            .chat(&request("Question:\nQ1\nChoices:\nA. x\nB. y"))
            .unwrap();
        assert_eq!(resp.text, "Answer: B");
        assert_eq!(gw.calls(), 1);
    }

    #[test]
    fn first_matching_rule_wins() {
        let gw = MockGateway::new(
            vec![
                MockRule::contains("Q1", MockReply::text("first")),
                MockRule::contains("Question", MockReply::text("second")),
            ],
            0,
        );
        assert_eq!(gw.chat(&request("Question:\nQ1")).unwrap().text, "first");
        assert_eq!(gw.chat(&request("Question:\nQ2")).unwrap().text, "second");
    }

    #[test]
    fn exact_rule_uses_full_rendering() {
        let r = request("hello");
        let gw = MockGateway::new(
            vec![MockRule::exact(r.render(), MockReply::text("exact"))],
            0,
        );
        assert_eq!(gw.chat(&r).unwrap().text, "exact");
        assert_ne!(gw.chat(&request("hello!")).unwrap().text, "exact");
    }

    #[test]
    fn fallback_is_stable_and_seeded() {
        let a = MockGateway::new(vec![], 3);
        let b = MockGateway::new(vec![], 3);
        let c = MockGateway::new(vec![], 4);
        let r = request("unmatched").with_label_logprobs(vec!['A', 'B', 'C']);
        let ra = a.chat(&r).unwrap();
        assert_eq!(ra, b.chat(&r).unwrap());
        assert_eq!(ra, a.chat(&r).unwrap());
        assert_ne!(ra, c.chat(&r).unwrap());
        let lp = ra.label_logprobs.unwrap();
        assert_eq!(lp.len(), 3);
        for v in lp.values() {
            assert!((v + 3f64.ln()).abs() <= 0.01);
        }
    }

    #[test]
    fn scripted_logprobs_fill_missing_labels() {
        let gw = MockGateway::new(
            vec![MockRule::contains(
                "Q",
                MockReply::text("B").with_logprobs([('B', -0.3)]),
            )],
            0,
        );
        let resp = gw
            .chat(&request("Q").with_label_logprobs(vec!['A', 'B']))
            .unwrap();
        assert_eq!(
            resp.label_logprobs.unwrap(),
            BTreeMap::from([('A', LABEL_SENTINEL), ('B', -0.3)])
        );
    }

    #[test]
    fn logprobs_derived_from_scripted_text() {
        let gw = MockGateway::new(vec![MockRule::contains("Q", MockReply::text(" C"))], 0);
        let resp = gw
            .chat(&request("Q").with_label_logprobs(vec!['A', 'B', 'C']))
            .unwrap();
        assert_eq!(
            resp.label_logprobs.unwrap(),
            BTreeMap::from([('A', LABEL_SENTINEL), ('B', LABEL_SENTINEL), ('C', 0.0)])
        );
    }

    #[test]
    fn unsupported_logprobs() {
        let gw = MockGateway::new(vec![], 0).without_logprobs();
        let err = gw
            .chat(&request("Q").with_label_logprobs(vec!['A']))
            .unwrap_err();
        assert!(err.is_logprobs_unsupported());
        assert!(gw.chat(&request("Q")).is_ok());
    }

    #[test]
    fn script_json_shape() {
        let script: MockScript = serde_json::from_str(
            r#"{"fallback_seed": 5, "rules": [
                {"contains": "Q1", "text": "Answer: A", "label_logprobs": {"A": -0.1}},
                {"exact": "<|user|>\nx\n", "text": "y"}
            ]}"#,
        )
        .unwrap();
        assert_eq!(script.model, "mock");
        assert_eq!(script.rules.len(), 2);
        assert_eq!(script.rules[0].matcher, Matcher::Contains("Q1".into()));
        assert_eq!(
            script.rules[0].reply.label_logprobs.as_ref().unwrap()[&'A'],
            -0.1
        );
        assert_eq!(
            script.rules[1].matcher,
            Matcher::Exact("<|user|>\nx\n".into())
        );
    }
}
