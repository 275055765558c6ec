use std::sync::Arc;
use std::time::Duration;

use super::{ChatGateway, ChatRequest, ChatResponse, GatewayError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay
            .mul_f64(self.factor.powi(retry.saturating_sub(1) as i32))
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Retries transient failures with exponential backoff.
pub struct Retrying<G> {
    inner: G,
    policy: RetryPolicy,
    sleep: Sleeper,
}

impl<G: ChatGateway> Retrying<G> {
    pub fn new(inner: G, policy: RetryPolicy) -> Self {
        Self {
            inner,
            policy,
            sleep: Arc::new(std::thread::sleep),
        }
    }

    /// Replace the sleep function (tests record delays instead of waiting).
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

impl<G: ChatGateway> ChatGateway for Retrying<G> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let attempts = self.policy.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.inner.chat(req) {
                Ok(resp) => return Ok(resp),
                Err(e) if e.is_transient() && attempt < attempts => {
                    (self.sleep)(self.policy.delay(attempt));
                    attempt += 1;
                }
                Err(e) if e.is_transient() => {
                    return Err(GatewayError::RetriesExhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Mutex;

    use super::*;
    use crate::llm::{ChatMessage, ChatPrompt};

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
    }

    impl ChatGateway for Flaky {
        fn model_name(&self) -> &str {
            "flaky"
        }

        fn chat(&self, _req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
            if n <= self.failures {
                Err(GatewayError::Transport {
                    message: format!("failure {n}"),
                    transient: true,
                })
            } else {
                Ok(ChatResponse {
                    text: "ok".into(),
                    label_logprobs: None,
                    model_name: "flaky".into(),
                })
            }
        }
    }

    fn run(failures: u32) -> (Result<ChatResponse, GatewayError>, Vec<Duration>, u32) {
        let delays = Arc::new(Mutex::new(Vec::new()));
        let recorded = Arc::clone(&delays);
        let gw = Retrying::new(
            Flaky {
                failures,
                calls: AtomicU32::new(0),
            },
            RetryPolicy::default(),
        )
        .with_sleeper(move |d| recorded.lock().unwrap().push(d));
        let req = ChatRequest::new(&ChatPrompt::new(vec![ChatMessage::user("x")]), 0.0, 1);
        let result = gw.chat(&req);
        let calls = gw.inner().calls.load(Ordering::SeqCst);
        let delays = delays.lock().unwrap().clone();
        (result, delays, calls)
    }

    #[test]
    fn four_failures_then_success() {
        let (result, delays, calls) = run(4);
        assert_eq!(result.unwrap().text, "ok");
        assert_eq!(calls, 5);
        assert_eq!(delays, [1, 2, 4, 8].map(Duration::from_secs).to_vec());
    }

    #[test]
    fn five_failures_surface_the_error() {
        let (result, delays, calls) = run(5);
        assert!(matches!(
            result,
            Err(GatewayError::RetriesExhausted { attempts: 5, .. })
        ));
        assert_eq!(calls, 5);
        assert_eq!(delays.len(), 4);
    }

    #[test]
    fn permanent_errors_are_not_retried() {
        struct Denied;
        impl ChatGateway for Denied {
            fn model_name(&self) -> &str {
                "denied"
            }
            fn chat(&self, _: &ChatRequest) -> Result<ChatResponse, GatewayError> {
                Err(GatewayError::Auth("bad key".into()))
            }
        }
        let gw = Retrying::new(Denied, RetryPolicy::default()).with_sleeper(|_| panic!("slept"));
        let req = ChatRequest::new(&ChatPrompt::new(vec![ChatMessage::user("x")]), 0.0, 1);
        assert_eq!(gw.chat(&req), Err(GatewayError::Auth("bad key".into())));
    }
}
