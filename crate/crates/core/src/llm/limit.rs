use std::sync::{Condvar, Mutex};

use super::{ChatGateway, ChatRequest, ChatResponse, GatewayError};

/// Caps the number of concurrent `chat` calls reaching the inner gateway.
pub struct InFlightLimit<G> {
    inner: G,
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl<G: ChatGateway> InFlightLimit<G> {
    pub const DEFAULT_LIMIT: usize = 4;

    pub fn new(inner: G, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

struct Permit<'a> {
    active: &'a Mutex<usize>,
    freed: &'a Condvar,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.active.lock().expect("limit lock") -= 1;
        self.freed.notify_one();
    }
}

impl<G: ChatGateway> ChatGateway for InFlightLimit<G> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        {
            let mut active = self.active.lock().expect("limit lock");
            while *active >= self.limit {
                active = self.freed.wait(active).expect("limit lock");
            }
            *active += 1;
        }
        let _permit = Permit {
            active: &self.active,
            freed: &self.freed,
        };
        self.inner.chat(req)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    use super::*;
    use crate::llm::{ChatMessage, ChatPrompt};

    struct Slow {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatGateway for Slow {
        fn model_name(&self) -> &str {
            "slow"
        }

        fn chat(&self, _req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(ChatResponse {
                text: String::new(),
                label_logprobs: None,
                model_name: "slow".into(),
            })
        }
    }

    #[test]
    fn never_exceeds_limit() {
        let gw = InFlightLimit::new(
            Slow {
                current: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            },
            2,
        );
        let req = ChatRequest::new(&ChatPrompt::new(vec![ChatMessage::user("x")]), 0.0, 1);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| gw.chat(&req).unwrap());
            }
        });
        let peak = gw.inner().peak.load(Ordering::SeqCst);
        assert!((1..=2).contains(&peak), "peak {peak}");
    }
}
