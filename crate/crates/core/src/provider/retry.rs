use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, CompletionResult, Provider};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before attempt `i + 2`; the last entry repeats.
    #[serde(default)]
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, backoff_ms: vec![500, 2_000, 8_000] }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let idx = (attempt as usize).min(self.backoff_ms.len().saturating_sub(1));
        Duration::from_millis(self.backoff_ms.get(idx).copied().unwrap_or(0))
    }
}

/// Calls the provider up to `policy.max_attempts` times, retrying only remote
/// failures. Deterministic providers get exactly one attempt.
pub fn with_retry(provider: &dyn Provider, request: &CompletionRequest, policy: &RetryPolicy) -> Result<CompletionResult> {
    if policy.max_attempts == 0 {
        return Err(Error::Precondition("retry policy needs max_attempts >= 1".into()));
    }
    if provider.is_deterministic() {
        return provider.complete(request);
    }
    let mut last = String::new();
    for attempt in 0..policy.max_attempts {
        if attempt > 0 {
            thread::sleep(policy.delay(attempt - 1));
        }
        match provider.complete(request) {
            Ok(r) => return Ok(r),
            Err(Error::RemoteFailure { last: msg, .. }) => {
                tracing::warn!(attempt = attempt + 1, error = %msg, "provider call failed");
                last = msg;
            }
            Err(other) => return Err(other),
        }
    }
    Err(Error::RemoteFailure { attempts: policy.max_attempts, last })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};

    use super::*;
    use crate::provider::{parse_transcript, Agent, ChatMessage, ScriptedProvider, Usage};

    struct Flaky {
        fail_first: u32,
        calls: AtomicU32,
    }

    impl Provider for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn complete(&self, _r: &CompletionRequest) -> Result<CompletionResult> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(Error::RemoteFailure { attempts: 1, last: format!("boom {n}") })
            } else {
                Ok(CompletionResult { text: "ok".into(), usage: Usage::default(), provider_id: "flaky".into(), transcript_entry: None })
            }
        }
    }

    fn req() -> CompletionRequest {
        CompletionRequest::new(Agent::Coder, "t", vec![ChatMessage::user("x")])
    }

    fn policy(n: u32) -> RetryPolicy {
        RetryPolicy { max_attempts: n, backoff_ms: vec![0] }
    }

    #[test]
    fn single_attempt_failure() {
        let p = Flaky { fail_first: 10, calls: AtomicU32::new(0) };
        let err = with_retry(&p, &req(), &policy(1)).unwrap_err();
        assert!(matches!(err, Error::RemoteFailure { attempts: 1, ref last } if last == "boom 0"));
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn recovers_on_second_attempt() {
        let p = Flaky { fail_first: 1, calls: AtomicU32::new(0) };
        assert_eq!(with_retry(&p, &req(), &policy(2)).unwrap().text, "ok");
        assert_eq!(p.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn scripted_provider_is_never_retried() {
        let t = parse_transcript(r#"{"agent":"Coder","match":[],"response":"r","max_uses":"unlimited"}"#).unwrap();
        let p = ScriptedProvider::new(t);
        with_retry(&p, &req(), &policy(5)).unwrap();
        assert_eq!(p.consumed(), 1);
        let empty = ScriptedProvider::new(Transcript::default());
        assert_eq!(with_retry(&empty, &req(), &policy(5)).unwrap_err().code(), "NO_MATCHING_ENTRY");
    }

    use crate::provider::Transcript;
}
