//! Retry classification and exponential backoff with full jitter, shared by
//! the captioning and chat-completion clients.

use std::time::Duration;

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
        }
    }
}

/// Outcome of one HTTP attempt, as seen by the retry loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttemptClass {
    Success,
    /// Transport error, 429 or 5xx.
    Retryable,
    /// Any other 4xx (or unexpected status).
    Fatal,
}

pub fn classify_status(status: u16) -> AttemptClass {
    match status {
        200..=299 => AttemptClass::Success,
        429 | 500..=599 => AttemptClass::Retryable,
        _ => AttemptClass::Fatal,
    }
}

impl RetryPolicy {
    /// Upper bound of the sleep before retry number `attempt + 1` (0-based):
    /// `backoff_base * 2^attempt`.
    pub fn backoff_cap(&self, attempt: u32) -> Duration {
        self.backoff_base.saturating_mul(1u32 << attempt.min(16))
    }

    /// Full jitter: uniform in `[0, backoff_cap(attempt)]`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let cap = self.backoff_cap(attempt);
        if cap.is_zero() {
            return cap;
        }
        let nanos = rand::thread_rng().gen_range(0..=cap.as_nanos().min(u64::MAX as u128) as u64);
        Duration::from_nanos(nanos)
    }
}
