use std::time::Duration;

use tokio::sync::Mutex;
use tokio::time::Instant;

/// Token bucket refilled continuously at `rate` tokens per second, holding
/// at most max(1, rate) tokens. Starts full.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate_per_second: f64) -> Self {
        assert!(rate_per_second > 0.0, "rate must be positive");
        let capacity = rate_per_second.max(1.0);
        Self {
            rate: rate_per_second,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Waits until a token is available and takes it. Waiters are served
    /// in lock order, which keeps the long-run rate at `rate`.
    pub async fn acquire(&self) {
        let mut state = self.state.lock().await;
        loop {
            let now = Instant::now();
            let (tokens, last) = *state;
            let refilled = (tokens + now.duration_since(last).as_secs_f64() * self.rate).min(self.capacity);
            if refilled >= 1.0 {
                *state = (refilled - 1.0, now);
                return;
            }
            *state = (refilled, now);
            let wait = (1.0 - refilled) / self.rate;
            tokio::time::sleep(Duration::from_secs_f64(wait)).await;
        }
    }
}

/// Delay before retry number `attempt` (1-based): base · 2^(attempt−1) plus
/// `jitter` · base, where `jitter` is drawn from [0, 1).
pub fn backoff_delay(base: Duration, attempt: u32, jitter: f64) -> Duration {
    let exp = base.saturating_mul(1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX));
    exp.saturating_add(base.mul_f64(jitter.clamp(0.0, 1.0)))
}
