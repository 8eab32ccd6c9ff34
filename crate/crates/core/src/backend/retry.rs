//! Bounded exponential backoff with full jitter.

use std::time::Duration;

use rand::Rng;

use super::BackendError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the sleep before attempt `attempt + 1` (1-based `attempt`).
    pub fn backoff_cap(&self, attempt: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }

    /// Runs `op` until it succeeds, fails permanently, or the attempt budget
    /// is spent. The surfaced error carries the attempt count.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut rng = rand::rng();
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    let cap = self.backoff_cap(attempt);
                    let sleep = cap.mul_f64(rng.random::<f64>());
                    log::debug!("retryable backend error (attempt {attempt}): {e}; sleeping {sleep:?}");
                    std::thread::sleep(sleep);
                }
                Err(e) => return Err(e.with_attempts(attempt)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast() -> RetryPolicy {
        RetryPolicy {
            base: Duration::from_micros(10),
            ..Default::default()
        }
    }

    #[test]
    fn default_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.max_attempts, 5);
        assert_eq!(p.backoff_cap(1), Duration::from_secs(1));
        assert_eq!(p.backoff_cap(4), Duration::from_secs(8));
    }

    #[test]
    fn retries_then_surfaces_with_attempt_count() {
        let mut calls = 0;
        let r: Result<(), _> = fast().run(|| {
            calls += 1;
            Err(BackendError::Transport {
                message: "down".into(),
                attempts: 0,
            })
        });
        assert_eq!(calls, 5);
        assert_eq!(
            r,
            Err(BackendError::Transport {
                message: "down".into(),
                attempts: 5
            })
        );
    }

    #[test]
    fn permanent_errors_not_retried() {
        let mut calls = 0;
        let r: Result<(), _> = fast().run(|| {
            calls += 1;
            Err(BackendError::no_scoring())
        });
        assert_eq!(calls, 1);
        assert!(r.is_err());
    }

    #[test]
    fn recovers_after_transient_failure() {
        let mut calls = 0;
        let r = fast().run(|| {
            calls += 1;
            if calls < 3 {
                Err(BackendError::Status {
                    status: 503,
                    body: String::new(),
                    attempts: 0,
                })
            } else {
                Ok(calls)
            }
        });
        assert_eq!(r, Ok(3));
    }
}
