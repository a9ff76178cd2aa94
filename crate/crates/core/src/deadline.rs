use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("deadline exceeded")]
pub struct OutOfTime;

/// Cooperative wall-clock budget, polled inside long loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Deadline {
    end: Option<Instant>,
}

impl Deadline {
    pub fn none() -> Self {
        Deadline { end: None }
    }

    pub fn after(budget: Duration) -> Self {
        Deadline { end: Some(Instant::now() + budget) }
    }

    pub fn at(end: Instant) -> Self {
        Deadline { end: Some(end) }
    }

    /// A zero budget is expired from the start.
    pub fn expired(&self) -> bool {
        self.end.is_some_and(|e| Instant::now() >= e)
    }

    pub fn check(&self) -> Result<(), OutOfTime> {
        if self.expired() {
            Err(OutOfTime)
        } else {
            Ok(())
        }
    }

    pub fn remaining(&self) -> Option<Duration> {
        self.end.map(|e| e.saturating_duration_since(Instant::now()))
    }
}

impl Default for Deadline {
    fn default() -> Self {
        Deadline::none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_budget_is_expired() {
        assert!(Deadline::after(Duration::ZERO).expired());
        assert_eq!(Deadline::after(Duration::ZERO).check(), Err(OutOfTime));
        assert!(!Deadline::none().expired());
        assert!(!Deadline::after(Duration::from_secs(3600)).expired());
    }
}
