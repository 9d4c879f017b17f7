//! Time sources. Timestamps are RFC 3339 UTC with microsecond precision.

use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;

    fn timestamp(&self) -> String {
        format_ts(self.now())
    }
}

pub fn format_ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, true)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock that advances one second per reading, starting at
/// 2026-01-01T00:00:00Z.
#[derive(Debug)]
pub struct StepClock {
    next: AtomicI64,
}

impl StepClock {
    pub fn new() -> Self {
        Self::starting_at(Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap())
    }

    pub fn starting_at(t: DateTime<Utc>) -> Self {
        Self {
            next: AtomicI64::new(t.timestamp()),
        }
    }
}

impl Default for StepClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StepClock {
    fn now(&self) -> DateTime<Utc> {
        let secs = self.next.fetch_add(1, Ordering::SeqCst);
        Utc.timestamp_opt(secs, 0).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_clock_is_monotone_and_formatted() {
        let c = StepClock::new();
        assert_eq!(c.timestamp(), "2026-01-01T00:00:00.000000Z");
        assert_eq!(c.timestamp(), "2026-01-01T00:00:01.000000Z");
        let a = SystemClock.timestamp();
        assert!(a.ends_with('Z') && a.len() == 27, "{a}");
    }
}
