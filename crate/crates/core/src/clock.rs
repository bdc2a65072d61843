use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, TimeZone, Utc};

/// Source of timestamps for log records.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock: starts at a fixed instant and advances one second per read.
///
/// Used by offline runs whose logs must be byte-reproducible.
#[derive(Debug)]
pub struct LogicalClock {
    next: AtomicI64,
}

impl LogicalClock {
    pub fn starting_at(epoch_secs: i64) -> Self {
        Self {
            next: AtomicI64::new(epoch_secs),
        }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        // 2026-01-01T00:00:00Z
        Self::starting_at(1_767_225_600)
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        let secs = self.next.fetch_add(1, Ordering::SeqCst);
        Utc.timestamp_opt(secs, 0).single().expect("in range")
    }
}
