//! Time sources. Experiments use a logical clock so reports are byte-stable.

use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, Duration, Utc};

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

/// Advances by one millisecond per reading, starting at the Unix epoch.
#[derive(Debug, Default)]
pub struct LogicalClock {
    ticks: AtomicI64,
}

impl LogicalClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        let t = self.ticks.fetch_add(1, Ordering::SeqCst);
        DateTime::<Utc>::UNIX_EPOCH + Duration::milliseconds(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logical_clock_is_strictly_increasing() {
        let c = LogicalClock::new();
        let a = c.now();
        let b = c.now();
        assert!(b > a);
        assert_eq!(a, DateTime::<Utc>::UNIX_EPOCH);
    }
}
