//! Time sources. Protocol code never reads the wall clock directly; it takes
//! `now` from a [`Clock`] so the harness can drive it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// Seconds since the Unix epoch, UTC.
pub trait Clock: Send + Sync {
    fn now(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    }
}

/// Manually advanced clock shared by every component of a simulation.
#[derive(Debug, Clone, Default)]
pub struct SimClock(Arc<AtomicU64>);

impl SimClock {
    pub fn new(start: u64) -> Self {
        Self(Arc::new(AtomicU64::new(start)))
    }

    pub fn set(&self, t: u64) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: u64) -> u64 {
        self.0.fetch_add(secs, Ordering::SeqCst) + secs
    }
}

impl Clock for SimClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// A view of another clock shifted by a fixed skew.
pub struct SkewedClock<C> {
    pub inner: C,
    pub skew_secs: i64,
}

impl<C: Clock> Clock for SkewedClock<C> {
    fn now(&self) -> u64 {
        self.inner.now().saturating_add_signed(self.skew_secs)
    }
}

/// How the client waits out its randomized pre-send delay.
pub trait Delay: Send + Sync {
    fn wait(&self, d: Duration);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ThreadSleep;

impl Delay for ThreadSleep {
    fn wait(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested delays without sleeping.
#[derive(Debug, Default)]
pub struct RecordedDelay {
    pub waits: Mutex<Vec<Duration>>,
}

impl Delay for RecordedDelay {
    fn wait(&self, d: Duration) {
        self.waits.lock().unwrap().push(d);
    }
}
