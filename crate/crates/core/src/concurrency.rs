//! Bound on in-flight provider requests.

use std::sync::{Condvar, Mutex};

/// Counting semaphore shared by every provider in a pipeline.
#[derive(Debug)]
pub struct InFlightLimiter {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    /// `limit` is clamped to at least one.
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    /// Blocks until a slot is free.
    pub fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.active.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Default for InFlightLimiter {
    fn default() -> Self {
        Self::new(8)
    }
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self
            .limiter
            .active
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.limiter.freed.notify_one();
    }
}
