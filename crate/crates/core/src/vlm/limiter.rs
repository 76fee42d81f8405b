use std::sync::{Condvar, Mutex};

/// Counting semaphore bounding simultaneous wire operations.
#[derive(Debug)]
pub struct InFlightLimiter {
    capacity: usize,
    state: Mutex<State>,
    freed: Condvar,
}

#[derive(Debug, Default)]
struct State {
    in_flight: usize,
    peak: usize,
}

impl InFlightLimiter {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            state: Mutex::new(State::default()),
            freed: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut state = self.state.lock().unwrap();
        while state.in_flight >= self.capacity {
            state = self.freed.wait(state).unwrap();
        }
        state.in_flight += 1;
        state.peak = state.peak.max(state.in_flight);
        InFlightGuard { limiter: self }
    }

    /// Highest number of simultaneous holders observed.
    pub fn peak(&self) -> usize {
        self.state.lock().unwrap().peak
    }
}

pub struct InFlightGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock().unwrap();
        state.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}
