//! Session clocks: a deterministic step-counting clock for simulation and a
//! monotonic wall clock for live runs.

use std::time::Instant;

use crate::types::Timestamp;

pub trait Clock {
    fn now(&self) -> Timestamp;
}

/// Virtual time = step counter x tick. Advanced only by its owner.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    step: u64,
    tick_us: u64,
}

impl VirtualClock {
    pub fn new(tick_us: u64) -> VirtualClock {
        assert!(tick_us > 0, "tick must be positive");
        VirtualClock { step: 0, tick_us }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn tick_us(&self) -> u64 {
        self.tick_us
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }

    pub fn advance_to_step(&mut self, step: u64) {
        assert!(step >= self.step, "virtual clock cannot run backwards");
        self.step = step;
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.step * self.tick_us)
    }
}

/// Elapsed real microseconds since construction.
#[derive(Debug, Clone)]
pub struct WallClock {
    epoch: Instant,
}

impl WallClock {
    pub fn start() -> WallClock {
        WallClock {
            epoch: Instant::now(),
        }
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }
}

impl Clock for WallClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.epoch.elapsed().as_micros() as u64)
    }
}
