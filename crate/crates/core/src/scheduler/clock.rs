use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::time::{SimDuration, SimInstant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    #[default]
    #[serde(alias = "sim")]
    Simulated,
    Wall,
}

/// Engine timeline. The simulated clock jumps by modeled durations; the wall
/// clock follows the same timeline but sleeps so that modeled time tracks
/// real time.
#[derive(Debug, Clone)]
pub struct Clock {
    kind: ClockKind,
    now: SimInstant,
    origin: Instant,
}

impl Clock {
    pub fn new(kind: ClockKind) -> Self {
        Self { kind, now: SimInstant::EPOCH, origin: Instant::now() }
    }

    pub fn kind(&self) -> ClockKind {
        self.kind
    }

    pub fn now(&self) -> SimInstant {
        self.now
    }

    /// On the wall clock, catches the timeline up with real time (idle gaps).
    pub fn sync(&mut self) {
        if self.kind == ClockKind::Wall {
            let real = SimInstant::from_nanos(self.origin.elapsed().as_nanos() as u64);
            self.now = self.now.max(real);
        }
    }

    pub fn advance(&mut self, d: SimDuration) {
        self.now = self.now + d;
        if self.kind == ClockKind::Wall {
            let target = self.origin + self.now.since_epoch().to_std();
            let now = Instant::now();
            if target > now {
                std::thread::sleep(target - now);
            }
        }
    }

    pub fn advance_to(&mut self, t: SimInstant) {
        if t > self.now {
            self.advance(t - self.now);
        }
    }
}
