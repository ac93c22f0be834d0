//! Wall or virtual time source shared by a rank's scheduler and tier store.
//!
//! With a virtual clock, completion of background work (inverse-root jobs,
//! tier transfers) is decided by simulated time rather than by whichever OS
//! thread happens to finish first, so runs are bit-reproducible. The work
//! itself still executes on real worker threads.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone)]
pub enum SimClock {
    Wall(Instant),
    Virtual(Arc<AtomicU64>),
}

impl SimClock {
    pub fn wall() -> Self {
        SimClock::Wall(Instant::now())
    }

    pub fn virtual_at(t_us: u64) -> Self {
        SimClock::Virtual(Arc::new(AtomicU64::new(t_us)))
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, SimClock::Virtual(_))
    }

    pub fn now_us(&self) -> u64 {
        match self {
            SimClock::Wall(origin) => origin.elapsed().as_micros() as u64,
            SimClock::Virtual(t) => t.load(Ordering::Acquire),
        }
    }

    /// Moves virtual time forward by `dt_us`. No effect on a wall clock.
    pub fn advance(&self, dt_us: u64) -> u64 {
        match self {
            SimClock::Wall(_) => self.now_us(),
            SimClock::Virtual(t) => t.fetch_add(dt_us, Ordering::AcqRel) + dt_us,
        }
    }

    /// Moves virtual time to `max(now, t_us)`.
    pub fn advance_to(&self, t_us: u64) -> u64 {
        match self {
            SimClock::Wall(_) => self.now_us(),
            SimClock::Virtual(t) => t.fetch_max(t_us, Ordering::AcqRel).max(t_us),
        }
    }
}
