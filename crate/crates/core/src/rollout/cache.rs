use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

use lru::LruCache;
use serde::{Deserialize, Serialize};

use super::RewardBundle;

type Slot = Arc<OnceLock<Result<RewardBundle, String>>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub spot_checks: u64,
    pub spot_mismatches: u64,
    pub entries: usize,
}

impl CacheCounters {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn hit_rate(&self) -> Option<f64> {
        (self.lookups() > 0).then(|| self.hits as f64 / self.lookups() as f64)
    }
}

#[derive(Debug, Default)]
struct Counters {
    hits: u64,
    misses: u64,
    spot_checks: u64,
    spot_mismatches: u64,
}

/// Shared score cache keyed by waveform content digest, with single-flight
/// computation: concurrent lookups of one key compute it once and the rest
/// count as hits. Every `spot_every`-th hit is recomputed and compared.
pub struct WaveformCache {
    inner: Mutex<(LruCache<u64, Slot>, Counters)>,
    spot_every: u64,
}

impl WaveformCache {
    pub const DEFAULT_SPOT_EVERY: u64 = 16;

    pub fn new(capacity: usize) -> Self {
        Self::with_spot_check(capacity, Self::DEFAULT_SPOT_EVERY)
    }

    /// `spot_every == 0` disables spot checks.
    pub fn with_spot_check(capacity: usize, spot_every: u64) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("non-zero");
        Self { inner: Mutex::new((LruCache::new(cap), Counters::default())), spot_every }
    }

    pub fn get_or_compute<F>(&self, key: u64, compute: F) -> Result<RewardBundle, String>
    where
        F: Fn() -> Result<RewardBundle, String>,
    {
        let (slot, spot) = {
            let mut g = self.inner.lock().expect("cache lock");
            let (lru, counters) = &mut *g;
            match lru.get(&key) {
                Some(slot) => {
                    let slot = slot.clone();
                    counters.hits += 1;
                    let spot = self.spot_every > 0 && counters.hits % self.spot_every == 0;
                    (slot, spot)
                }
                None => {
                    counters.misses += 1;
                    let slot: Slot = Arc::new(OnceLock::new());
                    lru.put(key, slot.clone());
                    (slot, false)
                }
            }
        };
        let value = slot.get_or_init(&compute).clone();
        if spot {
            let fresh = compute();
            let mut g = self.inner.lock().expect("cache lock");
            g.1.spot_checks += 1;
            if fresh != value {
                g.1.spot_mismatches += 1;
            }
        }
        value
    }

    pub fn counters(&self) -> CacheCounters {
        let g = self.inner.lock().expect("cache lock");
        CacheCounters {
            hits: g.1.hits,
            misses: g.1.misses,
            spot_checks: g.1.spot_checks,
            spot_mismatches: g.1.spot_mismatches,
            entries: g.0.len(),
        }
    }
}
