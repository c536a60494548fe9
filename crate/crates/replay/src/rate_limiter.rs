//! Admission control for table inserts and samples.
//!
//! The limiter tracks `diff = samples_per_insert * inserts - samples` and
//! confines it to [min_diff, max_diff]. Working in diff units rather than on
//! the raw samples/inserts ratio keeps the bounds well defined at startup
//! and matches the queue mapping (bounds 0 and queue_size) exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RateLimiterError {
    #[error("samples_per_insert must be > 0, got {0}")]
    InvalidSpi(f64),
    #[error("error_buffer must be > 0, got {0}")]
    InvalidErrorBuffer(f64),
    #[error("queue_size must be >= 1, got {0}")]
    InvalidQueueSize(u64),
    #[error("min_diff {min_diff} exceeds max_diff {max_diff}")]
    InvertedBounds { min_diff: f64, max_diff: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLimiterConfig {
    pub min_size_to_sample: u64,
    pub samples_per_insert: f64,
    pub min_diff: f64,
    pub max_diff: f64,
}

impl RateLimiterConfig {
    pub fn new(
        min_size_to_sample: u64,
        samples_per_insert: f64,
        min_diff: f64,
        max_diff: f64,
    ) -> Result<Self, RateLimiterError> {
        if !(samples_per_insert > 0.0) || !samples_per_insert.is_finite() {
            return Err(RateLimiterError::InvalidSpi(samples_per_insert));
        }
        if min_diff > max_diff {
            return Err(RateLimiterError::InvertedBounds { min_diff, max_diff });
        }
        Ok(RateLimiterConfig {
            min_size_to_sample,
            samples_per_insert,
            min_diff,
            max_diff,
        })
    }

    /// Target samples-per-insert ratio with symmetric bounds of
    /// `error_buffer` (in units of samples) around equilibrium, and a
    /// minimum size before sampling starts.
    pub fn sample_to_insert_ratio(
        min_size_to_sample: u64,
        samples_per_insert: f64,
        error_buffer: f64,
    ) -> Result<Self, RateLimiterError> {
        if !(error_buffer > 0.0) {
            return Err(RateLimiterError::InvalidErrorBuffer(error_buffer));
        }
        RateLimiterConfig::new(
            min_size_to_sample,
            samples_per_insert,
            -error_buffer,
            error_buffer,
        )
    }

    /// Only gates sampling on table size; the ratio is unconstrained.
    pub fn min_size(n: u64) -> Self {
        RateLimiterConfig {
            min_size_to_sample: n,
            samples_per_insert: 1.0,
            min_diff: f64::MIN,
            max_diff: f64::MAX,
        }
    }

    /// Inserts allowed until the queue is full, samples unless it is empty.
    pub fn queue(queue_size: u64) -> Result<Self, RateLimiterError> {
        if queue_size == 0 {
            return Err(RateLimiterError::InvalidQueueSize(queue_size));
        }
        RateLimiterConfig::new(0, 1.0, 0.0, queue_size as f64)
    }
}

/// Counters plus the diff cursor. Owned by a table and mutated only under
/// the table's lock.
#[derive(Debug, Clone, PartialEq)]
pub struct RateLimiter {
    config: RateLimiterConfig,
    inserts: u64,
    samples: u64,
    deletes: u64,
    diff: f64,
}

impl RateLimiter {
    pub fn new(config: RateLimiterConfig) -> RateLimiter {
        RateLimiter {
            config,
            inserts: 0,
            samples: 0,
            deletes: 0,
            diff: 0.0,
        }
    }

    pub fn config(&self) -> &RateLimiterConfig {
        &self.config
    }

    pub fn inserts(&self) -> u64 {
        self.inserts
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn deletes(&self) -> u64 {
        self.deletes
    }

    pub fn diff(&self) -> f64 {
        self.diff
    }

    pub fn can_insert(&self) -> bool {
        self.diff + self.config.samples_per_insert <= self.config.max_diff
    }

    pub fn can_sample(&self, table_size: usize) -> bool {
        table_size as u64 >= self.config.min_size_to_sample
            && self.diff - 1.0 >= self.config.min_diff
    }

    pub fn record_insert(&mut self) {
        self.inserts += 1;
        self.diff += self.config.samples_per_insert;
    }

    pub fn record_sample(&mut self) {
        self.samples += 1;
        self.diff -= 1.0;
    }

    /// Removals are not an SPI event; the counter is informational only.
    pub fn record_delete(&mut self) {
        self.deletes += 1;
    }

    /// Used on checkpoint restore.
    pub fn restore_counters(&mut self, inserts: u64, samples: u64, deletes: u64) {
        self.inserts = inserts;
        self.samples = samples;
        self.deletes = deletes;
        self.diff = self.config.samples_per_insert * inserts as f64 - samples as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spi_limiter_blocks_insert_at_upper_bound_until_sample() {
        // diff walks to max_diff, insert blocked; one sample frees it.
        let config = RateLimiterConfig::sample_to_insert_ratio(0, 1.5, 3.0).unwrap();
        let mut rl = RateLimiter::new(config);
        rl.record_insert();
        rl.record_insert();
        assert_eq!(rl.diff(), 3.0);
        assert!(!rl.can_insert());
        rl.record_sample();
        assert!(!rl.can_insert(), "diff 2.0 + spi 1.5 still exceeds 3.0");
        rl.record_sample();
        assert!(rl.can_insert());
    }

    #[test]
    fn min_size_always_admits_inserts_and_ignores_spi() {
        let mut rl = RateLimiter::new(RateLimiterConfig::min_size(1));
        for _ in 0..1_000 {
            assert!(rl.can_insert());
            rl.record_insert();
        }
        assert!(!rl.can_sample(0));
        assert!(rl.can_sample(1));
        for _ in 0..10_000 {
            rl.record_sample();
        }
        assert!(rl.can_sample(1));
    }

    #[test]
    fn queue_mapping() {
        let config = RateLimiterConfig::queue(5).unwrap();
        assert_eq!(config.min_size_to_sample, 0);
        assert_eq!(config.samples_per_insert, 1.0);
        assert_eq!(config.min_diff, 0.0);
        assert_eq!(config.max_diff, 5.0);
    }

    #[test]
    fn queue_blocks_insert_when_full_and_sample_when_empty() {
        let mut rl = RateLimiter::new(RateLimiterConfig::queue(2).unwrap());
        assert!(!rl.can_sample(0), "empty queue blocks sampling");
        rl.record_insert();
        rl.record_insert();
        assert_eq!(rl.diff(), 2.0);
        assert!(!rl.can_insert(), "full queue blocks inserts");
        rl.record_sample();
        assert!(rl.can_insert());
    }

    #[test]
    fn spi_min_size_gates_sampling_even_when_diff_allows() {
        let config = RateLimiterConfig::sample_to_insert_ratio(100, 4.0, 40.0).unwrap();
        let mut rl = RateLimiter::new(config);
        for _ in 0..5 {
            rl.record_insert();
        }
        assert!(rl.diff() - 1.0 >= config.min_diff);
        assert!(!rl.can_sample(99));
        assert!(rl.can_sample(100));
    }

    #[test]
    fn equilibrium_arithmetic() {
        // spi = 1.5: 2 inserts then 3 samples returns diff to 0.
        let config = RateLimiterConfig::sample_to_insert_ratio(0, 1.5, 10.0).unwrap();
        let mut rl = RateLimiter::new(config);
        assert_eq!((rl.inserts(), rl.samples(), rl.diff()), (0, 0, 0.0));
        rl.record_insert();
        assert_eq!(rl.diff(), 1.5);
        rl.record_insert();
        rl.record_sample();
        rl.record_sample();
        rl.record_sample();
        assert_eq!(rl.diff(), 0.0);
    }

    #[test]
    fn constructor_validation() {
        assert!(RateLimiterConfig::sample_to_insert_ratio(0, 0.0, 1.0).is_err());
        assert!(RateLimiterConfig::sample_to_insert_ratio(0, 1.0, 0.0).is_err());
        assert!(RateLimiterConfig::queue(0).is_err());
        assert!(RateLimiterConfig::new(0, 1.0, 2.0, 1.0).is_err());
        let config = RateLimiterConfig::sample_to_insert_ratio(1000, 4.0, 40.0).unwrap();
        assert_eq!((config.min_diff, config.max_diff), (-40.0, 40.0));
    }

    #[test]
    fn deletes_do_not_touch_spi() {
        let config = RateLimiterConfig::sample_to_insert_ratio(0, 2.0, 4.0).unwrap();
        let mut rl = RateLimiter::new(config);
        rl.record_insert();
        let diff = rl.diff();
        rl.record_delete();
        assert_eq!(rl.diff(), diff);
        assert_eq!(rl.deletes(), 1);
    }
}
