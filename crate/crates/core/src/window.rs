//! Per-sensor sliding window, indexed by arrival order and by value order.

use std::collections::VecDeque;

use smallvec::SmallVec;
use thiserror::Error;

use crate::events::{SensorEvent, Timestamp};
use crate::order_stats::{OrderStatTree, RangeStats};

/// How the window decides which events to retain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowMode {
    /// The last `capacity` events.
    #[default]
    Count,
    /// Events with `timestamp > newest - capacity`.
    Time,
}

#[derive(Debug, Error, PartialEq)]
pub enum WindowError {
    #[error("window capacity must be positive")]
    ZeroCapacity,
    #[error("out-of-order event: timestamp {got} precedes newest {newest}")]
    OutOfOrder { newest: Timestamp, got: Timestamp },
    #[error("non-finite value")]
    NonFinite,
    #[error("rank range [{lo}, {hi}) out of bounds for {len} values")]
    Bounds { lo: usize, hi: usize, len: usize },
}

/// One retained `(timestamp, value)` pair.
pub type Entry = (Timestamp, f64);

/// Entries evicted by one push. Count mode evicts at most one.
pub type Evicted = SmallVec<[Entry; 1]>;

#[derive(Debug, Clone)]
pub struct EventWindow {
    capacity: u64,
    mode: WindowMode,
    time_order: VecDeque<Entry>,
    index: OrderStatTree,
}

impl EventWindow {
    pub fn new(capacity: u64, mode: WindowMode) -> Result<Self, WindowError> {
        if capacity == 0 {
            return Err(WindowError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            mode,
            time_order: VecDeque::new(),
            index: OrderStatTree::new(),
        })
    }

    pub fn count_based(capacity: u64) -> Result<Self, WindowError> {
        Self::new(capacity, WindowMode::Count)
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn mode(&self) -> WindowMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.time_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time_order.is_empty()
    }

    pub fn newest(&self) -> Option<Entry> {
        self.time_order.back().copied()
    }

    pub fn push(&mut self, e: &SensorEvent) -> Result<Evicted, WindowError> {
        self.push_value(e.timestamp, e.value)
    }

    /// Appends `(timestamp, value)` and returns whatever fell out.
    pub fn push_value(&mut self, timestamp: Timestamp, value: f64) -> Result<Evicted, WindowError> {
        if !value.is_finite() {
            return Err(WindowError::NonFinite);
        }
        if let Some(&(newest, _)) = self.time_order.back() {
            if timestamp < newest {
                return Err(WindowError::OutOfOrder {
                    newest,
                    got: timestamp,
                });
            }
        }
        // -0.0 and 0.0 must land on the same index key.
        let value = value + 0.0;
        self.time_order.push_back((timestamp, value));
        self.index.insert(value);

        let mut evicted = Evicted::new();
        match self.mode {
            WindowMode::Count => {
                while self.time_order.len() as u64 > self.capacity {
                    evicted.push(self.evict_front());
                }
            }
            WindowMode::Time => {
                while let Some(&(t, _)) = self.time_order.front() {
                    if t.saturating_add(self.capacity) > timestamp {
                        break;
                    }
                    evicted.push(self.evict_front());
                }
            }
        }
        Ok(evicted)
    }

    fn evict_front(&mut self) -> Entry {
        let old = self
            .time_order
            .pop_front()
            .expect("eviction from a nonempty window");
        let removed = self.index.remove(old.1);
        debug_assert!(removed, "value index out of sync with time order");
        old
    }

    /// Number of stored values strictly less than `value`.
    pub fn rank(&self, value: f64) -> usize {
        self.index.rank(value)
    }

    /// Number of stored values less than or equal to `value`.
    pub fn rank_le(&self, value: f64) -> usize {
        self.index.rank_le(value)
    }

    pub fn select(&self, rank: usize) -> Option<f64> {
        self.index.select(rank)
    }

    pub fn contains(&self, value: f64) -> bool {
        self.index.count_of(value + 0.0) > 0
    }

    pub fn distinct_values(&self) -> usize {
        self.index.distinct()
    }

    /// See [`OrderStatTree::partition_point`].
    pub fn partition_point(&self, pred: impl FnMut(f64) -> bool) -> usize {
        self.index.partition_point(pred)
    }

    /// Sum of the values with rank in `[lo_rank, hi_rank)`.
    pub fn segment_sum(&self, lo_rank: usize, hi_rank: usize) -> Result<f64, WindowError> {
        self.segment_stats(lo_rank, hi_rank).map(|s| s.sum())
    }

    pub fn segment_stats(&self, lo_rank: usize, hi_rank: usize) -> Result<RangeStats, WindowError> {
        if lo_rank > hi_rank || hi_rank > self.len() {
            return Err(WindowError::Bounds {
                lo: lo_rank,
                hi: hi_rank,
                len: self.len(),
            });
        }
        Ok(self.index.range_stats(lo_rank, hi_rank))
    }

    /// Oldest-to-newest snapshot.
    pub fn time_ordered_values(&self) -> Vec<Entry> {
        self.time_order.iter().copied().collect()
    }

    pub fn iter_time_order(&self) -> impl ExactSizeIterator<Item = Entry> + '_ {
        self.time_order.iter().copied()
    }

    /// Ascending values, duplicates repeated.
    pub fn sorted_values(&self) -> Vec<f64> {
        self.index.values()
    }
}
