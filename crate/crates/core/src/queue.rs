//! Per-class confidence queues: bounded, entropy-ordered feature stores.
//!
//! A queue keeps the K lowest-entropy features offered to it. Warm-start
//! sentinel entries carry a synthesized prototype and compare as maximal, so
//! they are the first to be evicted once real samples arrive.

use crate::math;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueEntry {
    /// Admission entropy; meaningless for sentinels, which order as +∞.
    pub entropy: f64,
    pub feature: Vec<f64>,
    pub sentinel: bool,
}

/// Bounded ascending-entropy queue. Ties keep the earlier arrival first;
/// an incoming entropy equal to the current maximum does not displace it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceQueue {
    capacity: usize,
    entries: Vec<QueueEntry>,
}

impl ConfidenceQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "queue capacity must be >= 1");
        ConfidenceQueue {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    /// Entries in ascending entropy order (sentinels last).
    pub fn entries(&self) -> &[QueueEntry] {
        &self.entries
    }

    /// Offer a real sample. Returns true if it was stored (possibly evicting
    /// the current maximum), false if the queue was full of better entries.
    pub fn insert(&mut self, entropy: f64, feature: Vec<f64>) -> bool {
        let pos = self
            .entries
            .partition_point(|e| !e.sentinel && e.entropy <= entropy);
        let entry = QueueEntry {
            entropy,
            feature,
            sentinel: false,
        };
        if self.entries.len() < self.capacity {
            self.entries.insert(pos, entry);
            return true;
        }
        let evict = match self.entries.last() {
            Some(last) => last.sentinel || entropy < last.entropy,
            None => false,
        };
        if evict {
            self.entries.pop();
            self.entries.insert(pos, entry);
            true
        } else {
            false
        }
    }

    /// Insert a warm-start sentinel carrying a synthesized feature. Sentinels
    /// never displace anything: if the queue is full the offer is dropped.
    pub fn insert_sentinel(&mut self, feature: Vec<f64>) -> bool {
        if self.entries.len() < self.capacity {
            self.entries.push(QueueEntry {
                entropy: f64::INFINITY,
                feature,
                sentinel: true,
            });
            true
        } else {
            false
        }
    }

    /// Normalized mean of the stored features over the current length.
    /// `None` when empty (or if the mean degenerates to zero norm); callers
    /// fall back to the textual prototype.
    pub fn visual_prototype(&self) -> Option<Vec<f64>> {
        if self.entries.is_empty() {
            return None;
        }
        let d = self.entries[0].feature.len();
        let mut mean = vec![0.0; d];
        for e in &self.entries {
            for (m, x) in mean.iter_mut().zip(&e.feature) {
                *m += x;
            }
        }
        let n = self.entries.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        math::normalized(&mean).ok()
    }
}
