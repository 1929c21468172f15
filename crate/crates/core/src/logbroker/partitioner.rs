use std::sync::atomic::{AtomicU64, Ordering};

use crate::hash::stable_hash;

/// Application-supplied partition function: `(key, n_partitions) -> index`.
pub type CustomPartitioner = dyn Fn(Option<&[u8]>, u32) -> u32 + Send + Sync;

/// Key-hash partitioner with a rotating choice for keyless messages.
#[derive(Debug, Default)]
pub struct Partitioner {
    next: AtomicU64,
}

impl Partitioner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pick a partition in `[0, n_partitions)`.
    ///
    /// An override always wins (its result is reduced modulo `n_partitions`).
    /// Keyed messages go to `stable_hash(key) % n`; keyless ones rotate.
    pub fn partition_for(&self, key: Option<&[u8]>, n_partitions: u32, custom: Option<&CustomPartitioner>) -> u32 {
        assert!(n_partitions >= 1, "a topic has at least one partition");
        if let Some(f) = custom {
            return f(key, n_partitions) % n_partitions;
        }
        match key {
            Some(k) => hash_partition(k, n_partitions),
            None => (self.next.fetch_add(1, Ordering::Relaxed) % u64::from(n_partitions)) as u32,
        }
    }
}

pub fn hash_partition(key: &[u8], n_partitions: u32) -> u32 {
    (stable_hash(key) % u64::from(n_partitions)) as u32
}
