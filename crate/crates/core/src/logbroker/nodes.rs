use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

/// Liveness of the simulated storage nodes.
///
/// Every crash bumps the node's epoch; partitions compare a replica's last
/// seen epoch against it and discard the replica's volatile suffix lazily on
/// their next access.
#[derive(Debug)]
pub struct Nodes {
    up: Vec<AtomicBool>,
    epoch: Vec<AtomicU64>,
}

impl Nodes {
    pub fn new(n: usize) -> Self {
        Nodes {
            up: (0..n).map(|_| AtomicBool::new(true)).collect(),
            epoch: (0..n).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.up.len()
    }

    pub fn is_empty(&self) -> bool {
        self.up.is_empty()
    }

    pub fn is_up(&self, n: usize) -> bool {
        self.up.get(n).is_some_and(|u| u.load(Ordering::SeqCst))
    }

    pub fn epoch(&self, n: usize) -> u64 {
        self.epoch[n].load(Ordering::SeqCst)
    }

    pub fn crash(&self, n: usize) {
        self.up[n].store(false, Ordering::SeqCst);
        self.epoch[n].fetch_add(1, Ordering::SeqCst);
    }

    pub fn restart(&self, n: usize) {
        self.up[n].store(true, Ordering::SeqCst);
    }
}
