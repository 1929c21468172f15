//! Named fail points armed by tests and the harness.
//!
//! Engines call [`FailPoints::hit`] at well-known sites; an armed point fires
//! once its countdown reaches zero and is then disarmed.

use std::collections::HashMap;
use std::sync::Mutex;

/// Sites checked by the engines.
pub mod sites {
    /// Log engine, once per record while staging a batch.
    pub const LOG_APPEND_RECORD: &str = "log.append.record";
    /// Log engine, when copying a batch to a follower.
    pub const LOG_REPLICATE: &str = "log.replicate";
    /// Exchange engine, per queue enqueue.
    pub const EXCH_ENQUEUE: &str = "exch.enqueue";
    /// Exchange engine, before persisting to a durable queue.
    pub const EXCH_FSYNC: &str = "exch.fsync";
    /// Exchange engine, per mirror acceptance.
    pub const EXCH_MIRROR: &str = "exch.mirror";
    /// Exchange engine, per buffered publish applied by `tx_commit`.
    pub const EXCH_TX_COMMIT: &str = "exch.tx.commit";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailAction {
    /// The operation fails but the node stays up.
    Error,
    /// The node hosting the operation crashes.
    Crash,
}

#[derive(Debug, Default)]
pub struct FailPoints {
    armed: Mutex<HashMap<String, (u64, FailAction)>>,
}

impl FailPoints {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fire `action` on the `(skip + 1)`-th hit of `site`.
    pub fn arm(&self, site: &str, skip: u64, action: FailAction) {
        self.armed.lock().unwrap().insert(site.to_string(), (skip, action));
    }

    pub fn disarm(&self, site: &str) {
        self.armed.lock().unwrap().remove(site);
    }

    pub fn clear(&self) {
        self.armed.lock().unwrap().clear();
    }

    pub fn is_armed(&self, site: &str) -> bool {
        self.armed.lock().unwrap().contains_key(site)
    }

    pub fn hit(&self, site: &str) -> Option<FailAction> {
        let mut armed = self.armed.lock().unwrap();
        let slot = armed.get_mut(site)?;
        if slot.0 > 0 {
            slot.0 -= 1;
            return None;
        }
        let action = slot.1;
        armed.remove(site);
        Some(action)
    }
}
