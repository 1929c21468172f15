use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    AtMostOnce,
    AtLeastOnce,
}

/// Scope within which delivery order must match production order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    None,
    PerPartition,
    PerChannel,
    GlobalSingleLane,
}

/// Producer acknowledgement level for the log engine (`acks` 0, 1, -1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogAckMode {
    Acks0,
    Acks1,
    AcksQuorum,
}

impl LogAckMode {
    /// Number of replicas that must hold a batch before the receipt is issued.
    pub fn required_replicas(self, replication_factor: usize) -> usize {
        match self {
            LogAckMode::Acks0 | LogAckMode::Acks1 => 1,
            LogAckMode::AcksQuorum => (replication_factor + 1).div_ceil(2),
        }
    }
}

/// Publisher confirm conditions for the exchange engine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfirmPolicy {
    /// Persist to the durable region before confirming when the queue is durable.
    pub persistent: bool,
    /// Confirm only after every mirror accepted the message.
    pub mirrored: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "snake_case")]
pub enum AckPolicy {
    Log { acks: LogAckMode },
    Exch { confirm: ConfirmPolicy, window: i64 },
}

/// Bounds on how long appended data may stay volatile.
///
/// `None` means unbounded in that dimension; at least one must be set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlushPolicy {
    pub flush_interval_messages: Option<u64>,
    pub flush_interval_ms: Option<u64>,
}

impl FlushPolicy {
    pub fn every_message() -> Self {
        FlushPolicy { flush_interval_messages: Some(1), flush_interval_ms: None }
    }

    pub fn is_valid(&self) -> bool {
        self.flush_interval_messages.map_or(false, |n| n > 0) || self.flush_interval_ms.is_some()
    }

    pub fn interval(&self) -> Option<Duration> {
        self.flush_interval_ms.map(Duration::from_millis)
    }

    /// Whether a replica holding `unflushed` messages, last flushed `since_ns`
    /// ago, must flush now.
    pub fn due(&self, unflushed: u64, since_ns: u64) -> bool {
        if unflushed == 0 {
            return false;
        }
        if let Some(n) = self.flush_interval_messages {
            if unflushed >= n {
                return true;
            }
        }
        if let Some(ms) = self.flush_interval_ms {
            if since_ns >= ms.saturating_mul(1_000_000) {
                return true;
            }
        }
        false
    }
}

impl Default for FlushPolicy {
    /// Broker-side batching defaults: 50000 messages or 30 seconds.
    fn default() -> Self {
        FlushPolicy { flush_interval_messages: Some(50_000), flush_interval_ms: Some(30_000) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QoSConfig {
    pub delivery: Delivery,
    pub ordering: Ordering,
    pub replication_factor: u32,
    pub ack_policy: AckPolicy,
    #[serde(default)]
    pub flush: FlushPolicy,
}

impl QoSConfig {
    pub fn at_least_once_log() -> Self {
        QoSConfig {
            delivery: Delivery::AtLeastOnce,
            ordering: Ordering::PerPartition,
            replication_factor: 3,
            ack_policy: AckPolicy::Log { acks: LogAckMode::AcksQuorum },
            flush: FlushPolicy::default(),
        }
    }

    pub fn at_most_once_log() -> Self {
        QoSConfig {
            delivery: Delivery::AtMostOnce,
            ordering: Ordering::PerPartition,
            replication_factor: 1,
            ack_policy: AckPolicy::Log { acks: LogAckMode::Acks0 },
            flush: FlushPolicy::default(),
        }
    }

    pub fn at_least_once_exch() -> Self {
        QoSConfig {
            delivery: Delivery::AtLeastOnce,
            ordering: Ordering::PerChannel,
            replication_factor: 1,
            ack_policy: AckPolicy::Exch {
                confirm: ConfirmPolicy { persistent: true, mirrored: false },
                window: -1,
            },
            flush: FlushPolicy::default(),
        }
    }

    pub fn at_most_once_exch() -> Self {
        QoSConfig {
            delivery: Delivery::AtMostOnce,
            ordering: Ordering::PerChannel,
            replication_factor: 1,
            ack_policy: AckPolicy::Exch { confirm: ConfirmPolicy::default(), window: -1 },
            flush: FlushPolicy::default(),
        }
    }

    pub fn log_acks(&self) -> Option<LogAckMode> {
        match self.ack_policy {
            AckPolicy::Log { acks } => Some(acks),
            AckPolicy::Exch { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quorum_sizes() {
        assert_eq!(LogAckMode::AcksQuorum.required_replicas(1), 1);
        assert_eq!(LogAckMode::AcksQuorum.required_replicas(2), 2);
        assert_eq!(LogAckMode::AcksQuorum.required_replicas(3), 2);
        assert_eq!(LogAckMode::AcksQuorum.required_replicas(5), 3);
        assert_eq!(LogAckMode::Acks1.required_replicas(3), 1);
    }

    #[test]
    fn flush_due() {
        let p = FlushPolicy { flush_interval_messages: Some(3), flush_interval_ms: Some(10) };
        assert!(!p.due(0, u64::MAX));
        assert!(!p.due(2, 9_999_999));
        assert!(p.due(3, 0));
        assert!(p.due(1, 10_000_000));
        assert!(!FlushPolicy { flush_interval_messages: None, flush_interval_ms: None }.is_valid());
    }
}
