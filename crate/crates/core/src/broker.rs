//! Engine-neutral producer/consumer contract used by the load generator.

use std::sync::Arc;

use thiserror::Error;

use crate::clock::Clock;
use crate::message::Message;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Log,
    Exch,
}

impl EngineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Log => "log",
            EngineKind::Exch => "exch",
        }
    }
}

impl std::str::FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "log" => Ok(EngineKind::Log),
            "exch" => Ok(EngineKind::Exch),
            other => Err(format!("unknown engine {other:?} (expected log or exch)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    /// The broker asked the producer to slow down; retry later.
    #[error("backpressure")]
    Backpressure,
    #[error("broker down: {0}")]
    Down(String),
    #[error("{0}")]
    Failed(String),
}

/// A message handed to a consumer together with the time it was received.
#[derive(Clone, Debug)]
pub struct Delivered {
    pub msg: Message,
    pub at_ns: u64,
}

pub trait ProducerLane: Send {
    /// Queue or publish one message. May buffer internally.
    fn send(&mut self, msg: Message) -> Result<(), BrokerError>;
    /// Push out anything buffered and wait for its acknowledgement.
    fn flush(&mut self) -> Result<(), BrokerError>;
}

pub trait ConsumerLane: Send {
    /// Non-blocking: returns whatever is available, up to `max`.
    fn poll(&mut self, max: usize) -> Result<Vec<Delivered>, BrokerError>;
}

/// A configured broker the load generator can attach lanes to.
pub trait Broker: Send + Sync {
    fn kind(&self) -> EngineKind;
    /// The clock the engine stamps deliveries with.
    fn clock(&self) -> Arc<dyn Clock>;
    fn producer(&self, index: usize) -> Box<dyn ProducerLane>;
    fn consumer(&self, index: usize) -> Box<dyn ConsumerLane>;
    /// Payload bytes currently held, counting each stored copy once.
    fn payload_bytes_stored(&self) -> u64;
    /// Background housekeeping (retention, TTL); called periodically.
    fn maintenance(&self) {}
}
