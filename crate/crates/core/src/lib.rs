//! Embedded publish/subscribe broker kit.
//!
//! Two storage models live side by side:
//!
//! - [`logbroker`]: partitioned, segmented append logs with offset-based pull
//!   consumption, consumer groups, retention, compaction and simulated
//!   replicas acknowledged by quorum.
//! - [`exchbroker`]: exchanges routing into ack-tracked queues, with
//!   publisher confirms, mirrored and durable queues, TTL, length limits,
//!   spill-to-secondary-tier, flow control and channel transactions.
//!
//! Around them sit a deterministic fault-injection [`harness`] that checks
//! the no-loss / no-duplication / no-disorder primitives, a threaded load
//! generator in [`bench`], analytic throughput models with fitting in
//! [`model`], and the architecture determination table in [`advisor`].

pub mod advisor;
pub mod bench;
pub mod broker;
pub mod clock;
pub mod correctness;
pub mod exchbroker;
pub mod fault;
pub mod harness;
pub mod hash;
pub mod journal;
pub mod logbroker;
pub mod message;
pub mod model;
pub mod qos;
pub mod fsutil;

pub use broker::{Broker, BrokerError, ConsumerLane, Delivered, EngineKind, ProducerLane};
pub use clock::{Clock, SystemClock, VirtualClock};
pub use correctness::{check_correctness, CorrectnessReport, Violation, ViolationKind};
pub use journal::{EventKind, Journal, JournalEntry, JournalSink};
pub use message::{validate_message, Message, ValidationError};
pub use qos::{ConfirmPolicy, Delivery, FlushPolicy, LogAckMode, Ordering, QoSConfig};
