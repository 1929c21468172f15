//! Producer and consumer lanes over a [`LogBroker`] for the load generator.

use std::collections::{BTreeMap, VecDeque};

use super::{Assignment, LogBroker, LogError, Record, TopicPartition};
use crate::broker::{Broker, BrokerError, ConsumerLane, Delivered, EngineKind, ProducerLane};
use crate::message::Message;
use crate::qos::LogAckMode;

#[derive(Clone, Debug)]
pub struct LogLanesConfig {
    pub topics: Vec<String>,
    pub acks: LogAckMode,
    /// A producer batch ships when it reaches this many messages...
    pub batch_messages: usize,
    /// ...or this many payload bytes.
    pub batch_bytes: usize,
    /// ...or its oldest message has waited this long.
    pub linger_ms: u64,
    pub fetch_bytes: usize,
    pub consumers: usize,
    pub group: String,
}

impl Default for LogLanesConfig {
    fn default() -> Self {
        LogLanesConfig {
            topics: vec!["bench".into()],
            acks: LogAckMode::Acks1,
            batch_messages: 200,
            batch_bytes: 16 * 1024,
            linger_ms: 30_000,
            fetch_bytes: 1 << 20,
            consumers: 1,
            group: "bench".into(),
        }
    }
}

/// A log broker with topics already created and partitions assigned to
/// members `c0..c{consumers-1}` of one group.
#[derive(Clone, Debug)]
pub struct LogLanes {
    pub broker: LogBroker,
    cfg: LogLanesConfig,
    assignment: Assignment,
}

pub fn member_name(i: usize) -> String {
    format!("c{i}")
}

fn to_broker_error(e: LogError) -> BrokerError {
    match e {
        LogError::BrokerDown | LogError::NotEnoughReplicas { .. } => BrokerError::Down(e.to_string()),
        other => BrokerError::Failed(other.to_string()),
    }
}

impl LogLanes {
    pub fn new(broker: LogBroker, cfg: LogLanesConfig) -> Result<Self, LogError> {
        let members: Vec<String> = (0..cfg.consumers.max(1)).map(member_name).collect();
        let topics: Vec<&str> = cfg.topics.iter().map(String::as_str).collect();
        let assignment = broker.assign_partitions(&cfg.group, &topics, &members)?;
        Ok(LogLanes { broker, cfg, assignment })
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }
}

pub struct LogProducer {
    broker: LogBroker,
    topic: String,
    acks: LogAckMode,
    batch_messages: usize,
    batch_bytes: usize,
    linger_ns: u64,
    sticky: Option<u32>,
    buffers: BTreeMap<u32, (Vec<Message>, usize)>,
}

impl LogProducer {
    fn ship(&mut self, partition: u32) -> Result<(), BrokerError> {
        let Some((batch, _)) = self.buffers.remove(&partition) else { return Ok(()) };
        if batch.is_empty() {
            return Ok(());
        }
        if self.sticky == Some(partition) {
            self.sticky = None;
        }
        self.broker.append_batch(&self.topic, partition, &batch, self.acks).map_err(to_broker_error)?;
        Ok(())
    }
}

impl ProducerLane for LogProducer {
    fn send(&mut self, msg: Message) -> Result<(), BrokerError> {
        let partition = match &msg.key {
            Some(k) => self.broker.partition_for(&self.topic, Some(k)).map_err(to_broker_error)?,
            // Keyless records stick to one partition until its batch ships.
            None => match self.sticky {
                Some(p) => p,
                None => {
                    let p = self.broker.partition_for(&self.topic, None).map_err(to_broker_error)?;
                    self.sticky = Some(p);
                    p
                }
            },
        };
        let now = self.broker.clock().now_ns();
        let buf = self.buffers.entry(partition).or_default();
        buf.1 += msg.payload.len();
        buf.0.push(msg);
        let full = buf.0.len() >= self.batch_messages || buf.1 >= self.batch_bytes;
        if full {
            self.ship(partition)?;
        }
        let stale: Vec<u32> = self
            .buffers
            .iter()
            .filter(|(_, (b, _))| b.first().is_some_and(|m| now.saturating_sub(m.produced_at) >= self.linger_ns))
            .map(|(p, _)| *p)
            .collect();
        for p in stale {
            self.ship(p)?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), BrokerError> {
        let parts: Vec<u32> = self.buffers.keys().copied().collect();
        for p in parts {
            self.ship(p)?;
        }
        Ok(())
    }
}

pub struct LogConsumer {
    broker: LogBroker,
    group: String,
    member: String,
    fetch_bytes: usize,
    /// Owned partitions with the next offset to fetch.
    owned: Vec<(TopicPartition, u64)>,
    next: usize,
    /// Records fetched but not yet handed out, with their owner index.
    buffered: VecDeque<(usize, Record)>,
}

impl LogConsumer {
    /// Fill the buffer from the next partition that has data.
    fn refill(&mut self) -> Result<(), BrokerError> {
        let n = self.owned.len();
        for k in 0..n {
            let i = (self.next + k) % n;
            let (tp, pos) = &mut self.owned[i];
            let fetched = match self.broker.fetch(&tp.topic, tp.partition, *pos, self.fetch_bytes) {
                Ok(f) => f,
                Err(LogError::OffsetOutOfRange { .. }) => {
                    *pos = self.broker.log_start(&tp.topic, tp.partition).map_err(to_broker_error)?;
                    continue;
                }
                Err(e) => return Err(to_broker_error(e)),
            };
            if let Some(last) = fetched.records.last() {
                *pos = last.offset + 1;
                self.buffered.extend(fetched.records.into_iter().map(|r| (i, r)));
                self.next = (i + 1) % n;
                return Ok(());
            }
        }
        Ok(())
    }
}

impl ConsumerLane for LogConsumer {
    fn poll(&mut self, max: usize) -> Result<Vec<Delivered>, BrokerError> {
        if self.buffered.is_empty() {
            self.refill()?;
        }
        let now = self.broker.clock().now_ns();
        let take = max.min(self.buffered.len());
        let mut commits: BTreeMap<usize, u64> = BTreeMap::new();
        let out = self
            .buffered
            .drain(..take)
            .map(|(i, r)| {
                commits.insert(i, r.offset + 1);
                Delivered { msg: r.message, at_ns: now }
            })
            .collect();
        for (i, offset) in commits {
            let tp = &self.owned[i].0;
            self.broker
                .commit_offset(&self.group, &self.member, &tp.topic, tp.partition, offset)
                .map_err(to_broker_error)?;
        }
        Ok(out)
    }
}

impl Broker for LogLanes {
    fn kind(&self) -> EngineKind {
        EngineKind::Log
    }

    fn clock(&self) -> std::sync::Arc<dyn crate::clock::Clock> {
        self.broker.clock().clone()
    }

    fn producer(&self, index: usize) -> Box<dyn ProducerLane> {
        Box::new(LogProducer {
            broker: self.broker.clone(),
            topic: self.cfg.topics[index % self.cfg.topics.len()].clone(),
            acks: self.cfg.acks,
            batch_messages: self.cfg.batch_messages.max(1),
            batch_bytes: self.cfg.batch_bytes.max(1),
            linger_ns: self.cfg.linger_ms.saturating_mul(1_000_000),
            sticky: None,
            buffers: BTreeMap::new(),
        })
    }

    fn consumer(&self, index: usize) -> Box<dyn ConsumerLane> {
        let member = member_name(index);
        let owned = self
            .assignment
            .iter()
            .filter(|(_, m)| **m == member)
            .map(|(tp, _)| {
                let pos = self.broker.resume_offset(&self.cfg.group, &tp.topic, tp.partition).unwrap_or(0);
                (tp.clone(), pos)
            })
            .collect();
        Box::new(LogConsumer {
            broker: self.broker.clone(),
            group: self.cfg.group.clone(),
            member,
            fetch_bytes: self.cfg.fetch_bytes,
            owned,
            next: 0,
            buffered: VecDeque::new(),
        })
    }

    fn payload_bytes_stored(&self) -> u64 {
        self.cfg.topics.iter().filter_map(|t| self.broker.storage_bytes(t).ok()).sum::<usize>() as u64
    }

    fn maintenance(&self) {
        self.broker.tick();
        for t in &self.cfg.topics {
            let _ = self.broker.purge(t);
        }
    }
}
