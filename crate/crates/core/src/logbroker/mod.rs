//! Partitioned append-log engine.
//!
//! Topics are split into partitions; each partition is a set of replicas,
//! one per simulated node, each holding its own [`segment::SegmentedLog`].
//! Producers append batches atomically and are acknowledged according to a
//! [`LogAckMode`]. Consumers pull by offset and lazily commit their position
//! per consumer group. Nothing is removed by consumption: retention
//! ([`LogBroker::purge`]) and compaction ([`LogBroker::compact`]) are the
//! only ways records leave the log.
//!
//! A simulated node crash discards every replica's records above its
//! `flushed_up_to`; flushing follows the topic's [`FlushPolicy`], never the
//! acknowledgement.

pub mod client;
mod group;
mod nodes;
mod partition;
pub mod partitioner;
pub mod segment;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::fault::FailPoints;
use crate::message::Message;
use crate::qos::{FlushPolicy, LogAckMode};

pub use group::{round_robin_assign, Assignment, ConsumerGroup, TopicPartition};
pub use partitioner::{hash_partition, CustomPartitioner, Partitioner};
pub use segment::Record;

use partition::{Ctx, Partition};

pub use nodes::Nodes;

pub const DEFAULT_SEGMENT_BYTES: usize = 1 << 20;
pub const SEVEN_DAYS_MS: u64 = 7 * 24 * 3600 * 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    pub max_age_ms: Option<u64>,
    pub max_messages: Option<u64>,
    pub max_bytes: Option<u64>,
}

impl RetentionPolicy {
    pub fn is_valid(&self) -> bool {
        self.max_age_ms.is_some() || self.max_messages.is_some() || self.max_bytes.is_some()
    }
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        RetentionPolicy { max_age_ms: Some(SEVEN_DAYS_MS), max_messages: None, max_bytes: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicConfig {
    pub name: String,
    pub partitions: u32,
    pub replication_factor: u32,
    #[serde(default)]
    pub retention: RetentionPolicy,
    #[serde(default = "default_segment_bytes")]
    pub segment_bytes: usize,
    #[serde(default)]
    pub flush: FlushPolicy,
}

fn default_segment_bytes() -> usize {
    DEFAULT_SEGMENT_BYTES
}

impl TopicConfig {
    pub fn new(name: impl Into<String>, partitions: u32, replication_factor: u32) -> Self {
        TopicConfig {
            name: name.into(),
            partitions,
            replication_factor,
            retention: RetentionPolicy::default(),
            segment_bytes: DEFAULT_SEGMENT_BYTES,
            flush: FlushPolicy::default(),
        }
    }
}

/// Batching thresholds at the three pipeline stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchingConfig {
    pub producer_batch_messages: usize,
    pub producer_max_delay_ms: u64,
    pub broker_batch_messages: u64,
    pub broker_max_delay_ms: u64,
    pub consumer_fetch_bytes: usize,
}

impl Default for BatchingConfig {
    fn default() -> Self {
        BatchingConfig {
            producer_batch_messages: 200,
            producer_max_delay_ms: 30_000,
            broker_batch_messages: 50_000,
            broker_max_delay_ms: 30_000,
            consumer_fetch_bytes: 1 << 20,
        }
    }
}

impl BatchingConfig {
    pub fn is_valid(&self) -> bool {
        self.producer_batch_messages > 0
            && self.producer_max_delay_ms > 0
            && self.broker_batch_messages > 0
            && self.broker_max_delay_ms > 0
            && self.consumer_fetch_bytes > 0
    }

    /// Broker-side batching expressed as a flush policy.
    pub fn broker_flush(&self) -> FlushPolicy {
        FlushPolicy {
            flush_interval_messages: Some(self.broker_batch_messages),
            flush_interval_ms: Some(self.broker_max_delay_ms),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckPhase {
    Enqueued,
    LeaderAppended,
    QuorumReplicated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppendReceipt {
    /// `None` when an `Acks0` send was silently dropped.
    pub base_offset: Option<u64>,
    pub count: usize,
    pub acked_at_phase: AckPhase,
    pub replicas_holding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FetchResult {
    pub records: Vec<Record>,
    pub high_watermark: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PurgeReport {
    pub removed_per_partition: Vec<usize>,
}

impl PurgeReport {
    pub fn total(&self) -> usize {
        self.removed_per_partition.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CompactReport {
    pub removed: usize,
    pub retained: usize,
    pub distinct_keys: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogError {
    #[error("topic {0} already exists")]
    DuplicateTopic(String),
    #[error("replication factor {needed} exceeds {available} nodes")]
    NotEnoughNodes { needed: u32, available: usize },
    #[error("invalid topic config: {0}")]
    InvalidConfig(String),
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("unknown partition {topic}/{partition}")]
    UnknownPartition { topic: String, partition: u32 },
    #[error("no live replica can serve the request")]
    BrokerDown,
    #[error("only {live} of {required} required replicas hold the batch")]
    NotEnoughReplicas { required: usize, live: usize },
    #[error("append failed")]
    AppendFailed,
    #[error("offset {offset} outside retained range [{start}, {end}]")]
    OffsetOutOfRange { offset: u64, start: u64, end: u64 },
    #[error("member {member} does not own {topic}/{partition} in group {group}")]
    NotAssigned { group: String, member: String, topic: String, partition: u32 },
    #[error("message at offset {offset} has no key")]
    KeylessMessage { offset: u64 },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("node {node} already holds a replica")]
    ReplicaExists { node: usize },
    #[error("corrupt record: {0}")]
    Corrupt(String),
}

struct Topic {
    cfg: TopicConfig,
    partitions: Vec<RwLock<Partition>>,
    partitioner: Partitioner,
}

#[derive(Clone, Debug)]
pub struct LogBrokerConfig {
    pub nodes: usize,
    pub persistence_dir: Option<PathBuf>,
}

impl Default for LogBrokerConfig {
    fn default() -> Self {
        LogBrokerConfig { nodes: 3, persistence_dir: None }
    }
}

struct Inner {
    cfg: LogBrokerConfig,
    nodes: Nodes,
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    groups: Mutex<HashMap<String, ConsumerGroup>>,
    failpoints: FailPoints,
    clock: Arc<dyn Clock>,
    // Test hook: acknowledge every n-th batch without storing it.
    drop_every: Mutex<Option<(u64, u64)>>,
}

/// Handle to an embedded log broker. Cheap to clone; safe to share across
/// producer and consumer threads.
#[derive(Clone)]
pub struct LogBroker {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for LogBroker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogBroker").field("nodes", &self.inner.cfg.nodes).finish()
    }
}

impl LogBroker {
    pub fn new(cfg: LogBrokerConfig) -> Self {
        Self::with_clock(cfg, SystemClock::shared())
    }

    pub fn with_clock(cfg: LogBrokerConfig, clock: Arc<dyn Clock>) -> Self {
        LogBroker {
            inner: Arc::new(Inner {
                nodes: Nodes::new(cfg.nodes),
                cfg,
                topics: RwLock::new(HashMap::new()),
                groups: Mutex::new(HashMap::new()),
                failpoints: FailPoints::new(),
                clock,
                drop_every: Mutex::new(None),
            }),
        }
    }

    pub fn failpoints(&self) -> &FailPoints {
        &self.inner.failpoints
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.inner.clock
    }

    pub fn node_count(&self) -> usize {
        self.inner.nodes.len()
    }

    pub fn is_node_up(&self, node: usize) -> bool {
        self.inner.nodes.is_up(node)
    }

    /// Deliberately broken mode for mutation tests: every `n`-th batch is
    /// acknowledged but never stored.
    pub fn set_drop_every_nth_batch(&self, n: Option<u64>) {
        *self.inner.drop_every.lock().unwrap() = n.map(|n| (n.max(1), 0));
    }

    fn ctx(&self) -> Ctx<'_> {
        Ctx { nodes: &self.inner.nodes, failpoints: &self.inner.failpoints, now: self.inner.clock.now_ns() }
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>, LogError> {
        self.inner.topics.read().unwrap().get(name).cloned().ok_or_else(|| LogError::UnknownTopic(name.to_string()))
    }

    fn partition<'t>(topic: &'t Topic, partition: u32) -> Result<&'t RwLock<Partition>, LogError> {
        topic.partitions.get(partition as usize).ok_or_else(|| LogError::UnknownPartition {
            topic: topic.cfg.name.clone(),
            partition,
        })
    }

    pub fn create_topic(&self, cfg: TopicConfig) -> Result<String, LogError> {
        if cfg.partitions == 0 {
            return Err(LogError::InvalidConfig("partitions must be >= 1".into()));
        }
        if cfg.replication_factor == 0 {
            return Err(LogError::InvalidConfig("replication_factor must be >= 1".into()));
        }
        if !cfg.retention.is_valid() {
            return Err(LogError::InvalidConfig("retention needs at least one bound".into()));
        }
        if !cfg.flush.is_valid() {
            return Err(LogError::InvalidConfig("flush policy needs at least one finite bound".into()));
        }
        if cfg.replication_factor as usize > self.inner.nodes.len() {
            return Err(LogError::NotEnoughNodes { needed: cfg.replication_factor, available: self.inner.nodes.len() });
        }
        let mut topics = self.inner.topics.write().unwrap();
        if topics.contains_key(&cfg.name) {
            return Err(LogError::DuplicateTopic(cfg.name));
        }
        let n = self.inner.nodes.len();
        let partitions = (0..cfg.partitions)
            .map(|p| {
                let replica_nodes: Vec<usize> =
                    (0..cfg.replication_factor as usize).map(|r| (p as usize + r) % n).collect();
                RwLock::new(Partition::new(
                    &cfg.name,
                    p,
                    &replica_nodes,
                    &self.inner.nodes,
                    cfg.segment_bytes,
                    cfg.flush,
                    self.inner.cfg.persistence_dir.clone(),
                ))
            })
            .collect();
        let name = cfg.name.clone();
        topics.insert(name.clone(), Arc::new(Topic { cfg, partitions, partitioner: Partitioner::new() }));
        Ok(name)
    }

    pub fn topic_config(&self, topic: &str) -> Result<TopicConfig, LogError> {
        Ok(self.topic(topic)?.cfg.clone())
    }

    pub fn topic_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.inner.topics.read().unwrap().keys().cloned().collect();
        v.sort();
        v
    }

    /// Partition choice for `key` using the topic's rotating partitioner.
    pub fn partition_for(&self, topic: &str, key: Option<&[u8]>) -> Result<u32, LogError> {
        let t = self.topic(topic)?;
        Ok(t.partitioner.partition_for(key, t.cfg.partitions, None))
    }

    /// Append `msgs` to one partition as a unit: either every message gets a
    /// contiguous offset or none is visible.
    ///
    /// With `Acks0` the caller does not learn about failures: the receipt is
    /// issued at enqueue time and `base_offset` is `None` when the batch was
    /// lost.
    pub fn append_batch(
        &self,
        topic: &str,
        partition: u32,
        msgs: &[Message],
        acks: LogAckMode,
    ) -> Result<AppendReceipt, LogError> {
        let t = self.topic(topic)?;
        let p = Self::partition(&t, partition)?;
        if let Some((n, seen)) = self.inner.drop_every.lock().unwrap().as_mut() {
            *seen += 1;
            if *seen % *n == 0 {
                return Ok(AppendReceipt {
                    base_offset: None,
                    count: msgs.len(),
                    acked_at_phase: AckPhase::LeaderAppended,
                    replicas_holding: 1,
                });
            }
        }
        let result = p.write().unwrap().append(msgs, acks, &self.ctx());
        match (result, acks) {
            (Err(LogError::BrokerDown | LogError::AppendFailed), LogAckMode::Acks0) => Ok(AppendReceipt {
                base_offset: None,
                count: msgs.len(),
                acked_at_phase: AckPhase::Enqueued,
                replicas_holding: 0,
            }),
            (r, _) => r,
        }
    }

    /// Records at or after `offset`, bounded by `max_bytes` (at least one
    /// record when any is visible) and by the high watermark when the topic
    /// is replicated.
    pub fn fetch(&self, topic: &str, partition: u32, offset: u64, max_bytes: usize) -> Result<FetchResult, LogError> {
        let t = self.topic(topic)?;
        let p = Self::partition(&t, partition)?;
        {
            let guard = p.read().unwrap();
            if !guard.needs_sync(&self.inner.nodes) {
                let (records, hw) = guard.fetch(offset, max_bytes, &self.inner.nodes)?;
                return Ok(FetchResult { records, high_watermark: hw });
            }
        }
        let mut guard = p.write().unwrap();
        guard.sync(&self.ctx());
        let (records, hw) = guard.fetch(offset, max_bytes, &self.inner.nodes)?;
        Ok(FetchResult { records, high_watermark: hw })
    }

    pub fn next_offset(&self, topic: &str, partition: u32) -> Result<u64, LogError> {
        let t = self.topic(topic)?;
        let p = Self::partition(&t, partition)?;
        let g = p.read().unwrap();
        Ok(g.next_offset(&self.inner.nodes))
    }

    pub fn log_start(&self, topic: &str, partition: u32) -> Result<u64, LogError> {
        let t = self.topic(topic)?;
        let p = Self::partition(&t, partition)?;
        let g = p.read().unwrap();
        Ok(g.log_start(&self.inner.nodes))
    }

    pub fn high_watermark(&self, topic: &str, partition: u32) -> Result<u64, LogError> {
        let t = self.topic(topic)?;
        let p = Self::partition(&t, partition)?;
        let mut g = p.write().unwrap();
        g.sync(&self.ctx());
        Ok(g.high_watermark)
    }

    /// `(node, next_offset, flushed_up_to)` for every replica of a partition.
    pub fn replica_state(&self, topic: &str, partition: u32) -> Result<Vec<(usize, u64, u64)>, LogError> {
        let t = self.topic(topic)?;
        let p = Self::partition(&t, partition)?;
        let g = p.read().unwrap();
        Ok(g.replicas.iter().map(|r| (r.node, r.end(), r.flushed_up_to)).collect())
    }

    /// Bytes held across every replica of every partition of `topic`.
    pub fn storage_bytes(&self, topic: &str) -> Result<usize, LogError> {
        let t = self.topic(topic)?;
        Ok(t.partitions.iter().map(|p| p.read().unwrap().storage_bytes()).sum())
    }

    /// Deal the partitions of `topics` round-robin over `members`.
    pub fn assign_partitions(&self, group: &str, topics: &[&str], members: &[String]) -> Result<Assignment, LogError> {
        if members.is_empty() {
            return Err(LogError::InvalidConfig("a group needs at least one member".into()));
        }
        let mut parts = Vec::new();
        for name in topics {
            let t = self.topic(name)?;
            parts.extend((0..t.cfg.partitions).map(|p| TopicPartition::new(*name, p)));
        }
        let assignment = round_robin_assign(&parts, members);
        let mut groups = self.inner.groups.lock().unwrap();
        let g = groups.entry(group.to_string()).or_insert_with(|| ConsumerGroup {
            group_id: group.to_string(),
            ..Default::default()
        });
        let mut sorted = members.to_vec();
        sorted.sort();
        sorted.dedup();
        g.members = sorted;
        g.assignment = assignment.clone();
        Ok(assignment)
    }

    pub fn group(&self, group: &str) -> Option<ConsumerGroup> {
        self.inner.groups.lock().unwrap().get(group).cloned()
    }

    pub fn commit_offset(
        &self,
        group: &str,
        member: &str,
        topic: &str,
        partition: u32,
        offset: u64,
    ) -> Result<(), LogError> {
        let end = self.next_offset(topic, partition)?;
        let tp = TopicPartition::new(topic, partition);
        let mut groups = self.inner.groups.lock().unwrap();
        let not_assigned = || LogError::NotAssigned {
            group: group.to_string(),
            member: member.to_string(),
            topic: topic.to_string(),
            partition,
        };
        let g = groups.get_mut(group).ok_or_else(not_assigned)?;
        if g.assignment.get(&tp).map(String::as_str) != Some(member) {
            return Err(not_assigned());
        }
        if offset > end {
            return Err(LogError::OffsetOutOfRange { offset, start: 0, end });
        }
        g.committed.insert(tp, offset);
        Ok(())
    }

    pub fn committed_offset(&self, group: &str, topic: &str, partition: u32) -> Option<u64> {
        let groups = self.inner.groups.lock().unwrap();
        groups.get(group)?.committed.get(&TopicPartition::new(topic, partition)).copied()
    }

    /// Where a (re)starting member resumes: the committed offset, or 0, moved
    /// forward past anything retention already removed.
    pub fn resume_offset(&self, group: &str, topic: &str, partition: u32) -> Result<u64, LogError> {
        let committed = self.committed_offset(group, topic, partition).unwrap_or(0);
        Ok(committed.max(self.log_start(topic, partition)?))
    }

    pub fn purge(&self, topic: &str) -> Result<PurgeReport, LogError> {
        let t = self.topic(topic)?;
        let ctx = self.ctx();
        let removed_per_partition =
            t.partitions.iter().map(|p| p.write().unwrap().purge(&t.cfg.retention, &ctx)).collect();
        Ok(PurgeReport { removed_per_partition })
    }

    pub fn compact(&self, topic: &str, partition: u32) -> Result<CompactReport, LogError> {
        let t = self.topic(topic)?;
        let p = Self::partition(&t, partition)?;
        let r = p.write().unwrap().compact(&self.ctx());
        r
    }

    /// Move the replica of `topic/partition` hosted on `from` to `to`.
    /// The new replica is fully caught up before the old one is dropped.
    pub fn move_partition(&self, topic: &str, partition: u32, from: usize, to: usize) -> Result<(), LogError> {
        let t = self.topic(topic)?;
        let p = Self::partition(&t, partition)?;
        let r = p.write().unwrap().move_replica(from, to, &self.ctx());
        r
    }

    pub fn replica_nodes(&self, topic: &str, partition: u32) -> Result<Vec<usize>, LogError> {
        let t = self.topic(topic)?;
        let p = Self::partition(&t, partition)?;
        let g = p.read().unwrap();
        Ok(g.replicas.iter().map(|r| r.node).collect())
    }

    fn for_each_partition(&self, mut f: impl FnMut(&mut Partition, &Ctx<'_>)) {
        let topics: BTreeMap<String, Arc<Topic>> =
            self.inner.topics.read().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let ctx = self.ctx();
        for t in topics.values() {
            for p in &t.partitions {
                f(&mut p.write().unwrap(), &ctx);
            }
        }
    }

    /// Crash a node: every replica it hosts loses its unflushed suffix.
    pub fn crash_node(&self, node: usize) -> Result<(), LogError> {
        if node >= self.inner.nodes.len() {
            return Err(LogError::UnknownNode(node));
        }
        self.inner.nodes.crash(node);
        self.for_each_partition(|p, ctx| p.sync(ctx));
        Ok(())
    }

    pub fn restart_node(&self, node: usize) -> Result<(), LogError> {
        if node >= self.inner.nodes.len() {
            return Err(LogError::UnknownNode(node));
        }
        self.inner.nodes.restart(node);
        self.for_each_partition(|p, ctx| p.sync(ctx));
        Ok(())
    }

    /// Replicate lagging followers and apply time-based flushes.
    pub fn tick(&self) {
        self.for_each_partition(|p, ctx| p.tick(ctx));
    }

    /// Force every replica to flush.
    pub fn flush_all(&self) {
        self.for_each_partition(|p, ctx| p.flush_all(ctx));
    }
}
