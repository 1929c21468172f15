//! Exchange/binding/queue engine.
//!
//! Producers publish through a [`Channel`] to an exchange, which routes each
//! message into zero or more [`queue::BoundQueue`]s according to its
//! bindings. One payload copy is shared by every queue it lands in.
//! Consumers attach to a queue in push or pull mode and acknowledge each
//! delivery; only an ack (or TTL, or a length limit) removes an entry.
//!
//! Simulated nodes host queues and their mirrors. Crashing a node promotes a
//! live mirror when one exists; otherwise the queue keeps only its persisted
//! entries.

mod channel;
pub mod client;
pub mod model;
pub mod queue;
pub mod routing;
pub mod topic;
pub mod topology;

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::fault::{sites, FailAction, FailPoints};
use crate::logbroker::segment::decode_record;
use crate::message::{validate_message, Message, ValidationError};
use crate::qos::ConfirmPolicy;

pub use channel::{Channel, Confirm, ConfirmStage};
pub use model::{Binding, Exchange, ExchangeKind, MatchMode, OverflowPolicy, QueueSpec};
pub use queue::{LimitAction, QueueStats};
pub use topology::Topology;

use queue::{Accounting, Body, BoundQueue, EnqueueOutcome, Entry, PendingDelivery, SharedBody};

pub const FLOW_HIGH_WATERMARK: f64 = 0.8;
pub const FLOW_LOW_WATERMARK: f64 = 0.6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExchError {
    #[error("unknown exchange {0:?}")]
    UnknownExchange(String),
    #[error("unknown queue {0:?}")]
    UnknownQueue(String),
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("declaration conflicts with existing {0}")]
    SpecConflict(String),
    #[error("invalid declaration: {0}")]
    Invalid(String),
    #[error("invalid message: {0}")]
    InvalidMessage(#[from] ValidationError),
    #[error("unknown delivery tag {0}")]
    UnknownTag(u64),
    #[error("channel is not in transaction mode")]
    NotInTx,
    #[error("broker down: {0}")]
    BrokerDown(String),
    #[error("publishers blocked by flow control")]
    FlowBlocked,
    #[error("confirm window full")]
    WindowFull,
    #[error("transaction partially applied: {applied} of {total} publishes")]
    PartialFailure { applied: usize, total: usize },
}

/// Simulated cost of reading a delivery, applied outside the queue lock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub memory_read_ns: u64,
    /// Multiplier applied to `memory_read_ns` for entries read back from the
    /// spill tier.
    pub spill_penalty_factor: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { memory_read_ns: 0, spill_penalty_factor: 10 }
    }
}

#[derive(Clone, Debug)]
pub struct ExchConfig {
    pub nodes: usize,
    /// Broker-wide payload memory budget used for flow control.
    pub memory_budget_bytes: Option<u64>,
    pub cost: CostModel,
}

impl Default for ExchConfig {
    fn default() -> Self {
        ExchConfig { nodes: 3, memory_budget_bytes: None, cost: CostModel::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ExchangeRef {
    pub vhost: String,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QueueRef {
    pub vhost: String,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Routed {
    Queues(BTreeSet<String>),
    Unroutable,
}

#[derive(Default)]
struct Vhost {
    exchanges: HashMap<String, Exchange>,
    bindings: HashMap<String, Vec<Binding>>,
    queues: HashMap<String, Arc<Mutex<BoundQueue>>>,
}

/// Outcome of routing and enqueueing one message.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PublishOutcome {
    pub ack: bool,
    pub routed: usize,
    pub stage: ConfirmStage,
}

struct Inner {
    cfg: ExchConfig,
    clock: Arc<dyn Clock>,
    failpoints: FailPoints,
    vhosts: RwLock<HashMap<String, Vhost>>,
    nodes: Mutex<Vec<bool>>,
    acct: Arc<Accounting>,
    entry_ids: AtomicU64,
    delivery_tags: AtomicU64,
    consumer_tags: AtomicU64,
    channel_ids: AtomicU64,
    flow: Mutex<bool>,
    flow_cv: Condvar,
    avail: Mutex<u64>,
    avail_cv: Condvar,
}

/// Handle to an exchange engine; cheap to clone and shareable across threads.
#[derive(Clone)]
pub struct ExchBroker {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for ExchBroker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExchBroker").field("nodes", &self.inner.cfg.nodes).finish()
    }
}

impl Default for ExchBroker {
    fn default() -> Self {
        ExchBroker::new(ExchConfig::default())
    }
}

impl ExchBroker {
    pub fn new(cfg: ExchConfig) -> Self {
        Self::with_clock(cfg, SystemClock::shared())
    }

    pub fn with_clock(cfg: ExchConfig, clock: Arc<dyn Clock>) -> Self {
        let nodes = cfg.nodes.max(1);
        ExchBroker {
            inner: Arc::new(Inner {
                cfg,
                clock,
                failpoints: FailPoints::new(),
                vhosts: RwLock::new(HashMap::new()),
                nodes: Mutex::new(vec![true; nodes]),
                acct: Arc::new(Accounting::default()),
                entry_ids: AtomicU64::new(0),
                delivery_tags: AtomicU64::new(0),
                consumer_tags: AtomicU64::new(0),
                channel_ids: AtomicU64::new(0),
                flow: Mutex::new(false),
                flow_cv: Condvar::new(),
                avail: Mutex::new(0),
                avail_cv: Condvar::new(),
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
        self.inner.nodes.lock().unwrap().len()
    }

    pub fn is_node_up(&self, node: usize) -> bool {
        self.inner.nodes.lock().unwrap().get(node).copied().unwrap_or(false)
    }

    pub fn declare_exchange(&self, ex: Exchange) -> Result<ExchangeRef, ExchError> {
        if ex.name.is_empty() || ex.vhost.is_empty() {
            return Err(ExchError::Invalid("exchange and vhost names must be non-empty".into()));
        }
        let mut vhosts = self.inner.vhosts.write().unwrap();
        let vh = vhosts.entry(ex.vhost.clone()).or_default();
        let r = ExchangeRef { vhost: ex.vhost.clone(), name: ex.name.clone() };
        match vh.exchanges.get(&ex.name) {
            Some(existing) if *existing == ex => Ok(r),
            Some(_) => Err(ExchError::SpecConflict(format!("exchange {:?}", ex.name))),
            None => {
                vh.exchanges.insert(ex.name.clone(), ex);
                Ok(r)
            }
        }
    }

    pub fn declare_queue(&self, spec: QueueSpec) -> Result<QueueRef, ExchError> {
        if spec.name.is_empty() || spec.vhost.is_empty() {
            return Err(ExchError::Invalid("queue and vhost names must be non-empty".into()));
        }
        let n = self.node_count();
        if spec.node >= n || spec.mirrors.iter().any(|&m| m >= n || m == spec.node) {
            return Err(ExchError::Invalid(format!("queue {:?} placed on a missing or duplicate node", spec.name)));
        }
        let mut vhosts = self.inner.vhosts.write().unwrap();
        let vh = vhosts.entry(spec.vhost.clone()).or_default();
        let r = QueueRef { vhost: spec.vhost.clone(), name: spec.name.clone() };
        match vh.queues.get(&spec.name) {
            Some(existing) if existing.lock().unwrap().spec == spec => Ok(r),
            Some(_) => Err(ExchError::SpecConflict(format!("queue {:?}", spec.name))),
            None => {
                vh.queues.insert(spec.name.clone(), Arc::new(Mutex::new(BoundQueue::new(spec))));
                Ok(r)
            }
        }
    }

    pub fn bind(&self, b: Binding) -> Result<(), ExchError> {
        let mut vhosts = self.inner.vhosts.write().unwrap();
        let vh = vhosts
            .get_mut(&b.vhost)
            .ok_or_else(|| ExchError::UnknownEntity(format!("vhost {:?}", b.vhost)))?;
        let kind = vh
            .exchanges
            .get(&b.exchange)
            .ok_or_else(|| ExchError::UnknownEntity(format!("exchange {:?}", b.exchange)))?
            .kind;
        if !vh.queues.contains_key(&b.queue) {
            return Err(ExchError::UnknownEntity(format!("queue {:?}", b.queue)));
        }
        if kind == ExchangeKind::Topic {
            match b.pattern.as_deref() {
                Some(p) if topic::is_valid_pattern(p) => {}
                _ => return Err(ExchError::Invalid(format!("binding to topic exchange {:?} needs a valid pattern", b.exchange))),
            }
        }
        let list = vh.bindings.entry(b.exchange.clone()).or_default();
        if !list.contains(&b) {
            list.push(b);
        }
        Ok(())
    }

    pub fn exchange(&self, vhost: &str, name: &str) -> Option<Exchange> {
        self.inner.vhosts.read().unwrap().get(vhost)?.exchanges.get(name).cloned()
    }

    pub fn queue_names(&self, vhost: &str) -> Vec<String> {
        let vhosts = self.inner.vhosts.read().unwrap();
        let mut names: Vec<String> = vhosts.get(vhost).map(|v| v.queues.keys().cloned().collect()).unwrap_or_default();
        names.sort();
        names
    }

    fn queue(&self, vhost: &str, name: &str) -> Result<Arc<Mutex<BoundQueue>>, ExchError> {
        self.inner
            .vhosts
            .read()
            .unwrap()
            .get(vhost)
            .and_then(|v| v.queues.get(name).cloned())
            .ok_or_else(|| ExchError::UnknownQueue(name.to_string()))
    }

    /// Queues a message would be routed to, following the alternate exchange
    /// once when the first exchange selects nothing.
    pub fn route(&self, vhost: &str, exchange: &str, msg: &Message) -> Result<Routed, ExchError> {
        let vhosts = self.inner.vhosts.read().unwrap();
        let vh = vhosts.get(vhost).ok_or_else(|| ExchError::UnknownExchange(exchange.to_string()))?;
        let ex = vh.exchanges.get(exchange).ok_or_else(|| ExchError::UnknownExchange(exchange.to_string()))?;
        let select = |ex: &Exchange| {
            let bindings = vh.bindings.get(&ex.name).map(Vec::as_slice).unwrap_or(&[]);
            routing::select_queues(ex.kind, bindings, msg)
        };
        let mut queues = select(ex);
        if queues.is_empty() {
            if let Some(alt) = ex.alternate.as_ref().and_then(|a| vh.exchanges.get(a)) {
                queues = select(alt);
            }
        }
        Ok(if queues.is_empty() { Routed::Unroutable } else { Routed::Queues(queues) })
    }

    pub fn open_channel(&self) -> Channel {
        let id = self.inner.channel_ids.fetch_add(1, Ordering::Relaxed) + 1;
        Channel::new(self.clone(), id)
    }

    fn entry_deadline(&self, spec: &QueueSpec, msg: &Message, now: u64) -> Option<u64> {
        let ttl_ms = match msg.ttl_ms {
            Some(t) => Some(t.max(0) as u64),
            None => spec.default_ttl_ms,
        };
        ttl_ms.map(|t| now.saturating_add(t.saturating_mul(1_000_000)))
    }

    /// Route and enqueue one message. `Err` means no confirm is issued.
    pub(crate) fn publish_inner(
        &self,
        vhost: &str,
        exchange: &str,
        msg: Message,
        persistent: bool,
        policy: ConfirmPolicy,
    ) -> Result<PublishOutcome, ExchError> {
        validate_message(&msg)?;
        if self.flow_blocked() {
            return Err(ExchError::FlowBlocked);
        }
        let queues = match self.route(vhost, exchange, &msg)? {
            Routed::Unroutable => {
                return Ok(PublishOutcome { ack: true, routed: 0, stage: ConfirmStage::Unroutable });
            }
            Routed::Queues(q) => q,
        };
        let handles: Vec<_> = queues.iter().map(|q| self.queue(vhost, q)).collect::<Result<_, _>>()?;
        let now = self.inner.clock.now_ns();
        let flow: Arc<str> = Arc::from(msg.flow_id.as_str());
        let seq = msg.seq_no;
        let payload_len = msg.payload.len() as u64;
        let body = SharedBody::new(msg, &self.inner.acct);
        let fp = &self.inner.failpoints;
        let mut ack = true;
        let mut stage = ConfirmStage::Enqueued;
        for h in &handles {
            let mut q = h.lock().unwrap();
            let home = q.home;
            if !self.is_node_up(home) {
                return Err(ExchError::BrokerDown(format!("node {home} hosting queue {:?}", q.spec.name)));
            }
            match fp.hit(sites::EXCH_ENQUEUE) {
                Some(FailAction::Error) => {
                    ack = false;
                    continue;
                }
                Some(FailAction::Crash) => {
                    drop(q);
                    self.crash_node(home);
                    return Err(ExchError::BrokerDown(format!("node {home} crashed on enqueue")));
                }
                None => {}
            }
            let persist = persistent && q.spec.durable;
            if persist && policy.persistent {
                match fp.hit(sites::EXCH_FSYNC) {
                    Some(FailAction::Error) => {
                        ack = false;
                        continue;
                    }
                    Some(FailAction::Crash) => {
                        drop(q);
                        self.crash_node(home);
                        return Err(ExchError::BrokerDown(format!("node {home} crashed before fsync")));
                    }
                    None => {}
                }
                stage = stage.max(ConfirmStage::Persisted);
            }
            let entry = Entry {
                id: self.inner.entry_ids.fetch_add(1, Ordering::Relaxed),
                flow: flow.clone(),
                seq,
                body: Body::Memory(body.clone()),
                payload_len,
                persisted: persist,
                redelivered: false,
                expires_at: self.entry_deadline(&q.spec, &body.msg, now),
            };
            let (outcome, _) = q.enqueue(entry, persist, &self.inner.acct);
            if outcome == EnqueueOutcome::Rejected {
                ack = false;
                continue;
            }
            if policy.mirrored && !q.spec.mirrors.is_empty() {
                let mirrors = q.live_mirrors.clone();
                let mut all = mirrors.len() == q.spec.mirrors.len();
                for m in mirrors {
                    match fp.hit(sites::EXCH_MIRROR) {
                        None => {}
                        Some(FailAction::Error) => all = false,
                        Some(FailAction::Crash) => {
                            q.live_mirrors.retain(|&x| x != m);
                            all = false;
                        }
                    }
                }
                if all {
                    stage = stage.max(ConfirmStage::Mirrored);
                } else {
                    ack = false;
                }
            }
            q.dispatch(now, &self.inner.delivery_tags, &self.inner.acct);
        }
        drop(body);
        self.update_flow();
        self.notify_available();
        Ok(PublishOutcome { ack, routed: handles.len(), stage })
    }

    /// Whether publishers are currently held back by flow control.
    pub fn flow_blocked(&self) -> bool {
        *self.inner.flow.lock().unwrap()
    }

    /// Payload bytes held in memory, each shared body counted once.
    pub fn memory_bytes(&self) -> u64 {
        self.inner.acct.payload_bytes.load(Ordering::Relaxed)
    }

    /// In-memory payload plus the size of spilled records.
    pub fn payload_bytes_stored(&self) -> u64 {
        self.memory_bytes() + self.inner.acct.spilled_bytes.load(Ordering::Relaxed)
    }

    fn update_flow(&self) {
        let Some(budget) = self.inner.cfg.memory_budget_bytes else { return };
        let used = self.memory_bytes() as f64;
        let budget = budget as f64;
        let mut blocked = self.inner.flow.lock().unwrap();
        if !*blocked && used >= FLOW_HIGH_WATERMARK * budget {
            *blocked = true;
        } else if *blocked && used <= FLOW_LOW_WATERMARK * budget {
            *blocked = false;
            self.inner.flow_cv.notify_all();
        }
    }

    /// Wait until flow control releases publishers or `timeout` elapses.
    pub(crate) fn wait_flow(&self, timeout: Duration) -> bool {
        let blocked = self.inner.flow.lock().unwrap();
        let (blocked, _) = self.inner.flow_cv.wait_timeout_while(blocked, timeout, |b| *b).unwrap();
        !*blocked
    }

    fn notify_available(&self) {
        *self.inner.avail.lock().unwrap() += 1;
        self.inner.avail_cv.notify_all();
    }

    fn wait_available(&self, seen: u64, timeout: Duration) -> u64 {
        let g = self.inner.avail.lock().unwrap();
        let (g, _) = self.inner.avail_cv.wait_timeout_while(g, timeout, |v| *v == seen).unwrap();
        *g
    }

    fn with_queue<T>(&self, vhost: &str, queue: &str, f: impl FnOnce(&mut BoundQueue) -> T) -> Result<T, ExchError> {
        let h = self.queue(vhost, queue)?;
        let mut q = h.lock().unwrap();
        Ok(f(&mut q))
    }

    /// Remove expired ready entries; returns how many were dropped.
    pub fn expire_ttl(&self, vhost: &str, queue: &str) -> Result<usize, ExchError> {
        let now = self.inner.clock.now_ns();
        let n = self.with_queue(vhost, queue, |q| q.expire(now, &self.inner.acct))?;
        self.update_flow();
        Ok(n)
    }

    pub fn enforce_limits(&self, vhost: &str, queue: &str) -> Result<LimitAction, ExchError> {
        let mut action = self.with_queue(vhost, queue, |q| q.enforce_limits(&self.inner.acct))?;
        self.update_flow();
        action.flow_blocked = self.flow_blocked();
        Ok(action)
    }

    /// Expire TTLs on every queue of every vhost.
    pub fn maintenance(&self) {
        let now = self.inner.clock.now_ns();
        for q in self.all_queues() {
            q.lock().unwrap().expire(now, &self.inner.acct);
        }
        self.update_flow();
    }

    fn all_queues(&self) -> Vec<Arc<Mutex<BoundQueue>>> {
        let vhosts = self.inner.vhosts.read().unwrap();
        vhosts.values().flat_map(|v| v.queues.values().cloned()).collect()
    }

    pub fn queue_len(&self, vhost: &str, queue: &str) -> Result<usize, ExchError> {
        self.with_queue(vhost, queue, |q| q.len())
    }

    pub fn queue_stats(&self, vhost: &str, queue: &str) -> Result<QueueStats, ExchError> {
        self.with_queue(vhost, queue, |q| q.stats)
    }

    /// `(flow, seq)` of ready entries in delivery order.
    pub fn queue_contents(&self, vhost: &str, queue: &str) -> Result<Vec<(String, u64)>, ExchError> {
        self.with_queue(vhost, queue, |q| q.ready_ids())
    }

    pub fn spilled_len(&self, vhost: &str, queue: &str) -> Result<usize, ExchError> {
        self.with_queue(vhost, queue, |q| q.spilled_len())
    }

    /// Ready plus unacked entries across every queue.
    pub fn total_entries(&self) -> usize {
        self.all_queues().iter().map(|q| q.lock().unwrap().total_entries()).sum()
    }

    pub fn queue_home(&self, vhost: &str, queue: &str) -> Result<(usize, Vec<usize>), ExchError> {
        self.with_queue(vhost, queue, |q| (q.home, q.live_mirrors.clone()))
    }

    /// Crash a simulated node. Queues homed there fail over to a live mirror
    /// or fall back to their persisted entries.
    pub fn crash_node(&self, node: usize) {
        {
            let mut nodes = self.inner.nodes.lock().unwrap();
            match nodes.get_mut(node) {
                Some(up) if *up => *up = false,
                _ => return,
            }
        }
        for h in self.all_queues() {
            let mut q = h.lock().unwrap();
            q.live_mirrors.retain(|&m| m != node);
            if q.home != node {
                continue;
            }
            if let Some(&m) = q.live_mirrors.first() {
                q.home = m;
                q.live_mirrors.remove(0);
            } else {
                q.lose_volatile(&self.inner.acct);
            }
        }
        self.update_flow();
    }

    pub fn restart_node(&self, node: usize) {
        {
            let mut nodes = self.inner.nodes.lock().unwrap();
            match nodes.get_mut(node) {
                Some(up) if !*up => *up = true,
                _ => return,
            }
        }
        for h in self.all_queues() {
            let mut q = h.lock().unwrap();
            let q = &mut *q;
            let hosts_copy = q.spec.node == node || q.spec.mirrors.contains(&node);
            if hosts_copy && q.home != node && !q.live_mirrors.contains(&node) {
                if self.is_node_up(q.home) {
                    q.live_mirrors.push(node);
                } else {
                    q.home = node;
                }
            }
        }
        self.notify_available();
    }

    /// Attach a consumer to a queue.
    pub fn consume(&self, vhost: &str, queue: &str, consumer_id: &str, opts: ConsumeOptions) -> Result<ConsumerHandle, ExchError> {
        let h = self.queue(vhost, queue)?;
        let tag = self.inner.consumer_tags.fetch_add(1, Ordering::Relaxed) + 1;
        h.lock().unwrap().add_consumer(tag, opts.prefetch, opts.auto_ack, opts.mode == ConsumeMode::Push);
        Ok(ConsumerHandle {
            broker: self.clone(),
            queue: h,
            queue_name: queue.to_string(),
            consumer_id: consumer_id.to_string(),
            tag,
            opts,
            closed: false,
        })
    }

    fn settle(&self) {
        self.update_flow();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsumeMode {
    Push,
    Pull,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumeOptions {
    pub mode: ConsumeMode,
    /// Maximum unacked deliveries; 0 means unlimited.
    pub prefetch: u32,
    pub auto_ack: bool,
}

impl Default for ConsumeOptions {
    fn default() -> Self {
        ConsumeOptions { mode: ConsumeMode::Pull, prefetch: 0, auto_ack: false }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub delivery_tag: u64,
    pub redelivered: bool,
    pub msg: Message,
}

/// A consumer attached to one queue. Dropping it requeues its unacked
/// deliveries.
pub struct ConsumerHandle {
    broker: ExchBroker,
    queue: Arc<Mutex<BoundQueue>>,
    queue_name: String,
    consumer_id: String,
    tag: u64,
    opts: ConsumeOptions,
    closed: bool,
}

impl std::fmt::Debug for ConsumerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConsumerHandle")
            .field("queue", &self.queue_name)
            .field("consumer_id", &self.consumer_id)
            .field("tag", &self.tag)
            .finish()
    }
}

impl ConsumerHandle {
    pub fn consumer_id(&self) -> &str {
        &self.consumer_id
    }

    pub fn queue_name(&self) -> &str {
        &self.queue_name
    }

    fn lock(&self) -> MutexGuard<'_, BoundQueue> {
        self.queue.lock().unwrap()
    }

    fn materialize(&self, pending: Vec<PendingDelivery>) -> Vec<Delivery> {
        let cost = self.broker.inner.cfg.cost;
        let mut penalty_ns = 0u64;
        let out = pending
            .into_iter()
            .map(|p| {
                let msg = match p.body {
                    Body::Memory(b) => {
                        penalty_ns += cost.memory_read_ns;
                        b.msg.clone()
                    }
                    Body::Spilled(bytes) => {
                        penalty_ns += cost.memory_read_ns * u64::from(cost.spill_penalty_factor);
                        decode_record(&bytes).expect("spilled record written by this process").0.message
                    }
                };
                Delivery { delivery_tag: p.delivery_tag, redelivered: p.redelivered, msg }
            })
            .collect();
        if penalty_ns > 0 {
            std::thread::sleep(Duration::from_nanos(penalty_ns));
        }
        if self.opts.auto_ack {
            self.broker.settle();
        }
        out
    }

    /// Up to `max` deliveries available now; never blocks.
    pub fn recv(&mut self, max: usize) -> Vec<Delivery> {
        let now = self.broker.inner.clock.now_ns();
        let inner = &self.broker.inner;
        let pending = {
            let mut q = self.lock();
            if !self.broker.is_node_up(q.home) {
                return Vec::new();
            }
            match self.opts.mode {
                ConsumeMode::Push => {
                    q.dispatch(now, &inner.delivery_tags, &inner.acct);
                    q.take_mailbox(self.tag, max)
                }
                ConsumeMode::Pull => q.get(self.tag, max, now, &inner.delivery_tags, &inner.acct),
            }
        };
        self.materialize(pending)
    }

    /// Like [`recv`](Self::recv) but waits up to `timeout` for something to
    /// arrive.
    pub fn recv_timeout(&mut self, max: usize, timeout: Duration) -> Vec<Delivery> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let seen = *self.broker.inner.avail.lock().unwrap();
            let got = self.recv(max);
            if !got.is_empty() {
                return got;
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return got;
            }
            self.broker.wait_available(seen, deadline - now);
        }
    }

    pub fn ack(&mut self, delivery_tag: u64) -> Result<(), ExchError> {
        let ok = self.lock().ack(self.tag, delivery_tag, &self.broker.inner.acct);
        if !ok {
            return Err(ExchError::UnknownTag(delivery_tag));
        }
        self.broker.settle();
        Ok(())
    }

    pub fn nack(&mut self, delivery_tag: u64, requeue: bool) -> Result<(), ExchError> {
        let ok = self.lock().nack(self.tag, delivery_tag, requeue, &self.broker.inner.acct);
        if !ok {
            return Err(ExchError::UnknownTag(delivery_tag));
        }
        self.broker.settle();
        if requeue {
            self.broker.notify_available();
        }
        Ok(())
    }

    /// Requeue every unacked and undelivered delivery of this consumer.
    pub fn recover(&mut self) -> usize {
        let n = self.lock().requeue_consumer(self.tag, &self.broker.inner.acct);
        self.broker.settle();
        self.broker.notify_available();
        n
    }

    pub fn unacked(&self) -> usize {
        self.lock().unacked_len()
    }

    pub fn close(mut self) -> usize {
        self.detach()
    }

    fn detach(&mut self) -> usize {
        if self.closed {
            return 0;
        }
        self.closed = true;
        let n = self.lock().remove_consumer(self.tag, &self.broker.inner.acct);
        self.broker.settle();
        self.broker.notify_available();
        n
    }
}

impl Drop for ConsumerHandle {
    fn drop(&mut self) {
        self.detach();
    }
}
