//! Ack-tracked FIFO with per-flow insertion by sequence number.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::model::{OverflowPolicy, QueueSpec};
use crate::logbroker::segment::encode_record;
use crate::message::Message;

/// Broker-wide payload accounting. Bodies shared by several queues are
/// counted once.
#[derive(Debug, Default)]
pub struct Accounting {
    pub payload_bytes: AtomicU64,
    pub bodies: AtomicU64,
    pub spilled_bytes: AtomicU64,
}

#[derive(Debug)]
pub struct SharedBody {
    pub msg: Message,
    acct: Arc<Accounting>,
}

impl SharedBody {
    pub fn new(msg: Message, acct: &Arc<Accounting>) -> Arc<Self> {
        acct.payload_bytes.fetch_add(msg.payload.len() as u64, Ordering::Relaxed);
        acct.bodies.fetch_add(1, Ordering::Relaxed);
        Arc::new(SharedBody { msg, acct: acct.clone() })
    }
}

impl Drop for SharedBody {
    fn drop(&mut self) {
        self.acct.payload_bytes.fetch_sub(self.msg.payload.len() as u64, Ordering::Relaxed);
        self.acct.bodies.fetch_sub(1, Ordering::Relaxed);
    }
}

#[derive(Clone, Debug)]
pub enum Body {
    Memory(Arc<SharedBody>),
    /// Encoded with the segment record layout.
    Spilled(Arc<[u8]>),
}

impl Body {
    pub fn is_spilled(&self) -> bool {
        matches!(self, Body::Spilled(_))
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub id: u64,
    pub flow: Arc<str>,
    pub seq: u64,
    pub body: Body,
    pub payload_len: u64,
    pub persisted: bool,
    pub redelivered: bool,
    pub expires_at: Option<u64>,
}

impl Entry {
    fn expired(&self, now: u64) -> bool {
        self.expires_at.is_some_and(|t| t <= now)
    }
}

/// A delivery handed to a consumer but not yet read by it.
#[derive(Clone, Debug)]
pub struct PendingDelivery {
    pub delivery_tag: u64,
    pub body: Body,
    pub redelivered: bool,
}

#[derive(Debug)]
struct QConsumer {
    tag: u64,
    prefetch: u32,
    auto_ack: bool,
    push: bool,
    mailbox: VecDeque<PendingDelivery>,
    unacked: usize,
}

impl QConsumer {
    fn has_room(&self) -> bool {
        self.prefetch == 0 || (self.unacked + self.mailbox.len()) < self.prefetch as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub enqueued: u64,
    pub deduplicated: u64,
    pub delivered: u64,
    pub redelivered: u64,
    pub acked: u64,
    pub expired: u64,
    pub dropped: u64,
    pub rejected: u64,
    pub spilled: u64,
    pub spill_reads: u64,
}

/// What a limit check did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LimitAction {
    pub dropped: usize,
    pub spilled: usize,
    pub rejected: bool,
    pub spilled_state: bool,
    pub flow_blocked: bool,
}

#[derive(Debug, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Accepted,
    Duplicate,
    Rejected,
}

#[derive(Debug)]
pub struct BoundQueue {
    pub spec: QueueSpec,
    ready: VecDeque<Entry>,
    unacked: HashMap<u64, (u64, Entry)>,
    present: HashSet<(Arc<str>, u64)>,
    flow_max: HashMap<Arc<str>, u64>,
    durable_store: HashMap<u64, Vec<u8>>,
    consumers: Vec<QConsumer>,
    rr: usize,
    mem_bytes: u64,
    spilled_ready: usize,
    pub live_mirrors: Vec<usize>,
    pub home: usize,
    pub stats: QueueStats,
}

impl BoundQueue {
    pub fn new(spec: QueueSpec) -> Self {
        BoundQueue {
            live_mirrors: spec.mirrors.clone(),
            home: spec.node,
            spec,
            ready: VecDeque::new(),
            unacked: HashMap::new(),
            present: HashSet::new(),
            flow_max: HashMap::new(),
            durable_store: HashMap::new(),
            consumers: Vec::new(),
            rr: 0,
            mem_bytes: 0,
            spilled_ready: 0,
            stats: QueueStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.ready.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ready.is_empty()
    }

    pub fn unacked_len(&self) -> usize {
        self.unacked.len()
    }

    /// Ready, unacked and in-mailbox entries.
    pub fn total_entries(&self) -> usize {
        self.ready.len() + self.unacked.len()
    }

    pub fn memory_bytes(&self) -> u64 {
        self.mem_bytes
    }

    pub fn spilled_len(&self) -> usize {
        self.spilled_ready
    }

    pub fn durable_len(&self) -> usize {
        self.durable_store.len()
    }

    /// Whether any ready entry currently sits in the spill tier.
    pub fn spilled_state(&self) -> bool {
        self.spilled_ready > 0
    }

    /// `(flow, seq)` of ready entries in queue order.
    pub fn ready_ids(&self) -> Vec<(String, u64)> {
        self.ready.iter().map(|e| (e.flow.to_string(), e.seq)).collect()
    }

    pub fn contains(&self, flow: &str, seq: u64) -> bool {
        self.present.contains(&(Arc::from(flow), seq))
    }

    fn account_in(&mut self, e: &Entry) {
        match e.body {
            Body::Memory(_) => self.mem_bytes += e.payload_len,
            Body::Spilled(_) => self.spilled_ready += 1,
        }
    }

    fn account_out(&mut self, e: &Entry) {
        match e.body {
            Body::Memory(_) => self.mem_bytes -= e.payload_len,
            Body::Spilled(_) => self.spilled_ready -= 1,
        }
    }

    /// Permanently forget an entry that is no longer in `ready`.
    fn release(&mut self, e: Entry, acct: &Accounting) {
        self.present.remove(&(e.flow.clone(), e.seq));
        self.durable_store.remove(&e.id);
        if let Body::Spilled(b) = &e.body {
            acct.spilled_bytes.fetch_sub(b.len() as u64, Ordering::Relaxed);
        }
        if self.present.is_empty() {
            self.flow_max.clear();
        }
    }

    /// Insert keeping each flow's entries in `seq` order. An entry whose
    /// `(flow, seq)` is already held (ready or unacked) is a retransmission
    /// and is discarded.
    pub fn insert(&mut self, entry: Entry) -> EnqueueOutcome {
        let id = (entry.flow.clone(), entry.seq);
        if self.present.contains(&id) {
            self.stats.deduplicated += 1;
            return EnqueueOutcome::Duplicate;
        }
        self.present.insert(id);
        self.reinsert(entry);
        EnqueueOutcome::Accepted
    }

    fn reinsert(&mut self, entry: Entry) {
        self.account_in(&entry);
        let max = self.flow_max.entry(entry.flow.clone()).or_insert(entry.seq);
        if entry.seq >= *max {
            *max = entry.seq;
            self.ready.push_back(entry);
            return;
        }
        let pos = self
            .ready
            .iter()
            .position(|e| e.flow == entry.flow && e.seq > entry.seq)
            .unwrap_or(self.ready.len());
        self.ready.insert(pos, entry);
    }

    /// Full enqueue path: length policy, insertion, persistence, spill.
    pub fn enqueue(&mut self, entry: Entry, persist: bool, acct: &Accounting) -> (EnqueueOutcome, LimitAction) {
        if let (Some(max), OverflowPolicy::RejectPublish) = (self.spec.max_length, self.spec.overflow) {
            if self.ready.len() >= max && !self.contains(&entry.flow, entry.seq) {
                self.stats.rejected += 1;
                return (EnqueueOutcome::Rejected, LimitAction { rejected: true, ..Default::default() });
            }
        }
        let id = entry.id;
        let record = if persist {
            let Body::Memory(b) = &entry.body else { unreachable!("new entries start in memory") };
            let mut buf = Vec::with_capacity(b.msg.payload.len() + 64);
            encode_record(id, &b.msg, &mut buf);
            Some(buf)
        } else {
            None
        };
        let mut entry = entry;
        entry.persisted = persist;
        let outcome = self.insert(entry);
        if outcome == EnqueueOutcome::Accepted {
            self.stats.enqueued += 1;
            if let Some(buf) = record {
                self.durable_store.insert(id, buf);
            }
        }
        let action = self.enforce_limits(acct);
        (outcome, action)
    }

    /// Apply the length bound (drop oldest) and the memory cap (spill oldest).
    pub fn enforce_limits(&mut self, acct: &Accounting) -> LimitAction {
        let mut action = LimitAction::default();
        if let (Some(max), OverflowPolicy::DropOldest) = (self.spec.max_length, self.spec.overflow) {
            while self.ready.len() > max {
                let e = self.ready.pop_front().unwrap();
                self.account_out(&e);
                self.release(e, acct);
                self.stats.dropped += 1;
                action.dropped += 1;
            }
        }
        if let (Some(cap), true) = (self.spec.memory_cap_bytes, self.spec.spill) {
            let mut i = 0;
            while self.mem_bytes > cap && i < self.ready.len() {
                if let Body::Memory(b) = &self.ready[i].body {
                    let mut buf = Vec::with_capacity(b.msg.payload.len() + 64);
                    encode_record(self.ready[i].id, &b.msg, &mut buf);
                    acct.spilled_bytes.fetch_add(buf.len() as u64, Ordering::Relaxed);
                    let e = &mut self.ready[i];
                    e.body = Body::Spilled(buf.into());
                    self.mem_bytes -= e.payload_len;
                    self.spilled_ready += 1;
                    self.stats.spilled += 1;
                    action.spilled += 1;
                }
                i += 1;
            }
        }
        action.spilled_state = self.spilled_state();
        action
    }

    /// Remove every ready entry whose deadline has passed.
    pub fn expire(&mut self, now: u64, acct: &Accounting) -> usize {
        let (expired, kept): (Vec<Entry>, Vec<Entry>) = self.ready.drain(..).partition(|e| e.expired(now));
        self.ready = kept.into();
        let n = expired.len();
        for e in expired {
            self.account_out(&e);
            self.release(e, acct);
        }
        self.stats.expired += n as u64;
        n
    }

    fn pop_deliverable(&mut self, now: u64, acct: &Accounting) -> Option<Entry> {
        while let Some(e) = self.ready.pop_front() {
            self.account_out(&e);
            if e.expired(now) {
                self.stats.expired += 1;
                self.release(e, acct);
                continue;
            }
            return Some(e);
        }
        None
    }

    fn hand_out(&mut self, consumer: usize, e: Entry, tags: &AtomicU64, acct: &Accounting) -> PendingDelivery {
        let tag = tags.fetch_add(1, Ordering::Relaxed) + 1;
        self.stats.delivered += 1;
        if e.redelivered {
            self.stats.redelivered += 1;
        }
        if e.body.is_spilled() {
            self.stats.spill_reads += 1;
        }
        let d = PendingDelivery { delivery_tag: tag, body: e.body.clone(), redelivered: e.redelivered };
        let c = &mut self.consumers[consumer];
        if c.auto_ack {
            self.stats.acked += 1;
            self.release(e, acct);
        } else {
            c.unacked += 1;
            self.unacked.insert(tag, (c.tag, e));
        }
        d
    }

    pub fn add_consumer(&mut self, tag: u64, prefetch: u32, auto_ack: bool, push: bool) {
        self.consumers.push(QConsumer { tag, prefetch, auto_ack, push, mailbox: VecDeque::new(), unacked: 0 });
    }

    pub fn consumer_count(&self) -> usize {
        self.consumers.len()
    }

    fn consumer_index(&self, tag: u64) -> Option<usize> {
        self.consumers.iter().position(|c| c.tag == tag)
    }

    /// Fill push consumers' mailboxes round-robin up to their prefetch.
    pub fn dispatch(&mut self, now: u64, tags: &AtomicU64, acct: &Accounting) {
        let n = self.consumers.len();
        if n == 0 {
            return;
        }
        loop {
            if self.ready.is_empty() {
                return;
            }
            let mut served = false;
            for k in 0..n {
                let i = (self.rr + k) % n;
                if !self.consumers[i].push || !self.consumers[i].has_room() {
                    continue;
                }
                let Some(e) = self.pop_deliverable(now, acct) else { return };
                let d = self.hand_out(i, e, tags, acct);
                self.consumers[i].mailbox.push_back(d);
                self.rr = (i + 1) % n;
                served = true;
                break;
            }
            if !served {
                return;
            }
        }
    }

    pub fn take_mailbox(&mut self, consumer: u64, max: usize) -> Vec<PendingDelivery> {
        let Some(i) = self.consumer_index(consumer) else { return Vec::new() };
        let mb = &mut self.consumers[i].mailbox;
        let n = max.min(mb.len());
        mb.drain(..n).collect()
    }

    /// Pull up to `max` deliveries on demand, honouring prefetch.
    pub fn get(
        &mut self,
        consumer: u64,
        max: usize,
        now: u64,
        tags: &AtomicU64,
        acct: &Accounting,
    ) -> Vec<PendingDelivery> {
        let Some(i) = self.consumer_index(consumer) else { return Vec::new() };
        let mut out = Vec::new();
        while out.len() < max && self.consumers[i].has_room() {
            let Some(e) = self.pop_deliverable(now, acct) else { break };
            out.push(self.hand_out(i, e, tags, acct));
        }
        out
    }

    fn take_unacked(&mut self, consumer: u64, tag: u64) -> Option<Entry> {
        match self.unacked.get(&tag) {
            Some((owner, _)) if *owner == consumer => {}
            _ => return None,
        }
        let (_, e) = self.unacked.remove(&tag)?;
        if let Some(i) = self.consumer_index(consumer) {
            self.consumers[i].unacked -= 1;
        }
        Some(e)
    }

    pub fn ack(&mut self, consumer: u64, tag: u64, acct: &Accounting) -> bool {
        match self.take_unacked(consumer, tag) {
            Some(e) => {
                self.stats.acked += 1;
                self.release(e, acct);
                true
            }
            None => false,
        }
    }

    pub fn nack(&mut self, consumer: u64, tag: u64, requeue: bool, acct: &Accounting) -> bool {
        match self.take_unacked(consumer, tag) {
            Some(mut e) => {
                if requeue {
                    e.redelivered = true;
                    self.reinsert(e);
                    self.enforce_limits(acct);
                } else {
                    self.release(e, acct);
                }
                true
            }
            None => false,
        }
    }

    /// Return a consumer's unacked and undelivered entries to the queue.
    pub fn requeue_consumer(&mut self, consumer: u64, acct: &Accounting) -> usize {
        let Some(i) = self.consumer_index(consumer) else { return 0 };
        self.consumers[i].mailbox.clear();
        self.consumers[i].unacked = 0;
        let tags: Vec<u64> = self.unacked.iter().filter(|(_, (c, _))| *c == consumer).map(|(t, _)| *t).collect();
        let mut entries: Vec<Entry> = tags.into_iter().filter_map(|t| self.unacked.remove(&t).map(|x| x.1)).collect();
        entries.sort_by_key(|e| (e.flow.clone(), e.seq));
        let n = entries.len();
        for mut e in entries {
            e.redelivered = true;
            self.reinsert(e);
        }
        self.enforce_limits(acct);
        n
    }

    pub fn remove_consumer(&mut self, consumer: u64, acct: &Accounting) -> usize {
        let n = self.requeue_consumer(consumer, acct);
        if let Some(i) = self.consumer_index(consumer) {
            self.consumers.remove(i);
            if self.rr >= self.consumers.len() {
                self.rr = 0;
            }
        }
        n
    }

    /// Home node lost without a surviving mirror: keep only persisted
    /// entries of a durable queue, all returned to ready.
    pub fn lose_volatile(&mut self, acct: &Accounting) -> usize {
        let tags: Vec<u64> = self.consumers.iter().map(|c| c.tag).collect();
        for t in tags {
            self.requeue_consumer(t, acct);
        }
        let durable = self.spec.durable;
        let (keep, lose): (Vec<Entry>, Vec<Entry>) = self.ready.drain(..).partition(|e| durable && e.persisted);
        let lost = lose.len();
        self.mem_bytes = 0;
        self.spilled_ready = 0;
        for e in lose {
            self.release(e, acct);
        }
        for e in keep {
            self.account_in(&e);
            self.ready.push_back(e);
        }
        lost
    }
}
