use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::nodes::Nodes;
use super::segment::{encode_record, encoded_len, record_key, Record, SegmentedLog};
use super::{AckPhase, AppendReceipt, CompactReport, LogError, RetentionPolicy};
use crate::fault::{sites, FailAction, FailPoints};
use crate::message::Message;
use crate::qos::{FlushPolicy, LogAckMode};

#[derive(Clone, Debug)]
pub struct Replica {
    pub node: usize,
    pub log: SegmentedLog,
    pub flushed_up_to: u64,
    last_flush_ns: u64,
    seen_epoch: u64,
    // Set while the replica is (or was) down: its log may only be trusted
    // below this offset once it rejoins.
    rejoin_floor: Option<u64>,
}

impl Replica {
    fn new(node: usize, segment_bytes: usize, epoch: u64) -> Self {
        Replica {
            node,
            log: SegmentedLog::new(segment_bytes),
            flushed_up_to: 0,
            last_flush_ns: 0,
            seen_epoch: epoch,
            rejoin_floor: None,
        }
    }

    pub fn end(&self) -> u64 {
        self.log.next_offset()
    }
}

#[derive(Debug)]
pub(crate) struct Partition {
    pub topic: String,
    pub index: u32,
    pub replicas: Vec<Replica>,
    pub high_watermark: u64,
    segment_bytes: usize,
    flush: FlushPolicy,
    persist_root: Option<PathBuf>,
}

pub(crate) struct Ctx<'a> {
    pub nodes: &'a Nodes,
    pub failpoints: &'a FailPoints,
    pub now: u64,
}

impl Partition {
    pub fn new(
        topic: &str,
        index: u32,
        replica_nodes: &[usize],
        nodes: &Nodes,
        segment_bytes: usize,
        flush: FlushPolicy,
        persist_root: Option<PathBuf>,
    ) -> Self {
        Partition {
            topic: topic.to_string(),
            index,
            replicas: replica_nodes.iter().map(|&n| Replica::new(n, segment_bytes, nodes.epoch(n))).collect(),
            high_watermark: 0,
            segment_bytes,
            flush,
            persist_root,
        }
    }

    pub fn replication_factor(&self) -> usize {
        self.replicas.len()
    }

    fn quorum(&self) -> usize {
        LogAckMode::AcksQuorum.required_replicas(self.replication_factor())
    }

    fn is_live(&self, i: usize, nodes: &Nodes) -> bool {
        let r = &self.replicas[i];
        nodes.is_up(r.node) && r.rejoin_floor.is_none() && r.seen_epoch == nodes.epoch(r.node)
    }

    /// Whether a read-only access would observe stale state.
    pub fn needs_sync(&self, nodes: &Nodes) -> bool {
        let stale = self.replicas.iter().any(|r| {
            r.seen_epoch != nodes.epoch(r.node) || (r.rejoin_floor.is_some() && nodes.is_up(r.node))
        });
        let lagging = self.replication_factor() >= 2
            && self.leader_end(nodes).is_some_and(|end| self.high_watermark < end);
        stale || lagging
    }

    fn leader_end(&self, nodes: &Nodes) -> Option<u64> {
        self.leader(nodes).map(|i| self.replicas[i].end())
    }

    /// Live replica with the longest log; ties go to the lowest index.
    pub fn leader(&self, nodes: &Nodes) -> Option<usize> {
        let mut best: Option<usize> = None;
        for i in 0..self.replicas.len() {
            if !self.is_live(i, nodes) {
                continue;
            }
            if best.map_or(true, |b| self.replicas[i].end() > self.replicas[b].end()) {
                best = Some(i);
            }
        }
        best
    }

    /// Apply crashes and rejoins observed since the last access.
    pub fn sync(&mut self, ctx: &Ctx<'_>) {
        let nodes = ctx.nodes;
        for r in self.replicas.iter_mut() {
            let epoch = nodes.epoch(r.node);
            if r.seen_epoch != epoch {
                r.log.truncate_to(r.flushed_up_to);
                r.flushed_up_to = r.flushed_up_to.min(r.end());
                r.seen_epoch = epoch;
                let end = r.end();
                r.rejoin_floor = Some(r.rejoin_floor.map_or(end, |f| f.min(end)));
            }
        }
        if let Some(end) = self.leader_end(nodes) {
            for r in self.replicas.iter_mut() {
                if let Some(f) = r.rejoin_floor.as_mut() {
                    *f = (*f).min(end);
                }
            }
        }
        for i in 0..self.replicas.len() {
            let r = &self.replicas[i];
            if r.rejoin_floor.is_none() || !nodes.is_up(r.node) {
                continue;
            }
            let floor = r.rejoin_floor.unwrap();
            let has_leader = self.leader(nodes).is_some();
            let r = &mut self.replicas[i];
            if has_leader {
                r.log.truncate_to(floor);
                r.flushed_up_to = r.flushed_up_to.min(r.end());
            }
            r.rejoin_floor = None;
        }
        let max_end = self.replicas.iter().map(Replica::end).max().unwrap_or(0);
        self.high_watermark = self.high_watermark.min(max_end);
        if let Some(end) = self.leader_end(nodes) {
            self.high_watermark = self.high_watermark.min(end);
        }
        self.catch_up_followers(ctx);
        self.maybe_flush(ctx.now, false);
        self.update_high_watermark(nodes);
    }

    fn catch_up_followers(&mut self, ctx: &Ctx<'_>) -> usize {
        let Some(leader) = self.leader(ctx.nodes) else { return 0 };
        let mut holders = 1;
        let target = self.replicas[leader].end();
        for i in 0..self.replicas.len() {
            if i == leader || !self.is_live(i, ctx.nodes) {
                continue;
            }
            if self.replicas[i].end() < target {
                match ctx.failpoints.hit(sites::LOG_REPLICATE) {
                    Some(FailAction::Crash) => {
                        ctx.nodes.crash(self.replicas[i].node);
                        let r = &mut self.replicas[i];
                        r.log.truncate_to(r.flushed_up_to);
                        r.seen_epoch = ctx.nodes.epoch(r.node);
                        r.rejoin_floor = Some(r.end());
                        continue;
                    }
                    Some(FailAction::Error) => continue,
                    None => {}
                }
                let (src, dst) = pick_two(&mut self.replicas, leader, i);
                dst.log.catch_up_from(&src.log);
            }
            if self.replicas[i].end() >= target {
                holders += 1;
            }
        }
        holders
    }

    fn update_high_watermark(&mut self, nodes: &Nodes) {
        let Some(leader) = self.leader(nodes) else { return };
        let leader_end = self.replicas[leader].end();
        if self.replication_factor() < 2 {
            self.high_watermark = leader_end;
            return;
        }
        let mut ends: Vec<u64> =
            (0..self.replicas.len()).filter(|&i| self.is_live(i, nodes)).map(|i| self.replicas[i].end()).collect();
        ends.sort_unstable_by(|a, b| b.cmp(a));
        if let Some(&q) = ends.get(self.quorum() - 1) {
            self.high_watermark = self.high_watermark.max(q).min(leader_end);
        }
    }

    fn maybe_flush(&mut self, now: u64, force: bool) {
        for r in self.replicas.iter_mut() {
            let unflushed = r.end().saturating_sub(r.flushed_up_to);
            if unflushed == 0 {
                r.last_flush_ns = now;
                continue;
            }
            if force || self.flush.due(unflushed, now.saturating_sub(r.last_flush_ns)) {
                flush_replica(r, self.persist_root.as_deref(), &self.topic, self.index, now);
            }
        }
    }

    pub fn flush_all(&mut self, ctx: &Ctx<'_>) {
        self.sync(ctx);
        self.maybe_flush(ctx.now, true);
    }

    pub fn tick(&mut self, ctx: &Ctx<'_>) {
        self.sync(ctx);
    }

    pub fn append(&mut self, msgs: &[Message], acks: LogAckMode, ctx: &Ctx<'_>) -> Result<AppendReceipt, LogError> {
        self.sync(ctx);
        let leader = self.leader(ctx.nodes).ok_or(LogError::BrokerDown)?;
        let required = acks.required_replicas(self.replication_factor());
        let live = (0..self.replicas.len()).filter(|&i| self.is_live(i, ctx.nodes)).count();
        if acks == LogAckMode::AcksQuorum && live < required {
            return Err(LogError::NotEnoughReplicas { required, live });
        }

        // Stage the whole batch; nothing becomes visible unless every record
        // was staged.
        let base = self.replicas[leader].end();
        let mut staged = Vec::with_capacity(msgs.iter().map(encoded_len).sum());
        let mut spans = Vec::with_capacity(msgs.len());
        for (i, m) in msgs.iter().enumerate() {
            match ctx.failpoints.hit(sites::LOG_APPEND_RECORD) {
                Some(FailAction::Crash) => {
                    ctx.nodes.crash(self.replicas[leader].node);
                    self.sync(ctx);
                    return Err(LogError::BrokerDown);
                }
                Some(FailAction::Error) => return Err(LogError::AppendFailed),
                None => {}
            }
            let start = staged.len();
            encode_record(base + i as u64, m, &mut staged);
            spans.push((start, staged.len(), m.produced_at));
        }
        let log = &mut self.replicas[leader].log;
        for (i, (s, e, ts)) in spans.into_iter().enumerate() {
            log.append_raw(base + i as u64, ts, &staged[s..e]);
        }

        let holders = if acks == LogAckMode::AcksQuorum { self.catch_up_followers(ctx) } else { 1 };
        self.maybe_flush(ctx.now, false);
        self.update_high_watermark(ctx.nodes);
        if holders < required {
            return Err(LogError::NotEnoughReplicas { required, live: holders });
        }
        let phase = match acks {
            LogAckMode::Acks0 => AckPhase::Enqueued,
            LogAckMode::Acks1 => AckPhase::LeaderAppended,
            LogAckMode::AcksQuorum => AckPhase::QuorumReplicated,
        };
        Ok(AppendReceipt {
            base_offset: Some(base),
            count: msgs.len(),
            acked_at_phase: phase,
            replicas_holding: holders,
        })
    }

    pub fn check_offset(&self, offset: u64, nodes: &Nodes) -> Result<usize, LogError> {
        let leader = self.leader(nodes).ok_or(LogError::BrokerDown)?;
        let log = &self.replicas[leader].log;
        if offset < log.log_start() || offset > log.next_offset() {
            return Err(LogError::OffsetOutOfRange { offset, start: log.log_start(), end: log.next_offset() });
        }
        Ok(leader)
    }

    pub fn fetch(&self, offset: u64, max_bytes: usize, nodes: &Nodes) -> Result<(Vec<Record>, u64), LogError> {
        let leader = self.check_offset(offset, nodes)?;
        let log = &self.replicas[leader].log;
        let visible = if self.replication_factor() >= 2 { self.high_watermark } else { log.next_offset() };
        let records = log.read(offset, visible, max_bytes).map_err(|e| LogError::Corrupt(e.to_string()))?;
        Ok((records, visible))
    }

    pub fn next_offset(&self, nodes: &Nodes) -> u64 {
        self.leader_end(nodes).unwrap_or_else(|| self.replicas.iter().map(Replica::end).max().unwrap_or(0))
    }

    pub fn log_start(&self, nodes: &Nodes) -> u64 {
        let i = self.leader(nodes).unwrap_or(0);
        self.replicas[i].log.log_start()
    }

    pub fn storage_bytes(&self) -> usize {
        self.replicas.iter().map(|r| r.log.byte_len()).sum()
    }

    /// Drop whole flushed segments, oldest first, while any bound is violated.
    pub fn purge(&mut self, retention: &RetentionPolicy, ctx: &Ctx<'_>) -> usize {
        self.sync(ctx);
        let reporter = self.leader(ctx.nodes).unwrap_or(0);
        let mut reported = 0;
        for (i, r) in self.replicas.iter_mut().enumerate() {
            let mut removed = 0;
            while let Some(front) = r.log.front() {
                let violated = retention.max_messages.is_some_and(|m| r.log.record_count() as u64 > m)
                    || retention.max_bytes.is_some_and(|b| r.log.byte_len() as u64 > b)
                    || retention.max_age_ms.is_some_and(|age| {
                        front.newest_timestamp().map_or(true, |t| t.saturating_add(age * 1_000_000) <= ctx.now)
                    });
                if !violated || front.end_offset > r.flushed_up_to {
                    break;
                }
                removed += r.log.pop_front().map_or(0, |s| s.record_count());
            }
            if i == reporter {
                reported = removed;
            }
        }
        reported
    }

    /// Keep only the newest record per key on every replica.
    pub fn compact(&mut self, ctx: &Ctx<'_>) -> Result<CompactReport, LogError> {
        self.sync(ctx);
        let leader = self.leader(ctx.nodes).unwrap_or(0);
        let mut keyless = None;
        self.replicas[leader].log.for_each_raw(|off, rec| {
            if keyless.is_none() && matches!(record_key(rec), Ok(None)) {
                keyless = Some(off);
            }
        });
        if let Some(offset) = keyless {
            return Err(LogError::KeylessMessage { offset });
        }
        let mut report = CompactReport::default();
        for (i, r) in self.replicas.iter_mut().enumerate() {
            let mut last: HashMap<Vec<u8>, u64> = HashMap::new();
            r.log.for_each_raw(|off, rec| {
                if let Ok(Some(k)) = record_key(rec) {
                    last.insert(k.to_vec(), off);
                }
            });
            let removed = r.log.retain(|off, rec| match record_key(rec) {
                Ok(Some(k)) => last.get(k) == Some(&off),
                _ => true,
            });
            if i == leader {
                report = CompactReport { removed, retained: r.log.record_count(), distinct_keys: last.len() };
            }
            if let Some(root) = &self.persist_root {
                let dir = replica_dir(root, r.node, &self.topic, self.index);
                if dir.exists() {
                    let _ = r.log.persist_from(&dir, 0);
                }
            }
        }
        Ok(report)
    }

    /// Replace the replica on `from` by a fully caught-up copy on `to`.
    pub fn move_replica(&mut self, from: usize, to: usize, ctx: &Ctx<'_>) -> Result<(), LogError> {
        if to >= ctx.nodes.len() {
            return Err(LogError::UnknownNode(to));
        }
        self.sync(ctx);
        let idx = self.replicas.iter().position(|r| r.node == from).ok_or(LogError::UnknownNode(from))?;
        if self.replicas.iter().any(|r| r.node == to) {
            return Err(LogError::ReplicaExists { node: to });
        }
        if !ctx.nodes.is_up(to) {
            return Err(LogError::BrokerDown);
        }
        let source = self.leader(ctx.nodes).ok_or(LogError::BrokerDown)?;
        let mut fresh = Replica::new(to, self.segment_bytes, ctx.nodes.epoch(to));
        fresh.log = self.replicas[source].log.clone();
        flush_replica(&mut fresh, self.persist_root.as_deref(), &self.topic, self.index, ctx.now);
        self.replicas[idx] = fresh;
        self.update_high_watermark(ctx.nodes);
        Ok(())
    }
}

pub(crate) fn replica_dir(root: &Path, node: usize, topic: &str, partition: u32) -> PathBuf {
    root.join(format!("node-{node}")).join(format!("{topic}-{partition}"))
}

fn flush_replica(r: &mut Replica, root: Option<&Path>, topic: &str, partition: u32, now: u64) {
    if let Some(root) = root {
        // A failed write leaves the replica unflushed; memory stays authoritative.
        if r.log.persist_from(&replica_dir(root, r.node, topic, partition), r.flushed_up_to).is_err() {
            return;
        }
    }
    r.flushed_up_to = r.end();
    r.last_flush_ns = now;
}

fn pick_two<T>(v: &mut [T], a: usize, b: usize) -> (&T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (l, r) = v.split_at_mut(b);
        (&l[a], &mut r[0])
    } else {
        let (l, r) = v.split_at_mut(a);
        (&r[0], &mut l[b])
    }
}
