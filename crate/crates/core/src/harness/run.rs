//! The single-threaded event loop behind [`run_scenario`].

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    FaultEvent, FaultKind, HarnessError, Phase, PhaseEvent, Scenario, ScenarioOutcome, Trigger, ACK_TIMEOUT_MS,
    BACKOFF_BASE_MS, HARD_STOP_MS, MAX_RETRIES,
};
use crate::broker::EngineKind;
use crate::clock::{Clock, VirtualClock};
use crate::exchbroker::{
    Binding, Channel, ConsumeMode, ConsumeOptions, ConsumerHandle, Delivery as ExchDelivery, ExchBroker, ExchConfig,
    Exchange, ExchangeKind, QueueSpec,
};
use crate::journal::{EventKind, Journal};
use crate::logbroker::{LogBroker, LogBrokerConfig, LogError, TopicConfig, SEVEN_DAYS_MS};
use crate::message::Message;
use crate::qos::{AckPolicy, Delivery, LogAckMode};

const TOPIC: &str = "h";
const EXCHANGE: &str = "h";
const VHOST: &str = "/";
const GROUP: &str = "g";
const MS: u64 = 1_000_000;
/// Records a consumer takes per step.
const CONSUMER_BATCH: usize = 4;
const PREFETCH: u32 = 8;

fn queue_name(i: usize) -> String {
    format!("q{i}")
}

/// Journals plus phase bookkeeping.
#[derive(Default)]
struct Recorder {
    produced: Journal,
    consumed: Journal,
    phases: Vec<PhaseEvent>,
    reached: HashMap<(Arc<str>, u64), Phase>,
    phase_counts: [u64; 5],
    confirmed: HashMap<(Arc<str>, u64), ()>,
}

impl Recorder {
    /// Record `phase` the first time a message advances to it. A late
    /// confirm for a message that was already delivered does not move it
    /// back.
    fn phase(&mut self, phase: Phase, flow: &Arc<str>, seq: u64, at_ns: u64) {
        let key = (flow.clone(), seq);
        if self.reached.get(&key).is_some_and(|&p| p >= phase) {
            return;
        }
        self.reached.insert(key, phase);
        self.phase_counts[phase as usize] += 1;
        self.phases.push(PhaseEvent { phase, flow: flow.to_string(), seq, at_ns });
    }

    fn produced(&mut self, flow: &Arc<str>, seq: u64, at_ns: u64) {
        self.produced.push(flow, seq, EventKind::Produced, at_ns).expect("virtual time is monotonic");
        self.phase(Phase::T1Produced, flow, seq, at_ns);
    }

    fn confirmed(&mut self, flow: &Arc<str>, seq: u64, at_ns: u64) {
        if self.confirmed.insert((flow.clone(), seq), ()).is_none() {
            self.produced.push(flow, seq, EventKind::Confirmed, at_ns).expect("virtual time is monotonic");
        }
    }

    fn delivered(&mut self, msg: &Message, at_ns: u64) {
        self.consumed.push(&msg.flow_id, msg.seq_no, EventKind::Delivered, at_ns).expect("virtual time is monotonic");
        let flow: Arc<str> = Arc::from(msg.flow_id.as_str());
        self.phase(Phase::T4Delivered, &flow, msg.seq_no, at_ns);
    }

    fn acked(&mut self, msg: &Message, at_ns: u64) {
        self.consumed.push(&msg.flow_id, msg.seq_no, EventKind::Acked, at_ns).expect("virtual time is monotonic");
        let flow: Arc<str> = Arc::from(msg.flow_id.as_str());
        self.phase(Phase::T5AckedOrRetained, &flow, msg.seq_no, at_ns);
    }
}

struct InFlight {
    batch: u64,
    first: u64,
    len: u64,
    attempt: u32,
    /// Waiting for a confirm until this time (ms).
    deadline_ms: Option<u64>,
    /// Resend at this time (ms).
    retry_at_ms: Option<u64>,
}

struct Producer {
    flow: Arc<str>,
    next_seq: u64,
    batches: u64,
    inflight: Option<InFlight>,
    channel: Option<Channel>,
}

struct NetConfirm {
    at_ms: u64,
    producer: usize,
    batch: u64,
    first: u64,
    len: u64,
}

enum ConsumerState {
    Log { member: String, positions: BTreeMap<u32, u64> },
    Exch { queue: String, handle: Option<ConsumerHandle> },
}

enum Engine {
    Log(LogBroker),
    Exch(ExchBroker),
}

struct Sim<'a> {
    s: &'a Scenario,
    clock: Arc<VirtualClock>,
    engine: Engine,
    rng: ChaCha8Rng,
    payload: Vec<u8>,
    rec: Recorder,
    producers: Vec<Producer>,
    consumers: Vec<ConsumerState>,
    net: Vec<NetConfirm>,
    faults: Vec<(FaultEvent, bool)>,
    armed_acks: Vec<FaultEvent>,
    armed_consumer: Vec<FaultEvent>,
    deferred_crashes: Vec<FaultEvent>,
    restarts: Vec<(u64, usize)>,
    produced_total: u64,
    wall: Option<Instant>,
}

fn engine_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Engine(e.to_string())
}

/// Run one scenario to completion.
pub fn run_scenario(s: &Scenario) -> Result<ScenarioOutcome, HarnessError> {
    s.validate()?;
    let mut sim = Sim::new(s)?;
    sim.run()
}

impl<'a> Sim<'a> {
    fn new(s: &'a Scenario) -> Result<Self, HarnessError> {
        let clock = VirtualClock::new();
        let shared: Arc<dyn Clock> = clock.clone();
        let nodes = s.topology.nodes;
        let rf = s.qos.replication_factor;
        let alo = s.qos.delivery == Delivery::AtLeastOnce;
        let w = &s.workload;
        let engine = match s.engine {
            EngineKind::Log => {
                let b = LogBroker::with_clock(LogBrokerConfig { nodes, persistence_dir: None }, shared);
                let mut cfg = TopicConfig::new(TOPIC, s.topology.partitions, rf);
                cfg.flush = s.qos.flush;
                b.create_topic(cfg).map_err(engine_err)?;
                b.set_drop_every_nth_batch(s.mutations.drop_every_nth_batch);
                Engine::Log(b)
            }
            EngineKind::Exch => {
                let b = ExchBroker::with_clock(ExchConfig { nodes, ..Default::default() }, shared);
                b.declare_exchange(Exchange::new(EXCHANGE, ExchangeKind::Direct)).map_err(engine_err)?;
                for i in 0..s.topology.queues {
                    let home = i % nodes;
                    let mirrors: Vec<usize> = (1..rf as usize).map(|k| (home + k) % nodes).collect();
                    let mut spec = QueueSpec::new(queue_name(i)).on_node(home).mirrored_on(&mirrors);
                    if alo {
                        spec = spec.durable();
                    }
                    b.declare_queue(spec).map_err(engine_err)?;
                    b.bind(Binding::new(EXCHANGE, queue_name(i)).key(queue_name(i))).map_err(engine_err)?;
                }
                Engine::Exch(b)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let mut payload = vec![0u8; w.record_size_bytes];
        rng.fill_bytes(&mut payload);

        let producers = (0..w.producers)
            .map(|i| {
                let channel = match (&engine, s.qos.ack_policy) {
                    (Engine::Exch(b), AckPolicy::Exch { confirm, window }) => {
                        let mut ch = b.open_channel();
                        if alo {
                            ch.confirm_select(confirm, window);
                        }
                        Some(ch)
                    }
                    _ => None,
                };
                Producer { flow: Arc::from(format!("p{i}")), next_seq: 0, batches: 0, inflight: None, channel }
            })
            .collect();

        let consumers = match &engine {
            Engine::Log(b) => {
                let members: Vec<String> = (0..w.consumers).map(|j| format!("c{j}")).collect();
                let assignment = b.assign_partitions(GROUP, &[TOPIC], &members).map_err(engine_err)?;
                let mut owned: BTreeMap<&str, BTreeMap<u32, u64>> = BTreeMap::new();
                for (tp, m) in &assignment {
                    owned.entry(m.as_str()).or_default().insert(tp.partition, 0);
                }
                members
                    .iter()
                    .map(|m| ConsumerState::Log {
                        member: m.clone(),
                        positions: owned.get(m.as_str()).cloned().unwrap_or_default(),
                    })
                    .collect()
            }
            Engine::Exch(_) => {
                (0..w.consumers).map(|j| ConsumerState::Exch { queue: queue_name(j % s.topology.queues), handle: None }).collect()
            }
        };

        let mut sim = Sim {
            s,
            clock,
            engine,
            rng,
            payload,
            rec: Recorder::default(),
            producers,
            consumers,
            net: Vec::new(),
            faults: s.faults.events.iter().map(|f| (*f, false)).collect(),
            armed_acks: Vec::new(),
            armed_consumer: Vec::new(),
            deferred_crashes: Vec::new(),
            restarts: Vec::new(),
            produced_total: 0,
            wall: s.mutations.wall_clock.then(Instant::now),
        };
        for j in 0..sim.consumers.len() {
            sim.attach(j)?;
        }
        Ok(sim)
    }

    fn alo(&self) -> bool {
        self.s.qos.delivery == Delivery::AtLeastOnce
    }

    fn now_ns(&self) -> u64 {
        self.clock.now_ns()
    }

    fn now_ms(&self) -> u64 {
        self.clock.now_ns() / MS
    }

    /// (Re)attach a consumer at the broker's view of its progress.
    fn attach(&mut self, j: usize) -> Result<(), HarnessError> {
        let auto_ack = !self.alo();
        match (&self.engine, &mut self.consumers[j]) {
            (Engine::Log(b), ConsumerState::Log { positions, .. }) => {
                for (p, pos) in positions.iter_mut() {
                    *pos = b.resume_offset(GROUP, TOPIC, *p).unwrap_or(0);
                }
            }
            (Engine::Exch(b), ConsumerState::Exch { queue, handle }) => {
                let old = handle.take();
                drop(old);
                let opts = ConsumeOptions { mode: ConsumeMode::Push, prefetch: PREFETCH, auto_ack };
                *handle = Some(b.consume(VHOST, queue, &format!("c{j}"), opts).map_err(engine_err)?);
            }
            _ => unreachable!("consumer state matches the engine"),
        }
        Ok(())
    }

    fn run(&mut self) -> Result<ScenarioOutcome, HarnessError> {
        let mut producers_done_at: Option<u64> = None;
        let mut drained = false;
        loop {
            self.advance();
            let now = self.now_ms();
            self.fire_faults()?;
            self.deliver_confirms();
            for i in 0..self.producers.len() {
                self.step_producer(i);
            }
            match &self.engine {
                Engine::Log(b) => b.tick(),
                Engine::Exch(b) => b.maintenance(),
            }
            for j in 0..self.consumers.len() {
                self.step_consumer(j)?;
            }
            self.fire_faults()?;

            if producers_done_at.is_none() && self.producers_done() {
                producers_done_at = Some(now);
            }
            if let Some(t) = producers_done_at {
                if self.quiet() && self.idle() {
                    drained = true;
                    break;
                }
                if now >= t + self.s.drain_deadline_ms {
                    break;
                }
            }
            if now >= HARD_STOP_MS {
                break;
            }
        }
        let residual_entries = match &self.engine {
            Engine::Exch(b) => Some(b.total_entries()),
            Engine::Log(_) => None,
        };
        self.retention_pass();
        let unfired_faults = self.faults.iter().filter(|(_, fired)| !fired).count() + self.deferred_crashes.len();
        let rec = std::mem::take(&mut self.rec);
        Ok(ScenarioOutcome {
            produced: rec.produced,
            consumed: rec.consumed,
            phases: rec.phases,
            drained,
            residual_entries,
            unfired_faults,
        })
    }

    fn advance(&mut self) {
        let mut step = MS;
        if let Some(w) = self.wall {
            // Deliberate defect: real elapsed time leaks into virtual time.
            step += w.elapsed().subsec_nanos() as u64 % MS;
        }
        self.clock.advance_ns(step);
    }

    fn producers_done(&self) -> bool {
        let total = self.s.messages_per_producer();
        self.producers.iter().all(|p| p.inflight.is_none() && p.next_seq >= total)
    }

    /// No faults or restarts still pending and every node up.
    fn quiet(&self) -> bool {
        self.restarts.is_empty()
            && self.deferred_crashes.is_empty()
            && self.net.is_empty()
            && (0..self.s.topology.nodes).all(|n| self.node_up(n))
    }

    fn node_up(&self, n: usize) -> bool {
        match &self.engine {
            Engine::Log(b) => b.is_node_up(n),
            Engine::Exch(b) => b.is_node_up(n),
        }
    }

    fn idle(&self) -> bool {
        match &self.engine {
            Engine::Exch(b) => b.total_entries() == 0,
            Engine::Log(b) => self.consumers.iter().all(|c| match c {
                ConsumerState::Log { positions, .. } => positions.iter().all(|(&p, &pos)| {
                    let end = b.next_offset(TOPIC, p).unwrap_or(0);
                    b.high_watermark(TOPIC, p).is_ok_and(|hw| hw >= end) && pos >= end
                }),
                ConsumerState::Exch { .. } => true,
            }),
        }
    }

    fn fire_faults(&mut self) -> Result<(), HarnessError> {
        let now = self.now_ms();
        for k in 0..self.faults.len() {
            let (f, fired) = self.faults[k];
            if fired {
                continue;
            }
            let due = match f.at {
                Trigger::AtMessage(n) => self.produced_total >= n,
                Trigger::AtTimeMs(t) => now >= t,
                Trigger::AtPhase { phase, count } => self.rec.phase_counts[phase as usize] >= count,
            };
            if !due {
                continue;
            }
            self.faults[k].1 = true;
            match f.kind {
                FaultKind::CrashNode => self.deferred_crashes.push(f),
                FaultKind::DropAck | FaultKind::DelayAck => self.armed_acks.push(f),
                FaultKind::DuplicateDeliver | FaultKind::CrashConsumer => self.armed_consumer.push(f),
            }
        }
        let due: Vec<usize> =
            self.restarts.iter().filter(|&&(at, _)| at <= now).map(|&(_, n)| n).collect();
        self.restarts.retain(|&(at, _)| at > now);
        for n in due {
            match &self.engine {
                Engine::Log(b) => b.restart_node(n).map_err(engine_err)?,
                Engine::Exch(b) => b.restart_node(n),
            }
        }
        // Under at-least-once at most one node is down at a time; later
        // crashes wait for the earlier node to come back.
        let mut pending = std::mem::take(&mut self.deferred_crashes);
        while !pending.is_empty() {
            if self.alo() && (!self.restarts.is_empty() || (0..self.s.topology.nodes).any(|n| !self.node_up(n))) {
                break;
            }
            let f = pending.remove(0);
            let node = f.target.unwrap_or_else(|| self.rng.gen_range(0..self.s.topology.nodes));
            if !self.node_up(node) {
                continue;
            }
            match &self.engine {
                Engine::Log(b) => b.crash_node(node).map_err(engine_err)?,
                Engine::Exch(b) => b.crash_node(node),
            }
            self.restarts.push((now + f.param.max(1), node));
        }
        self.deferred_crashes = pending;
        Ok(())
    }

    fn take_ack_fault(&mut self, producer: usize) -> Option<FaultEvent> {
        let k = self.armed_acks.iter().position(|f| f.target.is_none_or(|t| t == producer))?;
        Some(self.armed_acks.remove(k))
    }

    fn take_consumer_fault(&mut self, consumer: usize) -> Option<FaultKind> {
        let k = self.armed_consumer.iter().position(|f| f.target.is_none_or(|t| t == consumer))?;
        Some(self.armed_consumer.remove(k).kind)
    }

    /// The broker issued a confirm; it travels to the producer subject to
    /// ack faults.
    fn issue_confirm(&mut self, i: usize, f: &InFlight) {
        let now_ns = self.now_ns();
        let flow = self.producers[i].flow.clone();
        for seq in f.first..f.first + f.len {
            self.rec.phase(Phase::T3Confirmed, &flow, seq, now_ns);
        }
        let mut at_ms = self.now_ms();
        match self.take_ack_fault(i) {
            Some(FaultEvent { kind: FaultKind::DropAck, .. }) => return,
            Some(FaultEvent { kind: FaultKind::DelayAck, param, .. }) => at_ms += param,
            _ => {}
        }
        self.net.push(NetConfirm { at_ms, producer: i, batch: f.batch, first: f.first, len: f.len });
    }

    fn deliver_confirms(&mut self) {
        let now = self.now_ms();
        let now_ns = self.now_ns();
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.net).into_iter().partition(|c| c.at_ms < now);
        self.net = rest;
        for c in due {
            let p = &mut self.producers[c.producer];
            let flow = p.flow.clone();
            if p.inflight.as_ref().is_some_and(|f| f.batch == c.batch) {
                p.inflight = None;
            }
            for seq in c.first..c.first + c.len {
                self.rec.confirmed(&flow, seq, now_ns);
            }
        }
    }

    fn step_producer(&mut self, i: usize) {
        let now = self.now_ms();
        let alo = self.alo();
        let Some(f) = self.producers[i].inflight.as_mut() else {
            let p = &mut self.producers[i];
            let total = self.s.messages_per_producer();
            if p.next_seq >= total {
                return;
            }
            let batch = if self.s.engine == EngineKind::Exch { 1 } else { self.s.batch_size() as u64 };
            let len = batch.min(total - p.next_seq);
            let f = InFlight { batch: p.batches, first: p.next_seq, len, attempt: 0, deadline_ms: None, retry_at_ms: None };
            p.batches += 1;
            p.next_seq += len;
            let flow = p.flow.clone();
            let now_ns = self.now_ns();
            for seq in f.first..f.first + len {
                self.rec.produced(&flow, seq, now_ns);
                self.produced_total += 1;
            }
            self.producers[i].inflight = Some(f);
            self.send(i);
            return;
        };
        if f.deadline_ms.is_some_and(|d| now >= d) {
            // Confirm timed out.
            f.deadline_ms = None;
            if alo && f.attempt < MAX_RETRIES {
                f.retry_at_ms = Some(now + (BACKOFF_BASE_MS << f.attempt));
                f.attempt += 1;
            } else {
                self.producers[i].inflight = None;
            }
            return;
        }
        if f.retry_at_ms.is_some_and(|t| now >= t) {
            f.retry_at_ms = None;
            self.send(i);
        }
    }

    fn messages(&self, i: usize, f: &InFlight) -> Vec<Message> {
        let flow = &self.producers[i].flow;
        let now_ns = self.now_ns();
        (f.first..f.first + f.len)
            .map(|seq| {
                let mut m = Message::new(flow.to_string(), seq, self.payload.clone()).at(now_ns);
                match self.s.engine {
                    EngineKind::Log => m.key = Some(flow.as_bytes().to_vec()),
                    EngineKind::Exch => {
                        m.routing_key = Some(queue_name(i % self.s.topology.queues));
                    }
                }
                m
            })
            .collect()
    }

    /// One attempt for the in-flight batch of producer `i`.
    fn send(&mut self, i: usize) {
        let f = self.producers[i].inflight.take().expect("send needs an in-flight batch");
        let msgs = self.messages(i, &f);
        let now = self.now_ms();
        let now_ns = self.now_ns();
        let flow = self.producers[i].flow.clone();
        // None: failed. Some(confirm): accepted, with or without a confirm.
        let accepted: Option<bool> = match &self.engine {
            Engine::Log(b) => {
                let acks = self.s.qos.log_acks().unwrap_or(LogAckMode::Acks1);
                let r = b
                    .partition_for(TOPIC, Some(flow.as_bytes()))
                    .and_then(|p| b.append_batch(TOPIC, p, &msgs, acks));
                match r {
                    Ok(rcpt) if acks == LogAckMode::Acks0 => {
                        if rcpt.base_offset.is_some() {
                            for seq in f.first..f.first + f.len {
                                self.rec.phase(Phase::T2Handled, &flow, seq, now_ns);
                            }
                        }
                        Some(false)
                    }
                    Ok(_) => Some(true),
                    Err(_) => None,
                }
            }
            Engine::Exch(_) => {
                let alo = self.alo();
                let ch = self.producers[i].channel.as_mut().expect("exchange producers own a channel");
                let msg = msgs.into_iter().next().expect("one message per exchange publish");
                match ch.publish(VHOST, EXCHANGE, msg, alo) {
                    Ok(_) if ch.in_confirm_mode() => {
                        let confirms = ch.poll_confirms();
                        if confirms.iter().all(|c| c.ack) {
                            Some(true)
                        } else {
                            None
                        }
                    }
                    Ok(_) => Some(false),
                    Err(_) => None,
                }
            }
        };
        let mut f = f;
        match accepted {
            Some(with_confirm) => {
                if self.s.engine == EngineKind::Exch || with_confirm {
                    for seq in f.first..f.first + f.len {
                        self.rec.phase(Phase::T2Handled, &flow, seq, now_ns);
                    }
                }
                if with_confirm {
                    f.deadline_ms = Some(now + ACK_TIMEOUT_MS);
                    self.issue_confirm(i, &f);
                    self.producers[i].inflight = Some(f);
                }
                // Without confirms the producer moves on at once.
            }
            None if self.alo() && f.attempt < MAX_RETRIES => {
                f.retry_at_ms = Some(now + (BACKOFF_BASE_MS << f.attempt));
                f.attempt += 1;
                self.producers[i].inflight = Some(f);
            }
            None => {}
        }
    }

    fn step_consumer(&mut self, j: usize) -> Result<(), HarnessError> {
        match self.consumers[j] {
            ConsumerState::Log { .. } => self.step_log_consumer(j),
            ConsumerState::Exch { .. } => self.step_exch_consumer(j),
        }
    }

    fn step_log_consumer(&mut self, j: usize) -> Result<(), HarnessError> {
        let Engine::Log(b) = &self.engine else { unreachable!() };
        let b = b.clone();
        let ConsumerState::Log { member, positions } = &self.consumers[j] else { unreachable!() };
        let member = member.clone();
        let parts: Vec<(u32, u64)> = positions.iter().map(|(&p, &o)| (p, o)).collect();
        let alo = self.alo();
        let max_bytes = CONSUMER_BATCH * (self.s.workload.record_size_bytes + 64);
        for (p, pos) in parts {
            let records = match b.fetch(TOPIC, p, pos, max_bytes) {
                Ok(r) => r.records,
                Err(LogError::OffsetOutOfRange { start, end, .. }) => {
                    self.set_pos(j, p, pos.clamp(start, end));
                    continue;
                }
                Err(_) => continue,
            };
            let Some(last) = records.last() else { continue };
            let next = last.offset + 1;
            let fault = self.take_consumer_fault(j);
            let now_ns = self.now_ns();
            if !alo {
                // Commit first: a crash after this point loses the rest.
                if fault == Some(FaultKind::DuplicateDeliver) {
                    // The commit is lost, so nothing is processed.
                    let back = b.resume_offset(GROUP, TOPIC, p).unwrap_or(pos);
                    self.set_pos(j, p, back);
                    continue;
                }
                let _ = b.commit_offset(GROUP, &member, TOPIC, p, next);
                let upto = if fault == Some(FaultKind::CrashConsumer) { records.len() / 2 } else { records.len() };
                for r in &records[..upto] {
                    self.rec.delivered(&r.message, now_ns);
                }
                if fault == Some(FaultKind::CrashConsumer) {
                    self.attach(j)?;
                } else {
                    self.set_pos(j, p, next);
                }
                continue;
            }
            let crash = fault == Some(FaultKind::CrashConsumer);
            let upto = if crash { records.len() / 2 } else { records.len() };
            for r in &records[..upto] {
                self.rec.delivered(&r.message, now_ns);
            }
            if crash {
                self.attach(j)?;
                continue;
            }
            if fault == Some(FaultKind::DuplicateDeliver) {
                // The commit is lost and the consumer rewinds to the last
                // committed offset.
                let back = b.resume_offset(GROUP, TOPIC, p).unwrap_or(pos);
                self.set_pos(j, p, back);
                continue;
            }
            let _ = b.commit_offset(GROUP, &member, TOPIC, p, next);
            self.set_pos(j, p, next);
        }
        Ok(())
    }

    fn set_pos(&mut self, j: usize, p: u32, to: u64) {
        if let ConsumerState::Log { positions, .. } = &mut self.consumers[j] {
            positions.insert(p, to);
        }
    }

    fn step_exch_consumer(&mut self, j: usize) -> Result<(), HarnessError> {
        let alo = self.alo();
        let ConsumerState::Exch { handle, .. } = &mut self.consumers[j] else { unreachable!() };
        let h = handle.as_mut().expect("exchange consumers stay attached");
        let got: Vec<ExchDelivery> = h.recv(CONSUMER_BATCH);
        if got.is_empty() {
            return Ok(());
        }
        let fault = self.take_consumer_fault(j);
        let now_ns = self.now_ns();
        let upto = if fault == Some(FaultKind::CrashConsumer) { got.len() / 2 } else { got.len() };
        let mut acked = Vec::new();
        for d in &got[..upto] {
            self.rec.delivered(&d.msg, now_ns);
            if !alo {
                // Auto-ack: the broker forgot the message on delivery.
                self.rec.acked(&d.msg, now_ns);
            } else if fault != Some(FaultKind::DuplicateDeliver) {
                acked.push(d);
            }
        }
        let ConsumerState::Exch { handle, .. } = &mut self.consumers[j] else { unreachable!() };
        let h = handle.as_mut().expect("exchange consumers stay attached");
        let mut ok = Vec::new();
        for d in acked {
            if h.ack(d.delivery_tag).is_ok() {
                ok.push(&d.msg);
            }
        }
        if alo && fault == Some(FaultKind::DuplicateDeliver) {
            h.recover();
        }
        for m in ok {
            self.rec.acked(m, now_ns);
        }
        if fault == Some(FaultKind::CrashConsumer) {
            self.attach(j)?;
        }
        Ok(())
    }

    /// Log engine: let retention remove everything and record T5 for each
    /// message that was still retained.
    fn retention_pass(&mut self) {
        let Engine::Log(b) = &self.engine else { return };
        let b = b.clone();
        for n in 0..self.s.topology.nodes {
            if !b.is_node_up(n) {
                let _ = b.restart_node(n);
            }
        }
        b.flush_all();
        let mut held: Vec<(u32, u64, Message)> = Vec::new();
        for p in 0..self.s.topology.partitions {
            let (Ok(mut off), Ok(end)) = (b.log_start(TOPIC, p), b.next_offset(TOPIC, p)) else { continue };
            while off < end {
                match b.fetch(TOPIC, p, off, 1 << 20) {
                    Ok(r) if !r.records.is_empty() => {
                        off = r.records.last().map_or(end, |x| x.offset + 1);
                        held.extend(r.records.into_iter().map(|x| (p, x.offset, x.message)));
                    }
                    _ => break,
                }
            }
        }
        self.clock.advance_ms(SEVEN_DAYS_MS + 1);
        let _ = b.purge(TOPIC);
        let now_ns = self.now_ns();
        for (p, off, msg) in held {
            if b.log_start(TOPIC, p).is_ok_and(|start| off < start) {
                let flow: Arc<str> = Arc::from(msg.flow_id.as_str());
                self.rec.phase(Phase::T5AckedOrRetained, &flow, msg.seq_no, now_ns);
            }
        }
    }
}
