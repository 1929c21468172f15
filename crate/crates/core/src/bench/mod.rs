//! Threaded load generator and metrics.
//!
//! A run starts `producers` and `consumers` worker threads against a freshly
//! built engine, lets them run for `duration_s`, and measures over the
//! window after `warmup_s`:
//!
//! - throughput: messages delivered to consumers inside the window, divided
//!   by the window length;
//! - latency: delivery time minus production time for every message
//!   produced after warmup, summarised with nearest-rank percentiles.
//!
//! Workers keep their own counters; they are merged once the run ends.

mod export;
pub mod stats;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Broker, BrokerError, EngineKind};
use crate::exchbroker::client::{ExchLanes, ExchLanesConfig};
use crate::exchbroker::{CostModel, ExchBroker, ExchConfig, QueueSpec};
use crate::logbroker::client::{LogLanes, LogLanesConfig};
use crate::logbroker::{BatchingConfig, LogBroker, LogBrokerConfig, RetentionPolicy, TopicConfig};
use crate::message::Message;
use crate::qos::LogAckMode;

pub use export::{export, render, ExportFormat, COLUMNS};
pub use stats::{nearest_rank, LatencyCollector, LatencySummary};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BenchError {
    #[error("no latency samples after warmup")]
    NoSamples,
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("engine failed to start: {0}")]
    EngineStartFailure(String),
    #[error("nothing to export")]
    EmptyResults,
    #[error("i/o error: {0}")]
    Io(String),
}

/// Run-length defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 10 s runs with 5 s warmup.
    Desk,
    /// 60 s runs with 30 s warmup.
    Full,
}

impl Profile {
    /// `DUOLOG_PROFILE=full` selects [`Profile::Full`]; anything else is desk.
    pub fn from_env() -> Self {
        match std::env::var("DUOLOG_PROFILE").as_deref() {
            Ok("full") => Profile::Full,
            _ => Profile::Desk,
        }
    }

    pub fn duration_warmup(self) -> (f64, f64) {
        match self {
            Profile::Desk => (10.0, 5.0),
            Profile::Full => (60.0, 30.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub engine: EngineKind,
    pub producers: usize,
    pub consumers: usize,
    pub record_size_bytes: usize,
    /// Log engine topics. The exchange engine uses one queue per consumer.
    pub topics: usize,
    pub partitions: u32,
    pub replication_factor: u32,
    pub acks: LogAckMode,
    /// Exchange engine: durable queues, persistent publishes, confirms and
    /// manual acks instead of transient queues with auto-ack.
    pub at_least_once: bool,
    pub confirm_window: i64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub batching: BatchingConfig,
    /// Log producer batch size bound in bytes.
    pub batch_bytes: usize,
    /// Per-producer send rate; `None` saturates.
    pub rate_pps: Option<f64>,
    /// Messages sent back to back per rate tick.
    pub burst: usize,
    /// Stop each producer after this many messages.
    pub messages_per_producer: Option<u64>,
    pub prefetch: u32,
    /// Exchange engine per-queue memory cap; entries beyond it spill.
    pub memory_cap_bytes: Option<u64>,
    /// Exchange engine broker-wide budget for flow control.
    pub memory_budget_bytes: Option<u64>,
    pub memory_read_ns: u64,
    pub spill_penalty_factor: u32,
    /// Producers pause while more than this many payload bytes are produced
    /// but not yet consumed, so a run measures the steady state rather than
    /// a growing backlog. `None` lets producers run free.
    pub max_in_flight_bytes: Option<u64>,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        let (duration_s, warmup_s) = Profile::Desk.duration_warmup();
        WorkloadSpec {
            engine: EngineKind::Log,
            producers: 1,
            consumers: 1,
            record_size_bytes: 100,
            topics: 1,
            partitions: 1,
            replication_factor: 1,
            acks: LogAckMode::Acks1,
            at_least_once: false,
            confirm_window: -1,
            duration_s,
            warmup_s,
            batching: BatchingConfig::default(),
            batch_bytes: 16 * 1024,
            rate_pps: None,
            burst: 1,
            messages_per_producer: None,
            prefetch: 1000,
            memory_cap_bytes: None,
            memory_budget_bytes: Some(256 << 20),
            memory_read_ns: 0,
            spill_penalty_factor: 10,
            max_in_flight_bytes: Some(256 << 10),
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn for_profile(profile: Profile) -> Self {
        let (duration_s, warmup_s) = profile.duration_warmup();
        WorkloadSpec { duration_s, warmup_s, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidSpec(m.to_string()));
        if !(self.duration_s > self.warmup_s) || self.warmup_s < 0.0 {
            return bad("duration must exceed warmup");
        }
        if self.record_size_bytes == 0 {
            return bad("record size must be at least 1 byte");
        }
        if self.producers == 0 || self.consumers == 0 {
            return bad("need at least one producer and one consumer");
        }
        if self.topics == 0 || self.partitions == 0 || self.replication_factor == 0 {
            return bad("topics, partitions and replication factor must be >= 1");
        }
        if !self.batching.is_valid() || self.batch_bytes == 0 || self.burst == 0 {
            return bad("batching thresholds must be > 0");
        }
        if self.rate_pps.is_some_and(|r| !(r > 0.0)) {
            return bad("rate must be positive");
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            producers: self.producers,
            consumers: self.consumers,
            record_size: self.record_size_bytes,
            partitions: self.partitions,
            topics: self.topics,
            replication_factor: self.replication_factor,
            batch_bytes: self.batch_bytes,
        }
    }

    /// A copy with one sweep parameter set from its textual value.
    pub fn with_param(&self, param: SweepParam, value: &str) -> Result<Self, BenchError> {
        let mut s = self.clone();
        let bad = || BenchError::InvalidSpec(format!("bad value {value:?} for {}", param.as_str()));
        let num = || value.parse::<u64>().map_err(|_| bad());
        match param {
            SweepParam::RecordSize => s.record_size_bytes = num()? as usize,
            SweepParam::Topics => s.topics = num()? as usize,
            SweepParam::Partitions => s.partitions = num()? as u32,
            SweepParam::Replication => s.replication_factor = num()? as u32,
            SweepParam::ConfirmWindow => s.confirm_window = value.parse::<i64>().map_err(|_| bad())?,
            SweepParam::AckMode => match value {
                "0" | "acks0" | "at_most_once" => {
                    s.acks = LogAckMode::Acks0;
                    s.at_least_once = false;
                }
                "1" | "acks1" => {
                    s.acks = LogAckMode::Acks1;
                    s.at_least_once = true;
                }
                "-1" | "all" | "quorum" | "at_least_once" => {
                    s.acks = LogAckMode::AcksQuorum;
                    s.at_least_once = true;
                }
                _ => return Err(bad()),
            },
        }
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub producers: usize,
    pub consumers: usize,
    pub record_size: usize,
    pub partitions: u32,
    pub topics: usize,
    pub replication_factor: u32,
    pub batch_bytes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    RecordSize,
    Topics,
    Partitions,
    Replication,
    AckMode,
    ConfirmWindow,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::RecordSize => "record_size",
            SweepParam::Topics => "topics",
            SweepParam::Partitions => "partitions",
            SweepParam::Replication => "replication",
            SweepParam::AckMode => "ack_mode",
            SweepParam::ConfirmWindow => "confirm_window",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        Ok(match s {
            "record_size" => SweepParam::RecordSize,
            "topics" => SweepParam::Topics,
            "partitions" => SweepParam::Partitions,
            "replication" | "replication_factor" => SweepParam::Replication,
            "ack_mode" => SweepParam::AckMode,
            "confirm_window" => SweepParam::ConfirmWindow,
            other => return Err(BenchError::InvalidSpec(format!("unknown sweep parameter {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<String>,
}

impl std::str::FromStr for Sweep {
    type Err = BenchError;

    /// `param=v1,v2,...`
    fn from_str(s: &str) -> Result<Self, BenchError> {
        let (p, v) = s
            .split_once('=')
            .ok_or_else(|| BenchError::InvalidSpec(format!("sweep {s:?} is not param=v1,v2,...")))?;
        let values: Vec<String> = v.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect();
        if values.is_empty() {
            return Err(BenchError::InvalidSpec(format!("sweep {s:?} has no values")));
        }
        Ok(Sweep { param: p.trim().parse()?, values })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSample {
    pub engine: EngineKind,
    pub sweep_param: String,
    pub sweep_value: String,
    pub pps: f64,
    pub bps: f64,
    pub latency: Option<LatencySummary>,
    pub seed: u64,
    pub config: ConfigSnapshot,
}

/// Everything measured in one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub window_s: f64,
    pub produced: u64,
    pub produced_in_window: u64,
    pub delivered: u64,
    pub delivered_in_window: u64,
    pub bytes_in_window: u64,
    pub send_errors: u64,
    pub latency: Result<LatencySummary, BenchError>,
    pub latencies_ns: Vec<u64>,
    /// Exchange engine only: deliveries read back from the spill tier.
    pub spill_reads: u64,
    pub engine_deliveries: u64,
}

impl RunReport {
    pub fn pps(&self) -> f64 {
        self.delivered_in_window as f64 / self.window_s
    }

    pub fn bps(&self) -> f64 {
        self.bytes_in_window as f64 / self.window_s
    }
}

enum Engine {
    Log(LogLanes),
    Exch(ExchLanes),
}

impl Engine {
    fn lanes(&self) -> &dyn Broker {
        match self {
            Engine::Log(l) => l,
            Engine::Exch(e) => e,
        }
    }

    fn spill_stats(&self) -> (u64, u64) {
        match self {
            Engine::Log(_) => (0, 0),
            Engine::Exch(e) => e.broker.queue_names("/").iter().fold((0, 0), |acc, q| {
                let s = e.broker.queue_stats("/", q).unwrap_or_default();
                (acc.0 + s.spill_reads, acc.1 + s.delivered)
            }),
        }
    }
}

const TOPIC_RETENTION_BYTES: u64 = 4 << 20;

fn build_engine(spec: &WorkloadSpec) -> Result<Engine, BenchError> {
    let fail = |e: &dyn std::fmt::Display| BenchError::EngineStartFailure(e.to_string());
    let nodes = (spec.replication_factor as usize).max(3);
    match spec.engine {
        EngineKind::Log => {
            let broker = LogBroker::new(LogBrokerConfig { nodes, persistence_dir: None });
            let mut topics = Vec::new();
            for t in 0..spec.topics {
                let mut cfg = TopicConfig::new(format!("t{t}"), spec.partitions, spec.replication_factor);
                cfg.segment_bytes = 256 * 1024;
                cfg.flush = spec.batching.broker_flush();
                // Keep memory bounded during saturating runs, with the same total per topic
                // whatever the partition count.
                let per_partition = (TOPIC_RETENTION_BYTES / spec.partitions as u64).max(2 * cfg.segment_bytes as u64);
                cfg.retention = RetentionPolicy { max_age_ms: None, max_messages: None, max_bytes: Some(per_partition) };
                topics.push(broker.create_topic(cfg).map_err(|e| fail(&e))?);
            }
            let cfg = LogLanesConfig {
                topics,
                acks: spec.acks,
                batch_messages: spec.batching.producer_batch_messages,
                batch_bytes: spec.batch_bytes,
                linger_ms: spec.batching.producer_max_delay_ms,
                fetch_bytes: spec.batching.consumer_fetch_bytes,
                consumers: spec.consumers,
                group: "bench".into(),
            };
            Ok(Engine::Log(LogLanes::new(broker, cfg).map_err(|e| fail(&e))?))
        }
        EngineKind::Exch => {
            let broker = ExchBroker::new(ExchConfig {
                nodes,
                memory_budget_bytes: spec.memory_budget_bytes,
                cost: CostModel { memory_read_ns: spec.memory_read_ns, spill_penalty_factor: spec.spill_penalty_factor },
            });
            let mut template = QueueSpec::new("q");
            if let Some(cap) = spec.memory_cap_bytes {
                template = template.spill_above(cap);
            }
            let mirrors: Vec<usize> = (1..spec.replication_factor as usize).collect();
            template = template.mirrored_on(&mirrors);
            let cfg = ExchLanesConfig {
                queues: spec.consumers,
                at_least_once: spec.at_least_once,
                confirm_window: spec.confirm_window,
                prefetch: spec.prefetch,
                queue_template: template,
            };
            Ok(Engine::Exch(ExchLanes::new(broker, cfg).map_err(|e| fail(&e))?))
        }
    }
}

#[derive(Default)]
struct ProducerStats {
    produced: u64,
    in_window: u64,
    errors: u64,
}

#[derive(Default)]
struct ConsumerStats {
    delivered: u64,
    in_window: u64,
    bytes_in_window: u64,
    latency: LatencyCollector,
}

/// One independent run of `spec`.
pub fn run_once(spec: &WorkloadSpec) -> Result<RunReport, BenchError> {
    spec.validate()?;
    let engine = build_engine(spec)?;
    let broker = engine.lanes();
    let clock = broker.clock();
    let secs = |s: f64| (s * 1e9) as u64;

    let mut consumers: Vec<_> = (0..spec.consumers).map(|j| broker.consumer(j)).collect();
    let mut producers: Vec<_> = (0..spec.producers).map(|i| broker.producer(i)).collect();

    let start = clock.now_ns();
    let warm = start + secs(spec.warmup_s);
    let end = start + secs(spec.duration_s);
    let grace = secs((spec.duration_s * 0.1).clamp(0.05, 1.0));
    let producers_done = AtomicBool::new(false);
    let stop_maintenance = AtomicBool::new(false);
    let live_producers = std::sync::atomic::AtomicUsize::new(spec.producers);
    let sent_bytes = AtomicU64::new(0);
    let consumed_bytes = AtomicU64::new(0);

    let (pstats, cstats) = std::thread::scope(|scope| {
        let maint = scope.spawn(|| {
            while !stop_maintenance.load(Ordering::Relaxed) {
                broker.maintenance();
                std::thread::sleep(Duration::from_millis(20));
            }
        });
        let phandles: Vec<_> = producers
            .drain(..)
            .enumerate()
            .map(|(i, mut lane)| {
                let clock = clock.clone();
                let live = &live_producers;
                let done = &producers_done;
                let (sent, consumed) = (&sent_bytes, &consumed_bytes);
                scope.spawn(move || {
                    let mut st = ProducerStats::default();
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
                    let mut payload = vec![0u8; spec.record_size_bytes];
                    rng.fill_bytes(&mut payload);
                    let flow = format!("p{i}");
                    let tick = spec.rate_pps.map(|r| Duration::from_secs_f64(spec.burst as f64 / r));
                    let began = Instant::now();
                    let mut seq = 0u64;
                    'outer: loop {
                        for _ in 0..spec.burst {
                            let now = clock.now_ns();
                            if now >= end || spec.messages_per_producer.is_some_and(|m| seq >= m) {
                                break 'outer;
                            }
                            if let Some(cap) = spec.max_in_flight_bytes {
                                while sent.load(Ordering::Relaxed).saturating_sub(consumed.load(Ordering::Relaxed)) > cap
                                    && clock.now_ns() < end
                                {
                                    std::thread::sleep(Duration::from_micros(100));
                                }
                            }
                            let mut msg = Message::new(flow.as_str(), seq, payload.clone());
                            msg.produced_at = now;
                            loop {
                                match lane.send(msg.clone()) {
                                    Ok(()) => break,
                                    Err(BrokerError::Backpressure) if clock.now_ns() < end => std::thread::yield_now(),
                                    Err(_) => {
                                        st.errors += 1;
                                        break;
                                    }
                                }
                            }
                            st.produced += 1;
                            sent.fetch_add(spec.record_size_bytes as u64, Ordering::Relaxed);
                            if now >= warm {
                                st.in_window += 1;
                            }
                            seq += 1;
                        }
                        if let Some(t) = tick {
                            let next = t * (seq / spec.burst as u64) as u32;
                            if let Some(wait) = next.checked_sub(began.elapsed()) {
                                std::thread::sleep(wait);
                            }
                        }
                    }
                    if lane.flush().is_err() {
                        st.errors += 1;
                    }
                    if live.fetch_sub(1, Ordering::AcqRel) == 1 {
                        done.store(true, Ordering::Release);
                    }
                    st
                })
            })
            .collect();
        let chandles: Vec<_> = consumers
            .drain(..)
            .map(|mut lane| {
                let clock = clock.clone();
                let done = &producers_done;
                let consumed = &consumed_bytes;
                scope.spawn(move || {
                    let mut st = ConsumerStats { latency: LatencyCollector::new(warm), ..Default::default() };
                    let mut idle_since: Option<u64> = None;
                    loop {
                        let now = clock.now_ns();
                        if now >= end + grace {
                            break;
                        }
                        let got = match lane.poll(512) {
                            Ok(g) => g,
                            Err(_) => Vec::new(),
                        };
                        if got.is_empty() {
                            // Stop early once producers are finished and nothing arrives.
                            if done.load(Ordering::Acquire) {
                                let since = *idle_since.get_or_insert(now);
                                if now.saturating_sub(since) > grace {
                                    break;
                                }
                            }
                            std::thread::sleep(Duration::from_micros(50));
                            continue;
                        }
                        idle_since = None;
                        let bytes: usize = got.iter().map(|d| d.msg.payload.len()).sum();
                        consumed.fetch_add(bytes as u64, Ordering::Relaxed);
                        for d in got {
                            st.delivered += 1;
                            st.latency.record(d.msg.produced_at, d.at_ns);
                            if d.at_ns >= warm && d.at_ns < end {
                                st.in_window += 1;
                                st.bytes_in_window += d.msg.payload.len() as u64;
                            }
                        }
                    }
                    st
                })
            })
            .collect();
        let p: Vec<ProducerStats> = phandles.into_iter().map(|h| h.join().expect("producer thread")).collect();
        let c: Vec<ConsumerStats> = chandles.into_iter().map(|h| h.join().expect("consumer thread")).collect();
        stop_maintenance.store(true, Ordering::Relaxed);
        maint.join().expect("maintenance thread");
        (p, c)
    });

    let mut latency = LatencyCollector::new(warm);
    let mut report = RunReport {
        window_s: spec.duration_s - spec.warmup_s,
        produced: pstats.iter().map(|s| s.produced).sum(),
        produced_in_window: pstats.iter().map(|s| s.in_window).sum(),
        delivered: 0,
        delivered_in_window: 0,
        bytes_in_window: 0,
        send_errors: pstats.iter().map(|s| s.errors).sum(),
        latency: Err(BenchError::NoSamples),
        latencies_ns: Vec::new(),
        spill_reads: 0,
        engine_deliveries: 0,
    };
    for c in cstats {
        report.delivered += c.delivered;
        report.delivered_in_window += c.in_window;
        report.bytes_in_window += c.bytes_in_window;
        latency.merge(c.latency);
    }
    report.latency = latency.summary();
    report.latencies_ns = latency.samples().to_vec();
    (report.spill_reads, report.engine_deliveries) = engine.spill_stats();
    Ok(report)
}

pub fn run_latency(spec: &WorkloadSpec) -> Result<LatencySummary, BenchError> {
    run_once(spec)?.latency
}

fn sample(spec: &WorkloadSpec, param: &str, value: &str, r: &RunReport) -> ThroughputSample {
    ThroughputSample {
        engine: spec.engine,
        sweep_param: param.to_string(),
        sweep_value: value.to_string(),
        pps: r.pps(),
        bps: r.bps(),
        latency: r.latency.clone().ok(),
        seed: spec.seed,
        config: spec.snapshot(),
    }
}

/// One independent run per sweep value.
pub fn run_throughput(spec: &WorkloadSpec, sweep: &Sweep) -> Result<Vec<ThroughputSample>, BenchError> {
    let specs: Vec<WorkloadSpec> =
        sweep.values.iter().map(|v| spec.with_param(sweep.param, v)).collect::<Result<_, _>>()?;
    for s in &specs {
        s.validate()?;
    }
    let mut out = Vec::with_capacity(specs.len());
    for (s, v) in specs.iter().zip(&sweep.values) {
        let r = run_once(s)?;
        out.push(sample(s, sweep.param.as_str(), v, &r));
    }
    Ok(out)
}

/// A single run reported as a sample without a sweep.
pub fn run_single(spec: &WorkloadSpec) -> Result<ThroughputSample, BenchError> {
    let r = run_once(spec)?;
    Ok(sample(spec, "none", "", &r))
}
