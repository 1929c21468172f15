//! Deterministic fault-injection scenario runner.
//!
//! A scenario drives producers, an engine and consumers from a single
//! thread over a virtual clock that advances 1 ms per step. Every message
//! passes through the ownership phases
//!
//! ```text
//! T1 produced -> T2 handled by the broker -> T3 confirm issued
//!             -> T4 first delivery -> T5 acked (exchange) or retained out (log)
//! ```
//!
//! and faults from a [`FaultPlan`] fire on message counts, phase counts or
//! virtual time. The run yields a production journal, a consumption
//! journal and the phase events; [`verdict`] judges the resulting
//! [`CorrectnessReport`] against the delivery mode.

mod random;
mod run;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::WorkloadSpec;
use crate::broker::EngineKind;
use crate::correctness::{CheckError, CorrectnessReport};
use crate::journal::Journal;
use crate::qos::{AckPolicy, ConfirmPolicy, Delivery, FlushPolicy, LogAckMode, Ordering, QoSConfig};

pub use random::random_scenario;
pub use run::run_scenario;

/// Producer retry bound under at-least-once delivery.
pub const MAX_RETRIES: u32 = 5;
/// First retry backoff; doubles on each further retry.
pub const BACKOFF_BASE_MS: u64 = 2;
/// How long a producer waits for a confirm before treating it as lost.
pub const ACK_TIMEOUT_MS: u64 = 20;
/// Virtual time after which an unfinished run is cut off regardless.
pub const HARD_STOP_MS: u64 = 600_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("replay diverged at journal line {line}")]
    NondeterminismDetected { line: usize },
    #[error("engine error: {0}")]
    Engine(String),
    #[error(transparent)]
    Check(#[from] CheckError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Crash node `target`; it restarts `param` ms later.
    CrashNode,
    /// The next confirm to producer `target` (any producer if unset) is lost.
    DropAck,
    /// The next confirm to producer `target` arrives `param` ms late.
    DelayAck,
    /// Consumer `target` loses its next commit or ack and then rewinds to
    /// the broker's view, so the same messages come back.
    DuplicateDeliver,
    /// Consumer `target` crashes halfway through its next batch and
    /// restarts from the broker's view.
    CrashConsumer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    T1Produced,
    T2Handled,
    T3Confirmed,
    T4Delivered,
    T5AckedOrRetained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Once this many messages have been produced (T1) in total.
    AtMessage(u64),
    /// Once the virtual clock reaches this many ms.
    AtTimeMs(u64),
    /// Once `count` events of `phase` have been observed.
    AtPhase { phase: Phase, count: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub at: Trigger,
    pub kind: FaultKind,
    #[serde(default)]
    pub target: Option<usize>,
    #[serde(default)]
    pub param: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub events: Vec<FaultEvent>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioTopology {
    pub nodes: usize,
    /// Log engine: partitions of the single topic.
    pub partitions: u32,
    /// Exchange engine: queues behind the direct exchange.
    pub queues: usize,
}

impl Default for ScenarioTopology {
    fn default() -> Self {
        ScenarioTopology { nodes: 3, partitions: 1, queues: 1 }
    }
}

/// Deliberate defects used to check that the harness notices them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mutations {
    /// Let wall-clock time leak into the virtual clock.
    pub wall_clock: bool,
    /// Have the log engine silently drop every nth batch.
    pub drop_every_nth_batch: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub engine: EngineKind,
    #[serde(default)]
    pub topology: ScenarioTopology,
    /// Uses `producers`, `consumers`, `record_size_bytes`,
    /// `messages_per_producer` (default 20) and
    /// `batching.producer_batch_messages` (log batch size).
    #[serde(default)]
    pub workload: WorkloadSpec,
    pub qos: QoSConfig,
    #[serde(default)]
    pub faults: FaultPlan,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_drain_deadline")]
    pub drain_deadline_ms: u64,
    #[serde(default)]
    pub mutations: Mutations,
}

fn default_drain_deadline() -> u64 {
    5_000
}

/// Messages each producer sends when the workload leaves it open.
pub const DEFAULT_MESSAGES_PER_PRODUCER: u64 = 20;
/// Largest log batch the harness sends.
pub const MAX_HARNESS_BATCH: usize = 16;

impl Scenario {
    pub fn messages_per_producer(&self) -> u64 {
        self.workload.messages_per_producer.unwrap_or(DEFAULT_MESSAGES_PER_PRODUCER)
    }

    pub fn batch_size(&self) -> usize {
        self.workload.batching.producer_batch_messages.clamp(1, MAX_HARNESS_BATCH)
    }

    /// A fault-free scenario shaped like a bench workload: same engine,
    /// client counts, sizes, replication and acknowledgement mode, with
    /// `messages` per producer.
    pub fn from_workload(w: &WorkloadSpec, messages: u64) -> Self {
        let rf = w.replication_factor.max(1);
        let mut topology = ScenarioTopology { nodes: (rf as usize).max(3), ..Default::default() };
        let qos = match w.engine {
            EngineKind::Log => {
                topology.partitions = w.partitions.max(1);
                let delivery = if w.acks == LogAckMode::Acks0 { Delivery::AtMostOnce } else { Delivery::AtLeastOnce };
                QoSConfig {
                    delivery,
                    ordering: Ordering::PerPartition,
                    replication_factor: rf,
                    ack_policy: AckPolicy::Log { acks: w.acks },
                    flush: w.batching.broker_flush(),
                }
            }
            EngineKind::Exch => {
                topology.queues = w.consumers.max(1);
                let alo = w.at_least_once;
                QoSConfig {
                    delivery: if alo { Delivery::AtLeastOnce } else { Delivery::AtMostOnce },
                    ordering: Ordering::PerChannel,
                    replication_factor: rf,
                    ack_policy: AckPolicy::Exch {
                        confirm: ConfirmPolicy { persistent: alo, mirrored: alo && rf > 1 },
                        window: w.confirm_window,
                    },
                    flush: FlushPolicy::default(),
                }
            }
        };
        Scenario {
            engine: w.engine,
            topology,
            workload: WorkloadSpec { messages_per_producer: Some(messages), ..w.clone() },
            qos,
            faults: FaultPlan::default(),
            seed: w.seed,
            drain_deadline_ms: default_drain_deadline(),
            mutations: Mutations::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::ScenarioInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::ScenarioInvalid(m));
        let w = &self.workload;
        let t = &self.topology;
        let q = &self.qos;
        if w.producers == 0 || w.consumers == 0 {
            return bad("need at least one producer and one consumer".into());
        }
        if t.nodes == 0 || q.replication_factor == 0 || q.replication_factor as usize > t.nodes {
            return bad(format!("replication factor {} needs 1..={} nodes", q.replication_factor, t.nodes));
        }
        if !q.flush.is_valid() {
            return bad("flush policy needs a finite bound".into());
        }
        match (self.engine, q.ack_policy) {
            (EngineKind::Log, AckPolicy::Log { .. }) | (EngineKind::Exch, AckPolicy::Exch { .. }) => {}
            _ => return bad("ack policy does not match the engine".into()),
        }
        match self.engine {
            EngineKind::Log if t.partitions == 0 => return bad("need at least one partition".into()),
            EngineKind::Exch if t.queues == 0 => return bad("need at least one queue".into()),
            _ => {}
        }
        if q.ordering == Ordering::GlobalSingleLane {
            let lanes = match self.engine {
                EngineKind::Log => t.partitions as usize,
                EngineKind::Exch => t.queues,
            };
            if lanes != 1 || w.producers != 1 || w.consumers != 1 {
                return bad("global order needs one producer, one lane and one consumer".into());
            }
        }
        if self.engine == EngineKind::Exch && w.consumers < t.queues {
            return bad("every queue needs a consumer".into());
        }
        if self.engine == EngineKind::Exch && q.ordering != Ordering::None && w.consumers > t.queues {
            return bad("ordered exchange scenarios need at most one consumer per queue".into());
        }
        for (i, f) in self.faults.events.iter().enumerate() {
            let limit = match f.kind {
                FaultKind::CrashNode => t.nodes,
                FaultKind::DropAck | FaultKind::DelayAck => w.producers,
                FaultKind::DuplicateDeliver | FaultKind::CrashConsumer => w.consumers,
            };
            if f.target.is_some_and(|x| x >= limit) {
                return bad(format!("fault {i} targets {:?} but only {limit} exist", f.target));
            }
            if let Trigger::AtPhase { count: 0, .. } | Trigger::AtMessage(0) = f.at {
                // Fires immediately; harmless but almost certainly a typo.
                return bad(format!("fault {i} has a zero count trigger"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub phase: Phase,
    pub flow: String,
    pub seq: u64,
    pub at_ns: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioOutcome {
    pub produced: Journal,
    pub consumed: Journal,
    pub phases: Vec<PhaseEvent>,
    /// True when the run went idle before the drain deadline.
    pub drained: bool,
    /// Exchange engine: entries the broker still held after the run.
    pub residual_entries: Option<usize>,
    /// Faults that never fired because their trigger was not reached.
    pub unfired_faults: usize,
}

impl ScenarioOutcome {
    /// Byte-stable rendering used for replay comparison.
    pub fn to_jsonl(&self) -> String {
        let mut s = self.produced.to_jsonl();
        s.push_str(&self.consumed.to_jsonl());
        for p in &self.phases {
            s.push_str(&serde_json::to_string(p).expect("phase events serialize"));
            s.push('\n');
        }
        s
    }
}

/// Per message, phases appear at most once each and in T1..T5 order, with
/// non-decreasing timestamps.
pub fn check_phase_order(phases: &[PhaseEvent]) -> Result<(), String> {
    let mut last: std::collections::HashMap<(&str, u64), (Phase, u64)> = Default::default();
    for p in phases {
        let key = (p.flow.as_str(), p.seq);
        if let Some(&(ph, at)) = last.get(&key) {
            if p.phase <= ph || p.at_ns < at {
                return Err(format!("{}/{}: {:?}@{} after {:?}@{}", p.flow, p.seq, p.phase, p.at_ns, ph, at));
            }
        } else if p.phase != Phase::T1Produced {
            return Err(format!("{}/{}: {:?} before T1", p.flow, p.seq, p.phase));
        }
        last.insert(key, (p.phase, p.at_ns));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail(Vec<String>),
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

/// At-most-once requires no duplication, at-least-once requires no loss,
/// and ordering is judged whenever the QoS asks for one.
pub fn verdict(report: &CorrectnessReport, qos: &QoSConfig) -> Verdict {
    let mut reasons = Vec::new();
    match qos.delivery {
        Delivery::AtMostOnce if !report.no_duplication => reasons.push("duplication".to_string()),
        Delivery::AtLeastOnce if !report.no_loss => reasons.push("loss".to_string()),
        _ => {}
    }
    if qos.ordering != Ordering::None && !report.no_disorder {
        reasons.push("disorder".to_string());
    }
    if reasons.is_empty() {
        Verdict::Pass
    } else {
        Verdict::Fail(reasons)
    }
}

/// Run a scenario, check the journals and judge the result.
pub fn evaluate(s: &Scenario) -> Result<(ScenarioOutcome, CorrectnessReport, Verdict), HarnessError> {
    let out = run_scenario(s)?;
    let report = crate::correctness::check_correctness(&out.produced, &out.consumed, &s.qos)?;
    let v = verdict(&report, &s.qos);
    Ok((out, report, v))
}

/// Run twice and insist on byte-identical journals.
pub fn replay(s: &Scenario) -> Result<ScenarioOutcome, HarnessError> {
    let a = run_scenario(s)?;
    let b = run_scenario(s)?;
    let (ja, jb) = (a.to_jsonl(), b.to_jsonl());
    if ja != jb {
        let line = ja.lines().zip(jb.lines()).position(|(x, y)| x != y).unwrap_or_else(|| ja.lines().count().min(jb.lines().count()));
        return Err(HarnessError::NondeterminismDetected { line: line + 1 });
    }
    Ok(a)
}
