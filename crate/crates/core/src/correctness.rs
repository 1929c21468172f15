//! Verdicts for the three delivery primitives: no-loss, no-duplication and
//! no-disorder, computed from a produced and a consumed [`Journal`].

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::journal::{EventKind, Journal};
use crate::qos::{Ordering, QoSConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Loss,
    Duplication,
    Disorder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub flow_id: String,
    pub seq_no: u64,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessReport {
    pub no_loss: bool,
    pub no_duplication: bool,
    pub no_disorder: bool,
    pub violations: Vec<Violation>,
}

impl CorrectnessReport {
    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    pub fn is_clean(&self) -> bool {
        self.no_loss && self.no_duplication && self.no_disorder
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckError {
    #[error("consumed journal references {flow}/{seq}, which was never produced")]
    MismatchedFlows { flow: String, seq: u64 },
    #[error("production journal lists {flow}/{seq} as produced more than once")]
    DuplicateProduced { flow: String, seq: u64 },
}

/// Compare the two journals.
///
/// * Loss: a `(flow, seq)` with both `Produced` and `Confirmed` events but no
///   `Delivered` event. Unconfirmed messages carry no delivery obligation.
/// * Duplication: a `(flow, seq)` delivered more than once.
/// * Disorder: only first deliveries are ranked. Under `PerPartition` and
///   `PerChannel` each flow is a lane and a first delivery must not carry a
///   lower `seq` than an earlier first delivery of the same flow. Under
///   `GlobalSingleLane` the rank is the position of the `Produced` event in
///   the production journal. `Ordering::None` never reports disorder.
///
/// Violations are listed loss first, then duplication, then disorder.
pub fn check_correctness(
    produced: &Journal,
    consumed: &Journal,
    qos: &QoSConfig,
) -> Result<CorrectnessReport, CheckError> {
    let mut produced_rank: HashMap<(&str, u64), usize> = HashMap::new();
    let mut confirmed: BTreeSet<(&str, u64)> = BTreeSet::new();
    for e in produced.iter() {
        match e.event {
            EventKind::Produced => {
                let rank = produced_rank.len();
                if produced_rank.insert((e.flow.as_str(), e.seq), rank).is_some() {
                    return Err(CheckError::DuplicateProduced { flow: e.flow.clone(), seq: e.seq });
                }
            }
            EventKind::Confirmed => {
                confirmed.insert((e.flow.as_str(), e.seq));
            }
            _ => {}
        }
    }

    let mut delivered_count: HashMap<(&str, u64), usize> = HashMap::new();
    let mut first_deliveries: Vec<(&str, u64)> = Vec::new();
    for e in consumed.iter().filter(|e| e.event == EventKind::Delivered) {
        let id = (e.flow.as_str(), e.seq);
        if !produced_rank.contains_key(&id) {
            return Err(CheckError::MismatchedFlows { flow: e.flow.clone(), seq: e.seq });
        }
        let c = delivered_count.entry(id).or_insert(0);
        *c += 1;
        if *c == 1 {
            first_deliveries.push(id);
        }
    }

    let mut violations = Vec::new();
    for &(flow, seq) in &confirmed {
        if produced_rank.contains_key(&(flow, seq)) && !delivered_count.contains_key(&(flow, seq)) {
            violations.push(Violation {
                flow_id: flow.to_string(),
                seq_no: seq,
                kind: ViolationKind::Loss,
                detail: "confirmed but never delivered".into(),
            });
        }
    }

    let mut dups: Vec<_> = delivered_count.iter().filter(|(_, &c)| c > 1).collect();
    dups.sort();
    for (&(flow, seq), &c) in dups {
        violations.push(Violation {
            flow_id: flow.to_string(),
            seq_no: seq,
            kind: ViolationKind::Duplication,
            detail: format!("delivered {c} times"),
        });
    }

    match qos.ordering {
        Ordering::None => {}
        Ordering::PerPartition | Ordering::PerChannel => {
            let mut max_seen: HashMap<&str, u64> = HashMap::new();
            for &(flow, seq) in &first_deliveries {
                match max_seen.get(flow) {
                    Some(&m) if seq < m => violations.push(Violation {
                        flow_id: flow.to_string(),
                        seq_no: seq,
                        kind: ViolationKind::Disorder,
                        detail: format!("first delivered after seq {m}"),
                    }),
                    _ => {
                        max_seen.insert(flow, seq);
                    }
                }
            }
        }
        Ordering::GlobalSingleLane => {
            let mut max_rank: Option<(usize, &str, u64)> = None;
            for &(flow, seq) in &first_deliveries {
                let rank = produced_rank[&(flow, seq)];
                match max_rank {
                    Some((m, mf, ms)) if rank < m => violations.push(Violation {
                        flow_id: flow.to_string(),
                        seq_no: seq,
                        kind: ViolationKind::Disorder,
                        detail: format!("first delivered after {mf}/{ms}, which was produced later"),
                    }),
                    _ => max_rank = Some((rank, flow, seq)),
                }
            }
        }
    }

    let has = |k: ViolationKind| violations.iter().any(|v| v.kind == k);
    Ok(CorrectnessReport {
        no_loss: !has(ViolationKind::Loss),
        no_duplication: !has(ViolationKind::Duplication),
        no_disorder: !has(ViolationKind::Disorder),
        violations,
    })
}

/// Flows present in a journal.
pub fn flows(j: &Journal) -> HashSet<String> {
    j.iter().map(|e| e.flow.clone()).collect()
}
