//! Declarations loaded from a JSON topology file.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::model::{Binding, Exchange, ExchangeKind, QueueSpec};
use super::topic::is_valid_pattern;
use super::{ExchBroker, ExchError};

fn default_vhost() -> String {
    "/".to_string()
}

/// `{"vhost": ..., "exchanges": [...], "queues": [...], "bindings": [...]}`.
///
/// Every entity is placed in the file's `vhost`, whatever its own field says.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    #[serde(default = "default_vhost")]
    pub vhost: String,
    #[serde(default)]
    pub exchanges: Vec<Exchange>,
    #[serde(default)]
    pub queues: Vec<QueueSpec>,
    #[serde(default)]
    pub bindings: Vec<Binding>,
}

impl Topology {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let mut t: Topology = serde_json::from_str(s)?;
        t.normalize();
        Ok(t)
    }

    fn normalize(&mut self) {
        for e in &mut self.exchanges {
            e.vhost = self.vhost.clone();
        }
        for q in &mut self.queues {
            q.vhost = self.vhost.clone();
        }
        for b in &mut self.bindings {
            b.vhost = self.vhost.clone();
        }
    }

    /// Static checks that need no broker. Returns every problem found.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let mut exchanges = HashSet::new();
        for e in &self.exchanges {
            if e.name.is_empty() {
                problems.push("exchange with empty name".to_string());
            }
            if !exchanges.insert(e.name.as_str()) {
                problems.push(format!("exchange {:?} declared twice", e.name));
            }
        }
        for e in &self.exchanges {
            if let Some(alt) = &e.alternate {
                if !exchanges.contains(alt.as_str()) {
                    problems.push(format!("exchange {:?} names missing alternate {alt:?}", e.name));
                }
            }
        }
        let mut queues = HashSet::new();
        for q in &self.queues {
            if q.name.is_empty() {
                problems.push("queue with empty name".to_string());
            }
            if !queues.insert(q.name.as_str()) {
                problems.push(format!("queue {:?} declared twice", q.name));
            }
            if q.mirrors.contains(&q.node) {
                problems.push(format!("queue {:?} mirrors onto its own node", q.name));
            }
        }
        for b in &self.bindings {
            let kind = self.exchanges.iter().find(|e| e.name == b.exchange).map(|e| e.kind);
            match kind {
                None => problems.push(format!("binding references unknown exchange {:?}", b.exchange)),
                Some(ExchangeKind::Topic) => match &b.pattern {
                    Some(p) if is_valid_pattern(p) => {}
                    Some(p) => problems.push(format!("binding {}->{} has malformed pattern {p:?}", b.exchange, b.queue)),
                    None => problems.push(format!("binding {}->{} needs a pattern", b.exchange, b.queue)),
                },
                Some(ExchangeKind::ConsistentHash) if b.weight == Some(0) => {
                    problems.push(format!("binding {}->{} has zero weight", b.exchange, b.queue))
                }
                Some(_) => {}
            }
            if !queues.contains(b.queue.as_str()) {
                problems.push(format!("binding references unknown queue {:?}", b.queue));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Declare everything on `broker`, exchanges first.
    pub fn apply(&self, broker: &ExchBroker) -> Result<(), ExchError> {
        for e in &self.exchanges {
            broker.declare_exchange(e.clone())?;
        }
        for q in &self.queues {
            broker.declare_queue(q.clone())?;
        }
        for b in &self.bindings {
            broker.bind(b.clone())?;
        }
        Ok(())
    }
}
