//! Fixtures shared by the criterion benches.

use duolog_core::exchbroker::{Binding, ExchBroker, ExchConfig, Exchange, ExchangeKind, OverflowPolicy, QueueSpec};
use duolog_core::logbroker::{LogBroker, LogBrokerConfig, RetentionPolicy, TopicConfig};
use duolog_core::Message;

pub const VHOST: &str = "/";

/// `n` messages of `size` payload bytes on one flow.
pub fn messages(n: usize, size: usize) -> Vec<Message> {
    let payload = vec![0xA5u8; size];
    (0..n as u64).map(|i| Message::new("bench", i, payload.clone())).collect()
}

/// A broker with one topic `t` whose retention keeps memory bounded under
/// repeated appends.
pub fn log_topic(partitions: u32, replication_factor: u32) -> LogBroker {
    let broker = LogBroker::new(LogBrokerConfig { nodes: (replication_factor as usize).max(3), persistence_dir: None });
    let mut cfg = TopicConfig::new("t", partitions, replication_factor);
    cfg.segment_bytes = 256 * 1024;
    cfg.retention = RetentionPolicy { max_age_ms: None, max_messages: None, max_bytes: Some(4 << 20) };
    broker.create_topic(cfg).expect("bench topic");
    broker
}

/// A fanout exchange `fx` feeding `queues` length-capped queues.
pub fn fanout(queues: usize) -> ExchBroker {
    let broker = ExchBroker::new(ExchConfig::default());
    broker.declare_exchange(Exchange::new("fx", ExchangeKind::Fanout)).expect("exchange");
    for i in 0..queues {
        let q = format!("q{i}");
        broker.declare_queue(QueueSpec::new(q.as_str()).max_length(10_000, OverflowPolicy::DropOldest)).expect("queue");
        broker.bind(Binding::new("fx", q)).expect("binding");
    }
    broker
}

/// Topic bindings `n` wide: queue `qi` listens on `svc{i}.*.#`.
pub fn topic_bindings(n: usize) -> Vec<Binding> {
    (0..n).map(|i| Binding::new("tx", format!("q{i}")).pattern(format!("svc{i}.*.#"))).collect()
}

/// Every dotted string of 1 to `max_len` segments over `alphabet`.
pub fn dotted(alphabet: &[&str], max_len: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<&str>> = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer.iter().flat_map(|p| alphabet.iter().map(move |a| [p.as_slice(), &[*a]].concat())).collect();
        out.extend(layer.iter().map(|p| p.join(".")));
    }
    out
}
