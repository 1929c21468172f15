use std::collections::BTreeSet;

use super::model::{Binding, ExchangeKind, MatchMode};
use super::topic::match_topic;
use crate::hash::stable_hash_pair;
use crate::message::Message;

/// Queues selected by one exchange's bindings, without alternate handling.
pub fn select_queues(kind: ExchangeKind, bindings: &[Binding], msg: &Message) -> BTreeSet<String> {
    let rk = msg.routing_key.as_deref().unwrap_or("");
    match kind {
        ExchangeKind::Direct => bindings
            .iter()
            .filter(|b| b.key.as_deref().unwrap_or("") == rk)
            .map(|b| b.queue.clone())
            .collect(),
        ExchangeKind::Fanout => bindings.iter().map(|b| b.queue.clone()).collect(),
        ExchangeKind::Topic => match &msg.routing_key {
            Some(rk) => bindings
                .iter()
                .filter(|b| b.pattern.as_deref().is_some_and(|p| match_topic(p, rk)))
                .map(|b| b.queue.clone())
                .collect(),
            None => BTreeSet::new(),
        },
        ExchangeKind::Headers => {
            bindings.iter().filter(|b| headers_match(b, msg)).map(|b| b.queue.clone()).collect()
        }
        ExchangeKind::ConsistentHash => consistent_hash_pick(bindings, rk.as_bytes()).into_iter().collect(),
    }
}

pub fn headers_match(b: &Binding, msg: &Message) -> bool {
    let hit = |(k, v): (&String, &String)| msg.headers.get(k) == Some(v);
    match b.match_mode {
        MatchMode::All => b.header_match.iter().all(hit),
        MatchMode::Any => b.header_match.iter().any(hit),
    }
}

/// Weighted rendezvous hashing: each binding scores
/// `weight / -ln(u)` with `u` in (0, 1) derived from the stable hash of
/// `(queue, routing_key)`; the highest score wins. A binding is chosen with
/// probability proportional to its weight, and the choice for a key only
/// changes when the winning binding is removed or outscored by a new one.
pub fn consistent_hash_pick(bindings: &[Binding], routing_key: &[u8]) -> Option<String> {
    let mut best: Option<(f64, &Binding)> = None;
    for b in bindings {
        let w = f64::from(b.weight.unwrap_or(1));
        if w <= 0.0 {
            continue;
        }
        let h = stable_hash_pair(b.queue.as_bytes(), routing_key);
        let u = ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let score = w / -u.ln();
        if best.map_or(true, |(s, _)| score > s) {
            best = Some((score, b));
        }
    }
    best.map(|(_, b)| b.queue.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rk: &str) -> Message {
        Message::new("f", 0, vec![]).with_routing_key(rk)
    }

    #[test]
    fn fanout_selects_all() {
        let bs: Vec<Binding> = ["q1", "q2", "q3"].iter().map(|q| Binding::new("x", *q)).collect();
        assert_eq!(select_queues(ExchangeKind::Fanout, &bs, &m("any")).len(), 3);
    }

    #[test]
    fn direct_matches_key_only() {
        let bs = vec![Binding::new("x", "q1").key("a"), Binding::new("x", "q2").key("b")];
        let got = select_queues(ExchangeKind::Direct, &bs, &m("b"));
        assert_eq!(got.into_iter().collect::<Vec<_>>(), vec!["q2".to_string()]);
    }

    #[test]
    fn headers_all_vs_any() {
        let msg = Message::new("f", 0, vec![]).with_header("x", "1");
        let all = Binding::new("x", "q").header("x", "1").header("y", "2");
        let any = all.clone().mode(MatchMode::Any);
        assert!(!headers_match(&all, &msg));
        assert!(headers_match(&any, &msg));
    }

    #[test]
    fn consistent_hash_is_deterministic() {
        let bs: Vec<Binding> = (0..4).map(|i| Binding::new("x", format!("q{i}")).weight(1)).collect();
        let a = consistent_hash_pick(&bs, b"order-17");
        assert_eq!(a, consistent_hash_pick(&bs, b"order-17"));
        assert_eq!(select_queues(ExchangeKind::ConsistentHash, &bs, &m("order-17")).len(), 1);
    }
}
