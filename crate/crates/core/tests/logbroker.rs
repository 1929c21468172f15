use std::collections::HashMap;
use std::sync::Arc;

use duolog_core::fault::{sites, FailAction};
use duolog_core::logbroker::{
    hash_partition, LogBroker, LogBrokerConfig, LogError, Record, RetentionPolicy, TopicConfig, TopicPartition,
};
use duolog_core::{FlushPolicy, LogAckMode, Message, VirtualClock};
use proptest::prelude::*;

fn broker(nodes: usize) -> LogBroker {
    LogBroker::new(LogBrokerConfig { nodes, persistence_dir: None })
}

fn msgs(flow: &str, range: std::ops::Range<u64>) -> Vec<Message> {
    range.map(|i| Message::new(flow, i, format!("m{i}").into_bytes())).collect()
}

fn every_message() -> FlushPolicy {
    FlushPolicy::every_message()
}

fn fetch_all(b: &LogBroker, topic: &str, partition: u32, from: u64) -> Vec<Record> {
    b.fetch(topic, partition, from, usize::MAX).unwrap().records
}

fn offsets(r: &[Record]) -> Vec<u64> {
    r.iter().map(|r| r.offset).collect()
}

#[test]
fn create_topic_examples() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 3, 1)).unwrap();
    for p in 0..3 {
        assert_eq!(b.next_offset("t", p).unwrap(), 0);
        assert!(fetch_all(&b, "t", p, 0).is_empty());
    }
    assert!(matches!(b.next_offset("t", 3), Err(LogError::UnknownPartition { .. })));
    assert!(matches!(b.create_topic(TopicConfig::new("t", 1, 1)), Err(LogError::DuplicateTopic(_))));

    let single = broker(1);
    assert!(matches!(single.create_topic(TopicConfig::new("r", 1, 2)), Err(LogError::NotEnoughNodes { .. })));
    assert!(matches!(b.create_topic(TopicConfig::new("z", 0, 1)), Err(LogError::InvalidConfig(_))));
}

#[test]
fn replicas_spread_round_robin() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 3, 2)).unwrap();
    assert_eq!(b.replica_nodes("t", 0).unwrap(), vec![0, 1]);
    assert_eq!(b.replica_nodes("t", 1).unwrap(), vec![1, 2]);
    assert_eq!(b.replica_nodes("t", 2).unwrap(), vec![2, 0]);
}

#[test]
fn partition_for_keys_and_rotation() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 4, 1)).unwrap();
    b.create_topic(TopicConfig::new("one", 1, 1)).unwrap();
    let a = b.partition_for("t", Some(b"user42")).unwrap();
    assert_eq!(a, b.partition_for("t", Some(b"user42")).unwrap());
    assert!(a < 4);
    assert_eq!(a, hash_partition(b"user42", 4));
    assert_eq!(b.partition_for("one", None).unwrap(), 0);
    let keyless: Vec<u32> = (0..8).map(|_| b.partition_for("t", None).unwrap()).collect();
    let mut seen = keyless.clone();
    seen.sort();
    seen.dedup();
    assert_eq!(seen, vec![0, 1, 2, 3], "keyless sends visit every partition: {keyless:?}");
}

#[test]
fn append_is_contiguous() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 1, 1)).unwrap();
    let r = b.append_batch("t", 0, &msgs("f", 0..5), LogAckMode::Acks1).unwrap();
    assert_eq!((r.base_offset, r.count), (Some(0), 5));
    assert_eq!(b.next_offset("t", 0).unwrap(), 5);
    let r = b.append_batch("t", 0, &msgs("f", 5..7), LogAckMode::Acks1).unwrap();
    assert_eq!(r.base_offset, Some(5));
    assert_eq!(offsets(&fetch_all(&b, "t", 0, 0)), (0..7).collect::<Vec<_>>());
}

#[test]
fn crash_mid_batch_leaves_nothing_visible() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 1, 1)).unwrap();
    b.append_batch("t", 0, &msgs("f", 0..3), LogAckMode::Acks1).unwrap();
    b.failpoints().arm(sites::LOG_APPEND_RECORD, 2, FailAction::Crash);
    assert!(b.append_batch("t", 0, &msgs("f", 3..8), LogAckMode::Acks1).is_err());
    b.restart_node(0).unwrap();
    let after = b.next_offset("t", 0).unwrap();
    assert!(after <= 3, "no part of the failed batch survives, next offset {after}");
    let seqs: Vec<u64> = fetch_all(&b, "t", 0, b.log_start("t", 0).unwrap()).iter().map(|r| r.message.seq_no).collect();
    assert!(seqs.iter().all(|s| *s < 3));
}

#[test]
fn injected_error_mid_batch_keeps_next_offset() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 1, 1)).unwrap();
    b.append_batch("t", 0, &msgs("f", 0..2), LogAckMode::Acks1).unwrap();
    b.failpoints().arm(sites::LOG_APPEND_RECORD, 1, FailAction::Error);
    assert!(b.append_batch("t", 0, &msgs("f", 2..6), LogAckMode::Acks1).is_err());
    assert_eq!(b.next_offset("t", 0).unwrap(), 2);
    assert_eq!(fetch_all(&b, "t", 0, 0).len(), 2);
}

#[test]
fn quorum_receipt_waits_for_majority() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 1, 3)).unwrap();
    let r = b.append_batch("t", 0, &msgs("f", 0..4), LogAckMode::AcksQuorum).unwrap();
    assert!(r.replicas_holding >= 2, "{r:?}");

    // With both followers down a quorum cannot form.
    b.crash_node(1).unwrap();
    b.crash_node(2).unwrap();
    assert!(b.append_batch("t", 0, &msgs("f", 4..6), LogAckMode::AcksQuorum).is_err());
    assert_eq!(b.high_watermark("t", 0).unwrap(), 4);
}

#[test]
fn acks0_hides_failures() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 1, 1)).unwrap();
    b.crash_node(0).unwrap();
    let r = b.append_batch("t", 0, &msgs("f", 0..3), LogAckMode::Acks0).unwrap();
    assert_eq!(r.base_offset, None);
    assert!(b.append_batch("t", 0, &msgs("f", 0..3), LogAckMode::Acks1).is_err());
}

#[test]
fn fetch_examples() {
    let b = broker(3);
    let mut cfg = TopicConfig::new("t", 1, 1);
    cfg.segment_bytes = 1;
    cfg.flush = every_message();
    cfg.retention = RetentionPolicy { max_age_ms: None, max_messages: Some(10), max_bytes: None };
    b.create_topic(cfg).unwrap();
    b.append_batch("t", 0, &msgs("f", 0..3), LogAckMode::Acks1).unwrap();
    assert_eq!(b.fetch("t", 0, 0, 1 << 20).unwrap().records.len(), 3);
    assert!(b.fetch("t", 0, 3, 1 << 20).unwrap().records.is_empty());
    assert!(matches!(b.fetch("t", 0, 4, 1 << 20), Err(LogError::OffsetOutOfRange { .. })));
    // A tiny budget still yields one record.
    assert_eq!(b.fetch("t", 0, 0, 1).unwrap().records.len(), 1);

    for i in 3..20 {
        b.append_batch("t", 0, &msgs("f", i..i + 1), LogAckMode::Acks1).unwrap();
    }
    b.purge("t").unwrap();
    assert_eq!(b.log_start("t", 0).unwrap(), 10);
    assert!(matches!(b.fetch("t", 0, 0, 1 << 20), Err(LogError::OffsetOutOfRange { .. })));
    assert_eq!(offsets(&fetch_all(&b, "t", 0, 10)), (10..20).collect::<Vec<_>>());
}

#[test]
fn replicated_fetch_stops_at_high_watermark() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 1, 3)).unwrap();
    b.append_batch("t", 0, &msgs("f", 0..2), LogAckMode::AcksQuorum).unwrap();
    b.crash_node(1).unwrap();
    b.crash_node(2).unwrap();
    // The leader takes the batch but no quorum holds it yet.
    b.append_batch("t", 0, &msgs("f", 2..5), LogAckMode::Acks1).unwrap();
    let f = b.fetch("t", 0, 0, usize::MAX).unwrap();
    assert_eq!(f.high_watermark, 2);
    assert_eq!(offsets(&f.records), vec![0, 1]);
    b.restart_node(1).unwrap();
    b.tick();
    let f = b.fetch("t", 0, 0, usize::MAX).unwrap();
    assert_eq!(f.high_watermark, 5);
    assert_eq!(offsets(&f.records), vec![0, 1, 2, 3, 4]);
}

#[test]
fn commit_and_resume() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 2, 1)).unwrap();
    b.append_batch("t", 0, &msgs("f", 0..20), LogAckMode::Acks1).unwrap();
    let members = vec!["c1".to_string(), "c2".to_string()];
    let a = b.assign_partitions("g", &["t"], &members).unwrap();
    assert_eq!(a[&TopicPartition::new("t", 0)], "c1");
    assert_eq!(a[&TopicPartition::new("t", 1)], "c2");

    assert_eq!(b.resume_offset("g", "t", 0).unwrap(), 0);
    b.commit_offset("g", "c1", "t", 0, 10).unwrap();
    // The member restarts and resumes from its last commit.
    assert_eq!(b.resume_offset("g", "t", 0).unwrap(), 10);
    assert_eq!(fetch_all(&b, "t", 0, 10)[0].offset, 10);

    assert!(matches!(b.commit_offset("g", "c2", "t", 0, 5), Err(LogError::NotAssigned { .. })));
    assert!(matches!(b.commit_offset("nobody", "c1", "t", 0, 5), Err(LogError::NotAssigned { .. })));
    assert!(b.commit_offset("g", "c1", "t", 0, 21).is_err());
}

#[test]
fn assignment_examples() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("three", 3, 1)).unwrap();
    b.create_topic(TopicConfig::new("one", 1, 1)).unwrap();
    let members = vec!["c2".to_string(), "c1".to_string()];
    let a = b.assign_partitions("g3", &["three"], &members).unwrap();
    let owners: Vec<&str> = (0..3).map(|p| a[&TopicPartition::new("three", p)].as_str()).collect();
    assert_eq!(owners, ["c1", "c2", "c1"]);
    let a = b.assign_partitions("g1", &["one"], &members).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a[&TopicPartition::new("one", 0)], "c1");
}

#[test]
fn purge_keeps_newest_by_count() {
    let b = broker(3);
    let mut cfg = TopicConfig::new("t", 1, 1);
    cfg.segment_bytes = 1;
    cfg.flush = every_message();
    cfg.retention = RetentionPolicy { max_age_ms: None, max_messages: Some(10), max_bytes: None };
    b.create_topic(cfg).unwrap();
    for i in 0..25 {
        b.append_batch("t", 0, &msgs("f", i..i + 1), LogAckMode::Acks1).unwrap();
    }
    assert_eq!(b.purge("t").unwrap().removed_per_partition, vec![15]);
    assert_eq!(offsets(&fetch_all(&b, "t", 0, 15)), (15..25).collect::<Vec<_>>());
    assert_eq!(b.purge("t").unwrap().total(), 0);
}

#[test]
fn zero_age_purges_all_but_unflushed_tail() {
    let clock = VirtualClock::new();
    let b = LogBroker::with_clock(LogBrokerConfig::default(), clock.clone());
    let mut cfg = TopicConfig::new("t", 1, 1);
    cfg.segment_bytes = 1;
    cfg.flush = FlushPolicy { flush_interval_messages: Some(5), flush_interval_ms: None };
    cfg.retention = RetentionPolicy { max_age_ms: Some(0), max_messages: None, max_bytes: None };
    b.create_topic(cfg).unwrap();
    for i in 0..7 {
        b.append_batch("t", 0, &msgs("f", i..i + 1), LogAckMode::Acks1).unwrap();
    }
    clock.advance_ms(1);
    b.purge("t").unwrap();
    // Offsets 0..5 were flushed and aged out; 5 and 6 are still volatile.
    assert_eq!(b.log_start("t", 0).unwrap(), 5);
    assert_eq!(offsets(&fetch_all(&b, "t", 0, 5)), vec![5, 6]);
}

#[test]
fn compaction_examples() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 1, 1)).unwrap();
    b.create_topic(TopicConfig::new("e", 1, 1)).unwrap();
    b.create_topic(TopicConfig::new("k", 1, 1)).unwrap();
    let batch = vec![
        Message::new("f", 0, b"1".to_vec()).with_key("a"),
        Message::new("f", 1, b"1".to_vec()).with_key("b"),
        Message::new("f", 2, b"2".to_vec()).with_key("a"),
    ];
    b.append_batch("t", 0, &batch, LogAckMode::Acks1).unwrap();
    let r = b.compact("t", 0).unwrap();
    assert_eq!((r.removed, r.retained, r.distinct_keys), (1, 2, 2));
    let left = fetch_all(&b, "t", 0, 0);
    assert_eq!(offsets(&left), vec![1, 2]);
    assert_eq!(left[0].message.key.as_deref(), Some(&b"b"[..]));
    assert_eq!(left[1].message.payload, b"2");

    assert_eq!(b.compact("e", 0).unwrap().retained, 0);

    b.append_batch("k", 0, &msgs("f", 0..2), LogAckMode::Acks1).unwrap();
    assert!(matches!(b.compact("k", 0), Err(LogError::KeylessMessage { offset: 0 })));
}

#[test]
fn compacted_commit_resumes_at_next_survivor() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 1, 1)).unwrap();
    let batch: Vec<Message> =
        (0..6).map(|i| Message::new("f", i, vec![i as u8]).with_key(if i % 2 == 0 { "x" } else { "y" })).collect();
    b.append_batch("t", 0, &batch, LogAckMode::Acks1).unwrap();
    b.assign_partitions("g", &["t"], &["c".to_string()]).unwrap();
    b.commit_offset("g", "c", "t", 0, 2).unwrap();
    b.compact("t", 0).unwrap();
    // Survivors are offsets 4 and 5; a fetch from the committed offset skips the hole.
    assert_eq!(offsets(&fetch_all(&b, "t", 0, b.resume_offset("g", "t", 0).unwrap())), vec![4, 5]);
}

#[test]
fn move_partition_online() {
    let b = broker(4);
    b.create_topic(TopicConfig::new("t", 1, 2)).unwrap();
    assert_eq!(b.replica_nodes("t", 0).unwrap(), vec![0, 1]);
    for i in 0..10 {
        b.append_batch("t", 0, &msgs("f", i * 50..(i + 1) * 50), LogAckMode::AcksQuorum).unwrap();
    }
    b.move_partition("t", 0, 1, 3).unwrap();
    for i in 10..20 {
        b.append_batch("t", 0, &msgs("f", i * 50..(i + 1) * 50), LogAckMode::AcksQuorum).unwrap();
    }
    let mut nodes = b.replica_nodes("t", 0).unwrap();
    nodes.sort();
    assert_eq!(nodes, vec![0, 3]);
    let seqs: Vec<u64> = fetch_all(&b, "t", 0, 0).iter().map(|r| r.message.seq_no).collect();
    assert_eq!(seqs, (0..1000).collect::<Vec<_>>());

    assert!(matches!(b.move_partition("t", 0, 0, 3), Err(LogError::ReplicaExists { node: 3 })));
    assert!(matches!(b.move_partition("t", 0, 0, 9), Err(LogError::UnknownNode(9))));

    b.create_topic(TopicConfig::new("solo", 1, 1)).unwrap();
    b.append_batch("solo", 0, &msgs("f", 0..3), LogAckMode::Acks1).unwrap();
    b.move_partition("solo", 0, 0, 2).unwrap();
    assert_eq!(b.replica_nodes("solo", 0).unwrap(), vec![2]);
    assert_eq!(fetch_all(&b, "solo", 0, 0).len(), 3);
}

#[test]
fn groups_do_not_add_storage_and_replay_is_identical() {
    let b = broker(3);
    b.create_topic(TopicConfig::new("t", 2, 1)).unwrap();
    b.append_batch("t", 0, &msgs("a", 0..50), LogAckMode::Acks1).unwrap();
    b.append_batch("t", 1, &msgs("b", 0..50), LogAckMode::Acks1).unwrap();
    let before = b.storage_bytes("t").unwrap();
    let mut per_group = Vec::new();
    for g in ["g1", "g2"] {
        b.assign_partitions(g, &["t"], &["m".to_string()]).unwrap();
        let mut seen = 0;
        for p in 0..2 {
            let r = fetch_all(&b, "t", p, b.resume_offset(g, "t", p).unwrap());
            seen += r.len();
            b.commit_offset(g, "m", "t", p, r.last().unwrap().offset + 1).unwrap();
        }
        per_group.push(seen);
    }
    assert_eq!(per_group, vec![100, 100]);
    assert_eq!(b.storage_bytes("t").unwrap(), before);
    assert_eq!(fetch_all(&b, "t", 0, 0), fetch_all(&b, "t", 0, 0));
}

#[test]
fn acks0_loss_stays_above_flushed_offset() {
    let b = broker(3);
    let mut cfg = TopicConfig::new("t", 1, 1);
    cfg.flush = FlushPolicy { flush_interval_messages: Some(4), flush_interval_ms: None };
    b.create_topic(cfg).unwrap();
    for i in 0..10 {
        b.append_batch("t", 0, &msgs("f", i..i + 1), LogAckMode::Acks0).unwrap();
    }
    b.crash_node(0).unwrap();
    b.restart_node(0).unwrap();
    // Flushes happened after offsets 3 and 7.
    assert_eq!(offsets(&fetch_all(&b, "t", 0, 0)), (0..8).collect::<Vec<_>>());
}

#[test]
fn quorum_survives_minority_crash_before_flush() {
    let b = broker(3);
    let mut cfg = TopicConfig::new("t", 1, 3);
    cfg.flush = FlushPolicy { flush_interval_messages: Some(1000), flush_interval_ms: None };
    b.create_topic(cfg).unwrap();
    for i in 0..10 {
        b.append_batch("t", 0, &msgs("f", i..i + 1), LogAckMode::AcksQuorum).unwrap();
    }
    b.crash_node(0).unwrap();
    let seqs: Vec<u64> = fetch_all(&b, "t", 0, 0).iter().map(|r| r.message.seq_no).collect();
    assert_eq!(seqs, (0..10).collect::<Vec<_>>());
}

#[test]
fn persisted_segments_use_base_offset_names() {
    let dir = tempfile::tempdir().unwrap();
    let b = LogBroker::new(LogBrokerConfig { nodes: 1, persistence_dir: Some(dir.path().to_path_buf()) });
    let mut cfg = TopicConfig::new("t", 1, 1);
    cfg.segment_bytes = 64;
    cfg.flush = every_message();
    b.create_topic(cfg).unwrap();
    b.append_batch("t", 0, &msgs("f", 0..6), LogAckMode::Acks1).unwrap();
    b.flush_all();
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("node-0").join("t-0"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort_by_key(|n| n.trim_end_matches(".seg").parse::<u64>().unwrap());
    assert!(names.len() > 1, "{names:?}");
    assert_eq!(names[0], "0.seg");
    assert!(names.iter().all(|n| n.ends_with(".seg")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Chained fetches with arbitrary budgets reproduce the partition in offset order.
    #[test]
    fn chained_fetches_are_prefix_consistent(
        batches in prop::collection::vec(1usize..8, 1..12),
        budgets in prop::collection::vec(1usize..200, 1..40),
        segment in 16usize..256,
    ) {
        let b = broker(3);
        let mut cfg = TopicConfig::new("t", 1, 1);
        cfg.segment_bytes = segment;
        b.create_topic(cfg).unwrap();
        let mut seq = 0;
        for n in &batches {
            b.append_batch("t", 0, &msgs("f", seq..seq + *n as u64), LogAckMode::Acks1).unwrap();
            seq += *n as u64;
        }
        let mut pos = 0;
        let mut got = Vec::new();
        for budget in budgets.iter().cycle().take(200) {
            let r = b.fetch("t", 0, pos, *budget).unwrap().records;
            if r.is_empty() {
                break;
            }
            pos = r.last().unwrap().offset + 1;
            got.extend(r.into_iter().map(|r| (r.offset, r.message.seq_no)));
        }
        prop_assert_eq!(got, (0..seq).map(|i| (i, i)).collect::<Vec<_>>());
    }

    /// Every keyed message lands on the partition its key hashes to.
    #[test]
    fn keyed_messages_follow_the_hash(keys in prop::collection::vec("[a-z]{1,6}", 1..40), n in 1u32..9) {
        let b = broker(3);
        b.create_topic(TopicConfig::new("t", n, 1)).unwrap();
        let mut placed: HashMap<String, u32> = HashMap::new();
        for k in &keys {
            let p = b.partition_for("t", Some(k.as_bytes())).unwrap();
            prop_assert!(p < n);
            prop_assert_eq!(*placed.entry(k.clone()).or_insert(p), p);
        }
    }
}

#[test]
fn clock_is_shared_with_the_broker() {
    let clock = VirtualClock::new();
    let b = LogBroker::with_clock(LogBrokerConfig::default(), clock.clone() as Arc<_>);
    clock.advance_ms(5);
    assert_eq!(b.clock().now_ns(), 5_000_000);
}
