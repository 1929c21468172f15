use duolog_core::harness::{
    check_phase_order, evaluate, random_scenario, replay, run_scenario, FaultEvent, FaultKind, FaultPlan,
    HarnessError, Phase, Scenario, ScenarioTopology, Trigger, Verdict,
};
use duolog_core::qos::AckPolicy;
use duolog_core::{Delivery, EngineKind, EventKind, FlushPolicy, LogAckMode, Ordering, QoSConfig};

fn scenario(engine: EngineKind, qos: QoSConfig) -> Scenario {
    let mut s = random_scenario(engine, qos.delivery, 1);
    s.qos = qos;
    s.faults = FaultPlan::default();
    s.topology = ScenarioTopology { nodes: 3, partitions: 2, queues: 1 };
    s.workload.producers = 2;
    s.workload.consumers = 1;
    s.workload.messages_per_producer = Some(10);
    s
}

fn fault(at: Trigger, kind: FaultKind, target: Option<usize>, param: u64) -> FaultEvent {
    FaultEvent { at, kind, target, param }
}

#[test]
fn fault_free_runs_are_clean_on_both_engines() {
    for (engine, qos) in [
        (EngineKind::Log, QoSConfig::at_least_once_log()),
        (EngineKind::Log, QoSConfig::at_most_once_log()),
        (EngineKind::Exch, QoSConfig::at_least_once_exch()),
        (EngineKind::Exch, QoSConfig::at_most_once_exch()),
    ] {
        let s = scenario(engine, qos);
        let (out, report, v) = evaluate(&s).unwrap();
        assert!(report.is_clean(), "{engine:?}: {:?}", report.violations);
        assert_eq!(v, Verdict::Pass);
        assert!(out.drained);
        assert_eq!(out.consumed.count(EventKind::Delivered), 20);
    }
}

#[test]
fn at_most_once_crash_before_flush_may_lose_but_never_duplicates() {
    let mut qos = QoSConfig::at_most_once_log();
    qos.flush = FlushPolicy { flush_interval_messages: Some(1_000), flush_interval_ms: None };
    qos.ack_policy = AckPolicy::Log { acks: LogAckMode::Acks1 };
    let mut s = scenario(EngineKind::Log, qos);
    s.topology.partitions = 1;
    s.faults.events = (0..3).map(|n| fault(Trigger::AtMessage(6), FaultKind::CrashNode, Some(n), 5)).collect();
    let (_, report, v) = evaluate(&s).unwrap();
    assert!(!report.no_loss, "unflushed confirmed messages die with the node");
    assert!(report.no_duplication);
    assert_eq!(v, Verdict::Pass);
}

#[test]
fn at_least_once_dropped_confirm_causes_retransmission_not_loss() {
    let mut s = scenario(EngineKind::Exch, QoSConfig::at_least_once_exch());
    s.faults.events = vec![fault(Trigger::AtPhase { phase: Phase::T3Confirmed, count: 3 }, FaultKind::DropAck, Some(0), 0)];
    let (out, report, v) = evaluate(&s).unwrap();
    assert!(report.no_loss);
    assert_eq!(v, Verdict::Pass);
    assert_eq!(out.unfired_faults, 0);
    // The exchange queue dedupes the retransmission while the original is
    // still held, so duplication is allowed but not required here.
    let mut s = scenario(EngineKind::Log, QoSConfig::at_least_once_log());
    s.faults.events = vec![fault(Trigger::AtPhase { phase: Phase::T3Confirmed, count: 1 }, FaultKind::DropAck, Some(0), 0)];
    let (_, report, v) = evaluate(&s).unwrap();
    assert!(report.no_loss);
    assert!(!report.no_duplication, "the retransmitted batch is appended twice");
    assert_eq!(v, Verdict::Pass);
}

#[test]
fn consumer_faults_follow_the_delivery_mode() {
    for kind in [FaultKind::DuplicateDeliver, FaultKind::CrashConsumer] {
        let mut s = scenario(EngineKind::Log, QoSConfig::at_least_once_log());
        s.workload.batching.producer_batch_messages = 4;
        s.faults.events = vec![fault(Trigger::AtPhase { phase: Phase::T4Delivered, count: 1 }, kind, None, 0)];
        let (_, report, v) = evaluate(&s).unwrap();
        assert!(report.no_loss && !report.no_duplication, "{kind:?}: {report:?}");
        assert_eq!(v, Verdict::Pass);

        let mut s = scenario(EngineKind::Log, QoSConfig::at_most_once_log());
        s.workload.batching.producer_batch_messages = 4;
        s.faults.events = vec![fault(Trigger::AtPhase { phase: Phase::T4Delivered, count: 1 }, kind, None, 0)];
        let (_, report, v) = evaluate(&s).unwrap();
        assert!(report.no_duplication, "{kind:?}");
        assert_eq!(v, Verdict::Pass);
    }
}

#[test]
fn phases_are_monotonic_and_log_t5_is_retention() {
    for seed in 0..40 {
        for engine in [EngineKind::Log, EngineKind::Exch] {
            let s = random_scenario(engine, Delivery::AtLeastOnce, seed);
            let out = run_scenario(&s).unwrap();
            check_phase_order(&out.phases).unwrap();
            if engine == EngineKind::Log {
                // Retention runs after everything else, so every log T5 is
                // later than every delivery.
                let last_delivery = out.consumed.iter().map(|e| e.at_ns).max().unwrap_or(0);
                assert!(out.phases.iter().filter(|p| p.phase == Phase::T5AckedOrRetained).all(|p| p.at_ns > last_delivery));
                assert_eq!(out.consumed.count(EventKind::Acked), 0);
            } else if out.drained {
                assert_eq!(out.residual_entries, Some(0));
            }
        }
    }
}

#[test]
fn replay_is_byte_identical_and_seeds_matter() {
    let s = random_scenario(EngineKind::Log, Delivery::AtLeastOnce, 7);
    let a = replay(&s).unwrap();
    assert_eq!(a.to_jsonl(), run_scenario(&s).unwrap().to_jsonl());
    let other = random_scenario(EngineKind::Log, Delivery::AtLeastOnce, 8);
    assert_ne!(a.to_jsonl(), run_scenario(&other).unwrap().to_jsonl());
}

#[test]
fn wall_clock_leak_is_detected() {
    let mut s = random_scenario(EngineKind::Exch, Delivery::AtLeastOnce, 3);
    s.mutations.wall_clock = true;
    match replay(&s) {
        Err(HarnessError::NondeterminismDetected { line }) => assert!(line >= 1),
        other => panic!("expected nondeterminism, got {other:?}"),
    }
}

#[test]
fn dropped_batches_are_reported_as_loss() {
    let mut s = scenario(EngineKind::Log, QoSConfig::at_least_once_log());
    s.mutations.drop_every_nth_batch = Some(2);
    let (_, report, v) = evaluate(&s).unwrap();
    assert!(!report.no_loss);
    assert_eq!(v, Verdict::Fail(vec!["loss".into()]));
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut s = scenario(EngineKind::Log, QoSConfig::at_least_once_log());
    s.qos.ordering = Ordering::GlobalSingleLane;
    assert!(matches!(run_scenario(&s), Err(HarnessError::ScenarioInvalid(_))));

    let mut s = scenario(EngineKind::Log, QoSConfig::at_least_once_exch());
    s.engine = EngineKind::Log;
    assert!(matches!(run_scenario(&s), Err(HarnessError::ScenarioInvalid(_))));

    let mut s = scenario(EngineKind::Exch, QoSConfig::at_least_once_exch());
    s.faults.events = vec![fault(Trigger::AtTimeMs(1), FaultKind::CrashNode, Some(9), 1)];
    assert!(matches!(run_scenario(&s), Err(HarnessError::ScenarioInvalid(_))));

    assert!(matches!(Scenario::from_json("{}"), Err(HarnessError::ScenarioInvalid(_))));
}

#[test]
fn scenarios_round_trip_through_json() {
    let s = random_scenario(EngineKind::Exch, Delivery::AtMostOnce, 11);
    let text = serde_json::to_string_pretty(&s).unwrap();
    assert_eq!(Scenario::from_json(&text).unwrap(), s);
}

#[test]
fn random_sweep_small() {
    for engine in [EngineKind::Log, EngineKind::Exch] {
        for delivery in [Delivery::AtLeastOnce, Delivery::AtMostOnce] {
            for seed in 0..100 {
                let s = random_scenario(engine, delivery, seed);
                let (_, report, v) = evaluate(&s).unwrap();
                assert!(v.is_pass(), "{engine:?} {delivery:?} seed {seed}: {:?}", report.violations);
            }
        }
    }
}

#[test]
fn workload_scenarios_mirror_the_bench_settings() {
    use duolog_core::bench::WorkloadSpec;
    for (engine, alo) in [(EngineKind::Log, true), (EngineKind::Exch, true), (EngineKind::Exch, false)] {
        let w = WorkloadSpec {
            engine,
            producers: 2,
            consumers: 2,
            partitions: 4,
            replication_factor: 2,
            at_least_once: alo,
            seed: 9,
            ..WorkloadSpec::default()
        };
        let s = Scenario::from_workload(&w, 15);
        assert!(s.faults.events.is_empty());
        assert_eq!((s.seed, s.topology.nodes), (9, 3));
        if engine == EngineKind::Log {
            assert_eq!(s.topology.partitions, 4);
            assert_eq!(s.qos.delivery, Delivery::AtLeastOnce);
        } else {
            assert_eq!(s.topology.queues, 2);
            assert_eq!(s.qos.delivery == Delivery::AtLeastOnce, alo);
        }
        let (out, report, v) = evaluate(&s).unwrap();
        assert!(report.is_clean(), "{engine:?}: {:?}", report.violations);
        assert_eq!(v, Verdict::Pass);
        assert_eq!(out.produced.count(EventKind::Produced), 30);
        assert_eq!(replay(&s).unwrap().to_jsonl(), out.to_jsonl());
    }
}
