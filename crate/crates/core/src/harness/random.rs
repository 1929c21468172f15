//! Seeded random scenario generator for the correctness sweep.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FaultEvent, FaultKind, FaultPlan, Mutations, Phase, Scenario, ScenarioTopology, Trigger};
use crate::bench::WorkloadSpec;
use crate::broker::EngineKind;
use crate::qos::{AckPolicy, ConfirmPolicy, Delivery, FlushPolicy, LogAckMode, Ordering, QoSConfig};

/// A valid scenario drawn from `seed`.
///
/// At-least-once log scenarios use either three quorum-acknowledged
/// replicas or a single replica that flushes every message, since other
/// settings can legitimately lose confirmed data on a crash.
pub fn random_scenario(engine: EngineKind, delivery: Delivery, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let alo = delivery == Delivery::AtLeastOnce;
    let nodes = 3;
    let ordering = *[Ordering::None, Ordering::PerPartition, Ordering::PerChannel, Ordering::GlobalSingleLane]
        .choose(&mut rng)
        .expect("non-empty");
    let single = ordering == Ordering::GlobalSingleLane;

    let producers = if single { 1 } else { rng.gen_range(1..=3) };
    let mut topology = ScenarioTopology { nodes, partitions: 1, queues: 1 };
    let consumers;
    let (rf, ack_policy, flush) = match engine {
        EngineKind::Log => {
            topology.partitions = if single { 1 } else { rng.gen_range(1..=4) };
            consumers = if single { 1 } else { rng.gen_range(1..=3) };
            if alo {
                if rng.gen_bool(0.5) {
                    (3, AckPolicy::Log { acks: LogAckMode::AcksQuorum }, random_flush(&mut rng))
                } else {
                    (1, AckPolicy::Log { acks: LogAckMode::Acks1 }, FlushPolicy::every_message())
                }
            } else {
                let acks = *[LogAckMode::Acks0, LogAckMode::Acks1, LogAckMode::AcksQuorum].choose(&mut rng).expect("non-empty");
                (rng.gen_range(1..=3), AckPolicy::Log { acks }, random_flush(&mut rng))
            }
        }
        EngineKind::Exch => {
            topology.queues = if single { 1 } else { rng.gen_range(1..=3) };
            // Every queue needs a consumer; ordered runs allow only one.
            consumers = if ordering == Ordering::None { topology.queues + rng.gen_range(0..=1) } else { topology.queues };
            let rf = rng.gen_range(1..=2);
            let confirm = ConfirmPolicy { persistent: alo, mirrored: alo && rf > 1 };
            (rf, AckPolicy::Exch { confirm, window: -1 }, FlushPolicy::default())
        }
    };

    let qos = QoSConfig { delivery, ordering, replication_factor: rf, ack_policy, flush };
    let messages = rng.gen_range(5..=30u64);
    let workload = WorkloadSpec {
        engine,
        producers,
        consumers,
        record_size_bytes: rng.gen_range(1..=64),
        messages_per_producer: Some(messages),
        batching: crate::logbroker::BatchingConfig {
            producer_batch_messages: rng.gen_range(1..=5),
            ..Default::default()
        },
        seed,
        ..Default::default()
    };

    let total = messages * producers as u64;
    let kinds = [
        FaultKind::CrashNode,
        FaultKind::DropAck,
        FaultKind::DelayAck,
        FaultKind::DuplicateDeliver,
        FaultKind::CrashConsumer,
    ];
    let events = (0..rng.gen_range(0..=4))
        .map(|_| {
            let kind = *kinds.choose(&mut rng).expect("non-empty");
            let at = match rng.gen_range(0..3) {
                0 => Trigger::AtMessage(rng.gen_range(1..=total)),
                1 => Trigger::AtTimeMs(rng.gen_range(1..=60)),
                _ => Trigger::AtPhase {
                    phase: *[Phase::T2Handled, Phase::T3Confirmed, Phase::T4Delivered].choose(&mut rng).expect("non-empty"),
                    count: rng.gen_range(1..=total),
                },
            };
            let (target, param) = match kind {
                FaultKind::CrashNode => (Some(rng.gen_range(0..nodes)), rng.gen_range(1..=40)),
                FaultKind::DropAck | FaultKind::DelayAck => {
                    (Some(rng.gen_range(0..producers)), rng.gen_range(1..=60))
                }
                FaultKind::DuplicateDeliver | FaultKind::CrashConsumer => (Some(rng.gen_range(0..consumers)), 0),
            };
            FaultEvent { at, kind, target, param }
        })
        .collect();

    Scenario {
        engine,
        topology,
        workload,
        qos,
        faults: FaultPlan { events },
        seed,
        drain_deadline_ms: 5_000,
        mutations: Mutations::default(),
    }
}

fn random_flush(rng: &mut ChaCha8Rng) -> FlushPolicy {
    match rng.gen_range(0..3) {
        0 => FlushPolicy::every_message(),
        1 => FlushPolicy { flush_interval_messages: Some(rng.gen_range(2..=20)), flush_interval_ms: None },
        _ => FlushPolicy::default(),
    }
}
