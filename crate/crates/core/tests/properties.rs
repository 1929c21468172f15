use std::collections::BTreeSet;

use duolog_core::advisor::{Cell, DeterminationTable, FeatureVector, ThroughputCell};
use duolog_core::bench::stats::{nearest_rank, LatencyCollector, LatencySummary};
use duolog_core::bench::{run_once, WorkloadSpec};
use duolog_core::model::{fit, predict_kafka, predict_rabbit, presets, Constants, ModelForm, Sample};
use duolog_core::{check_correctness, EngineKind, EventKind, Journal, Ordering, QoSConfig, ViolationKind};
use proptest::prelude::*;

type Id = (&'static str, u64);

/// Violation counts by the literal definitions, quadratic and unoptimised.
fn oracle(produced: &[Id], confirmed: &[bool], delivered: &[Id], ordering: Ordering) -> (usize, usize, usize) {
    let loss = produced
        .iter()
        .zip(confirmed)
        .filter(|(id, c)| **c && !delivered.contains(id))
        .count();
    let distinct: BTreeSet<&Id> = delivered.iter().collect();
    let dup = distinct.iter().filter(|id| delivered.iter().filter(|d| d == *id).count() > 1).count();
    let firsts: Vec<Id> = delivered.iter().enumerate().filter(|(i, d)| !delivered[..*i].contains(d)).map(|x| *x.1).collect();
    let rank = |id: &Id| produced.iter().position(|p| p == id).unwrap();
    let disorder = (0..firsts.len())
        .filter(|&j| {
            (0..j).any(|i| match ordering {
                Ordering::None => false,
                Ordering::PerPartition | Ordering::PerChannel => firsts[i].0 == firsts[j].0 && firsts[i].1 > firsts[j].1,
                Ordering::GlobalSingleLane => rank(&firsts[i]) > rank(&firsts[j]),
            })
        })
        .count();
    (loss, dup, disorder)
}

fn journals(produced: &[Id], confirmed: &[bool], delivered: &[Id]) -> (Journal, Journal) {
    let mut p = Journal::new();
    for (t, ((f, s), c)) in produced.iter().zip(confirmed).enumerate() {
        p.push(f, *s, EventKind::Produced, t as u64).unwrap();
        if *c {
            p.push(f, *s, EventKind::Confirmed, t as u64).unwrap();
        }
    }
    let mut d = Journal::new();
    for (t, (f, s)) in delivered.iter().enumerate() {
        d.push(f, *s, EventKind::Delivered, t as u64).unwrap();
    }
    (p, d)
}

fn qos(ordering: Ordering) -> QoSConfig {
    QoSConfig { ordering, ..QoSConfig::at_least_once_log() }
}

fn assert_agrees(produced: &[Id], confirmed: &[bool], delivered: &[Id], ordering: Ordering) {
    let (p, d) = journals(produced, confirmed, delivered);
    let r = check_correctness(&p, &d, &qos(ordering)).unwrap();
    let got = (r.count(ViolationKind::Loss), r.count(ViolationKind::Duplication), r.count(ViolationKind::Disorder));
    let want = oracle(produced, confirmed, delivered, ordering);
    assert_eq!(got, want, "produced {produced:?} confirmed {confirmed:?} delivered {delivered:?} {ordering:?}");
    assert_eq!((r.no_loss, r.no_duplication, r.no_disorder), (want.0 == 0, want.1 == 0, want.2 == 0));
}

#[test]
fn correctness_matches_definitions_exhaustively() {
    let orders: [[Id; 3]; 3] = [
        [("a", 0), ("a", 1), ("b", 0)],
        [("b", 0), ("a", 0), ("a", 1)],
        [("a", 1), ("b", 0), ("a", 0)],
    ];
    let mut cases = 0;
    for produced in &orders {
        for mask in 0..8u8 {
            let confirmed: Vec<bool> = (0..3).map(|i| mask >> i & 1 == 1).collect();
            for len in 0..=4u32 {
                for code in 0..3usize.pow(len) {
                    let delivered: Vec<Id> =
                        (0..len).map(|k| produced[code / 3usize.pow(k) % 3]).collect();
                    for ordering in [Ordering::None, Ordering::PerPartition, Ordering::GlobalSingleLane] {
                        assert_agrees(produced, &confirmed, &delivered, ordering);
                        cases += 1;
                    }
                }
            }
        }
    }
    assert_eq!(cases, 3 * 8 * 121 * 3);
}

fn arb_run() -> impl Strategy<Value = (Vec<Id>, Vec<bool>, Vec<Id>)> {
    let pool: Vec<Id> = vec![("a", 0), ("a", 1), ("a", 2), ("b", 0), ("b", 1), ("c", 0)];
    (Just(pool).prop_shuffle(), prop::collection::vec(any::<bool>(), 6), prop::collection::vec(0usize..6, 0..12))
        .prop_map(|(produced, confirmed, picks)| {
            let delivered = picks.iter().map(|&i| produced[i]).collect();
            (produced, confirmed, delivered)
        })
}

proptest! {
    #[test]
    fn correctness_matches_definitions((produced, confirmed, delivered) in arb_run()) {
        for ordering in [Ordering::None, Ordering::PerChannel, Ordering::GlobalSingleLane] {
            assert_agrees(&produced, &confirmed, &delivered, ordering);
        }
    }

    /// Delivering every confirmed message once, in production order, is clean.
    #[test]
    fn in_order_exactly_once_is_clean((produced, confirmed, _) in arb_run()) {
        let (p, d) = journals(&produced, &confirmed, &produced);
        let r = check_correctness(&p, &d, &qos(Ordering::GlobalSingleLane)).unwrap();
        prop_assert!(r.is_clean());
    }
}

proptest! {
    #[test]
    fn rabbit_prediction_monotone(p in 1u32..64, s in 1u64..100_000, dp in 1u32..8, ds in 1u64..10_000) {
        for m in [presets::RABBIT_NO_REPLICATION, presets::RABBIT_REPLICATED_QUEUE] {
            let base = predict_rabbit(p, s, &m);
            prop_assert!(predict_rabbit(p + dp, s, &m) > base);
            prop_assert!(predict_rabbit(p, s + ds, &m) < base);
            let scaled = predict_rabbit(2 * p, s, &m);
            prop_assert!((scaled - 2.0 * base).abs() <= 1e-9 * scaled);
        }
    }

    #[test]
    fn kafka_prediction_monotone(
        p in 1u32..16, n in 1u32..32, t in 1u32..16, s in 1u64..1_000_000, d in 1u32..4,
    ) {
        for m in [presets::KAFKA_ACKS0, presets::KAFKA_ACKS1, presets::KAFKA_ACKS_ALL_REP2] {
            let base = predict_kafka(p, n, t, s, &m);
            prop_assert!(predict_kafka(p + d, n, t, s, &m) > base);
            prop_assert!(predict_kafka(p, n + d, t, s, &m) > base);
            prop_assert!(predict_kafka(p, n, t + d, s, &m) < base);
            prop_assert!(predict_kafka(p, n, t, s * 4, &m) < base);
        }
    }

    /// Noise-free samples generated from known constants are fitted back.
    #[test]
    fn fit_recovers_generating_constants(
        r in 1e-6f64..1e-3, t in 1e-8f64..1e-5, b in 1e-8f64..1e-5,
    ) {
        let truth = Constants::Kafka(duolog_core::model::KafkaThroughputModel { u_routing: r, u_topics: t, u_byte: b });
        let mut samples = Vec::new();
        for (p, n, topics, s) in [(1, 1, 1, 100), (2, 4, 1, 1000), (1, 2, 8, 10_000), (4, 1, 4, 100_000), (3, 8, 2, 500)] {
            let mut smp = Sample::kafka(p, n, topics, s, 1.0);
            smp.measured_pps = truth.predict(&smp);
            samples.push(smp);
        }
        let got = fit(&samples, ModelForm::Kafka).unwrap();
        prop_assert!(got.mean_relative_error < 1e-3, "{got:?}");
        for s in &samples {
            let rel = (got.constants.predict(s) - s.measured_pps).abs() / s.measured_pps;
            prop_assert!(rel < 1e-2);
        }
    }
}

#[test]
fn rabbit_fit_recovers_preset() {
    let m = presets::RABBIT_NO_REPLICATION;
    let samples: Vec<Sample> = [(1, 100), (2, 1000), (4, 10_000), (1, 50_000)]
        .iter()
        .map(|&(p, s)| Sample::rabbit(p, s, predict_rabbit(p, s, &m)))
        .collect();
    let got = fit(&samples, ModelForm::Rabbit).unwrap();
    let Constants::Rabbit(c) = got.constants else { panic!("form changed") };
    assert!((c.u_routing / m.u_routing - 1.0).abs() < 1e-3, "{c:?}");
    assert!((c.u_byte / m.u_byte - 1.0).abs() < 1e-3, "{c:?}");
}

#[test]
fn expanded_table_recommends_identically() {
    let table = DeterminationTable::standard();
    let expanded = table.expanded();
    assert!(expanded.rows.iter().all(|r| !r.cells.contains(&Cell::Any) && r.throughput != ThroughputCell::Any));
    for fv in FeatureVector::all() {
        let a: BTreeSet<String> = table.recommend(&fv).into_iter().collect();
        let b: BTreeSet<String> = expanded.recommend(&fv).into_iter().collect();
        assert_eq!(a, b, "{fv}");
    }
    // Each row expands to two rows per wildcard.
    let wild: usize = table.rows.iter().map(|r| 1 << r.cells.iter().filter(|c| **c == Cell::Any).count()).sum();
    assert_eq!(expanded.rows.len(), wild);
    // Concrete rows match exactly one vector each.
    for r in &expanded.rows {
        assert_eq!(FeatureVector::all().iter().filter(|fv| r.matches(fv)).count(), 1, "{r}");
    }
}

proptest! {
    #[test]
    fn nearest_rank_matches_counting(mut xs in prop::collection::vec(0u64..1000, 1..200), p in 0.001f64..1.0) {
        xs.sort_unstable();
        let v = nearest_rank(&xs, p);
        // The smallest value with at least p * n samples at or below it.
        let need = (p * xs.len() as f64).ceil().max(1.0) as usize;
        let want = *xs.iter().find(|x| xs.iter().filter(|y| y <= x).count() >= need).unwrap();
        prop_assert_eq!(v, want);
    }

    #[test]
    fn summary_is_ordered(xs in prop::collection::vec(0u64..10_000_000, 1..300)) {
        let s = LatencySummary::from_ns(&xs).unwrap();
        prop_assert!(s.p50_ms <= s.p999_ms && s.p999_ms <= s.max_ms);
        prop_assert!(s.mean_ms <= s.max_ms);
        prop_assert_eq!(s.sample_count, xs.len());
    }

    /// Samples produced before the warmup boundary never count, and merging
    /// collectors cannot lower the maximum or sample count.
    #[test]
    fn warmup_exclusion_and_merge(
        a in prop::collection::vec((0u64..2000, 0u64..500), 0..50),
        b in prop::collection::vec((0u64..2000, 0u64..500), 0..50),
        warm in 0u64..2000,
    ) {
        let fill = |v: &[(u64, u64)]| {
            let mut c = LatencyCollector::new(warm);
            for (p, l) in v {
                c.record(*p, p + l);
            }
            c
        };
        let (ca, cb) = (fill(&a), fill(&b));
        let kept = |v: &[(u64, u64)]| v.iter().filter(|(p, _)| *p >= warm).map(|(_, l)| *l).collect::<Vec<_>>();
        prop_assert_eq!(ca.samples().to_vec(), kept(&a));
        let mut merged = ca.clone();
        merged.merge(cb.clone());
        prop_assert_eq!(merged.samples().len(), ca.samples().len() + cb.samples().len());
        if let (Ok(m), Ok(x)) = (merged.summary(), ca.summary()) {
            prop_assert!(m.max_ms >= x.max_ms);
        }
    }
}

#[test]
fn run_counts_bytes_and_excludes_warmup() {
    for engine in [EngineKind::Log, EngineKind::Exch] {
        let spec = WorkloadSpec {
            engine,
            record_size_bytes: 256,
            duration_s: 0.15,
            warmup_s: 0.05,
            rate_pps: Some(2000.0),
            ..WorkloadSpec::default()
        };
        let r = run_once(&spec).unwrap();
        assert!(r.delivered_in_window > 0, "{engine:?}: {r:?}");
        assert!((r.bps() - r.pps() * 256.0).abs() < 1e-6 * r.bps(), "{engine:?}");
        assert!(r.produced_in_window < r.produced, "{engine:?}: warmup output must be excluded");
        assert!(r.delivered_in_window <= r.delivered);
        let lat = r.latency.as_ref().unwrap();
        assert!(lat.sample_count as u64 <= r.delivered);
    }
}
