use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use duolog_bench::{fanout, log_topic, messages, VHOST};
use duolog_core::LogAckMode;

const BATCH: usize = 100;

fn log_append(c: &mut Criterion) {
    let mut g = c.benchmark_group("log_append_batch");
    for size in [100usize, 1000, 10_000] {
        let broker = log_topic(1, 1);
        let batch = messages(BATCH, size);
        g.throughput(Throughput::Elements(BATCH as u64));
        g.bench_with_input(BenchmarkId::from_parameter(size), &batch, |b, batch| {
            b.iter(|| {
                broker.append_batch("t", 0, batch, LogAckMode::Acks1).unwrap();
                broker.purge("t").unwrap();
            })
        });
    }
    g.finish();
}

fn log_replicated_append(c: &mut Criterion) {
    let mut g = c.benchmark_group("log_append_quorum");
    for rf in [1u32, 2, 3] {
        let broker = log_topic(1, rf);
        let batch = messages(BATCH, 1000);
        g.throughput(Throughput::Elements(BATCH as u64));
        g.bench_with_input(BenchmarkId::from_parameter(rf), &batch, |b, batch| {
            b.iter(|| {
                broker.append_batch("t", 0, batch, LogAckMode::AcksQuorum).unwrap();
                broker.purge("t").unwrap();
            })
        });
    }
    g.finish();
}

fn log_fetch(c: &mut Criterion) {
    let broker = log_topic(1, 1);
    for _ in 0..10 {
        broker.append_batch("t", 0, &messages(BATCH, 1000), LogAckMode::Acks1).unwrap();
    }
    let mut g = c.benchmark_group("log_fetch");
    g.throughput(Throughput::Bytes(64 * 1024));
    g.bench_function("64KiB", |b| b.iter(|| broker.fetch("t", 0, 0, 64 * 1024).unwrap()));
    g.finish();
}

fn exch_fanout_publish(c: &mut Criterion) {
    let mut g = c.benchmark_group("exch_fanout_publish");
    for queues in [1usize, 4, 16] {
        let broker = fanout(queues);
        let mut ch = broker.open_channel();
        let msg = messages(1, 1000).pop().unwrap();
        g.throughput(Throughput::Elements(1));
        g.bench_with_input(BenchmarkId::from_parameter(queues), &msg, |b, msg| {
            b.iter(|| ch.publish(VHOST, "fx", msg.clone(), false).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, log_append, log_replicated_append, log_fetch, exch_fanout_publish);
criterion_main!(benches);
