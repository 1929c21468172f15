use serde::{Deserialize, Serialize};

use super::BenchError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_ms: f64,
    pub max_ms: f64,
    pub p50_ms: f64,
    pub p999_ms: f64,
    pub sample_count: usize,
}

/// Nearest-rank percentile: the `ceil(p * n)`-th smallest sample.
/// `sorted` must be ascending and non-empty.
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

const NS_PER_MS: f64 = 1e6;

impl LatencySummary {
    /// Summarise latencies given in nanoseconds.
    pub fn from_ns(samples: &[u64]) -> Result<Self, BenchError> {
        if samples.is_empty() {
            return Err(BenchError::NoSamples);
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let sum: u128 = sorted.iter().map(|&v| u128::from(v)).sum();
        Ok(LatencySummary {
            mean_ms: sum as f64 / sorted.len() as f64 / NS_PER_MS,
            max_ms: *sorted.last().unwrap() as f64 / NS_PER_MS,
            p50_ms: nearest_rank(&sorted, 0.5) as f64 / NS_PER_MS,
            p999_ms: nearest_rank(&sorted, 0.999) as f64 / NS_PER_MS,
            sample_count: sorted.len(),
        })
    }
}

/// Per-worker latency samples. A message counts only if it was produced at
/// or after the end of warmup.
#[derive(Clone, Debug, Default)]
pub struct LatencyCollector {
    warmup_end_ns: u64,
    samples: Vec<u64>,
}

impl LatencyCollector {
    pub fn new(warmup_end_ns: u64) -> Self {
        LatencyCollector { warmup_end_ns, samples: Vec::new() }
    }

    pub fn record(&mut self, produced_at_ns: u64, delivered_at_ns: u64) {
        if produced_at_ns >= self.warmup_end_ns {
            self.samples.push(delivered_at_ns.saturating_sub(produced_at_ns));
        }
    }

    pub fn merge(&mut self, other: LatencyCollector) {
        self.samples.extend(other.samples);
    }

    pub fn samples(&self) -> &[u64] {
        &self.samples
    }

    pub fn summary(&self) -> Result<LatencySummary, BenchError> {
        LatencySummary::from_ns(&self.samples)
    }
}
