use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BenchError, ThroughputSample};
use crate::fsutil::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

/// Output columns, in order. The first ten are fixed; the rest describe the
/// configuration of each run so the file can be fed back to model fitting.
pub const COLUMNS: [&str; 17] = [
    "engine",
    "sweep_param",
    "sweep_value",
    "pps",
    "bps",
    "mean_ms",
    "p50_ms",
    "p999_ms",
    "max_ms",
    "seed",
    "producers",
    "consumers",
    "record_size",
    "partitions",
    "topics",
    "replication_factor",
    "batch_bytes",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn row(s: &ThroughputSample) -> Vec<String> {
    let l = s.latency;
    let c = &s.config;
    vec![
        s.engine.as_str().to_string(),
        s.sweep_param.clone(),
        s.sweep_value.clone(),
        s.pps.to_string(),
        s.bps.to_string(),
        opt(l.map(|l| l.mean_ms)),
        opt(l.map(|l| l.p50_ms)),
        opt(l.map(|l| l.p999_ms)),
        opt(l.map(|l| l.max_ms)),
        s.seed.to_string(),
        c.producers.to_string(),
        c.consumers.to_string(),
        c.record_size.to_string(),
        c.partitions.to_string(),
        c.topics.to_string(),
        c.replication_factor.to_string(),
        c.batch_bytes.to_string(),
    ]
}

pub fn render(results: &[ThroughputSample], format: ExportFormat) -> Result<Vec<u8>, BenchError> {
    if results.is_empty() {
        return Err(BenchError::EmptyResults);
    }
    match format {
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(COLUMNS).map_err(|e| BenchError::Io(e.to_string()))?;
            for s in results {
                w.write_record(row(s)).map_err(|e| BenchError::Io(e.to_string()))?;
            }
            w.into_inner().map_err(|e| BenchError::Io(e.to_string()))
        }
        ExportFormat::Jsonl => {
            let mut out = Vec::new();
            for s in results {
                let mut obj = serde_json::Map::new();
                for (k, v) in COLUMNS.iter().zip(row(s)) {
                    let value = match v.parse::<f64>() {
                        Ok(n) if *k != "sweep_value" && *k != "engine" && *k != "sweep_param" => {
                            serde_json::Number::from_f64(n).map(serde_json::Value::Number).unwrap_or(serde_json::Value::Null)
                        }
                        _ if v.is_empty() => serde_json::Value::Null,
                        _ => serde_json::Value::String(v),
                    };
                    obj.insert(k.to_string(), value);
                }
                serde_json::to_writer(&mut out, &obj).map_err(|e| BenchError::Io(e.to_string()))?;
                out.push(b'\n');
            }
            Ok(out)
        }
    }
}

/// Write results atomically. Nothing is created when `results` is empty.
pub fn export(results: &[ThroughputSample], path: &Path, format: ExportFormat) -> Result<(), BenchError> {
    let bytes = render(results, format)?;
    write_atomic(path, &bytes).map_err(|e| BenchError::Io(e.to_string()))
}
