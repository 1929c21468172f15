//! Analytic throughput models and constant fitting.
//!
//! Exchange engine: `pps = producers / (u_routing + size * u_byte)`.
//!
//! Log engine: `pps = producers * partitions /
//! (u_routing + topics * u_topics + effective_size^0.5 * u_byte)`.
//!
//! Constants are in seconds, so the denominator is the time one producer
//! spends per packet.
//!
//! # Fitting
//!
//! Both forms are `pps = m / (c . x)` for a multiplicity `m` and feature
//! vector `x` that depend only on the inputs. [`fit`] minimises the mean
//! relative error `|pred - meas| / meas` in two deterministic steps:
//!
//! 1. Linear least squares on `(c . x_i) * meas_i / m_i = 1`, which is the
//!    relative error of the reciprocal and is exact for noise-free data.
//!    Solved by SVD.
//! 2. Coordinate descent on `ln c`: each constant in turn is multiplied by
//!    `exp(+-step)` while that lowers the objective; the step halves when no
//!    constant improves, down to `1e-9`.

use std::collections::BTreeSet;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RabbitThroughputModel {
    pub u_routing: f64,
    pub u_byte: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KafkaThroughputModel {
    pub u_routing: f64,
    pub u_topics: f64,
    pub u_byte: f64,
}

/// Built-in constant sets.
pub mod presets {
    use super::{KafkaThroughputModel, RabbitThroughputModel};

    pub const RABBIT_NO_REPLICATION: RabbitThroughputModel =
        RabbitThroughputModel { u_routing: 3.24e-5, u_byte: 7.64e-9 };
    pub const RABBIT_REPLICATED_QUEUE: RabbitThroughputModel =
        RabbitThroughputModel { u_routing: 6.52e-5, u_byte: 8.13e-9 };
    pub const KAFKA_ACKS0: KafkaThroughputModel =
        KafkaThroughputModel { u_routing: 3.8e-4, u_topics: 2.1e-7, u_byte: 4.9e-6 };
    pub const KAFKA_ACKS1: KafkaThroughputModel =
        KafkaThroughputModel { u_routing: 3.9e-4, u_topics: 9.1e-8, u_byte: 1.1e-6 };
    pub const KAFKA_ACKS_ALL_REP2: KafkaThroughputModel =
        KafkaThroughputModel { u_routing: 9.4e-4, u_topics: 7.3e-5, u_byte: 2.9e-5 };

    pub fn rabbit(name: &str) -> Option<RabbitThroughputModel> {
        match name {
            "no-replication" => Some(RABBIT_NO_REPLICATION),
            "replicated-queue" => Some(RABBIT_REPLICATED_QUEUE),
            _ => None,
        }
    }

    pub fn kafka(name: &str) -> Option<KafkaThroughputModel> {
        match name {
            "acks0" => Some(KAFKA_ACKS0),
            "acks1" => Some(KAFKA_ACKS1),
            "acks-all-rep2" => Some(KAFKA_ACKS_ALL_REP2),
            _ => None,
        }
    }
}

pub fn predict_rabbit(producers: u32, size_bytes: u64, m: &RabbitThroughputModel) -> f64 {
    f64::from(producers) / (m.u_routing + size_bytes as f64 * m.u_byte)
}

pub fn predict_kafka(producers: u32, partitions: u32, topics: u32, effective_size: u64, m: &KafkaThroughputModel) -> f64 {
    f64::from(producers) * f64::from(partitions)
        / (m.u_routing + f64::from(topics) * m.u_topics + (effective_size as f64).sqrt() * m.u_byte)
}

/// The size term of the log-engine model.
pub fn effective_size(batch_bytes: u64, record_bytes: u64) -> u64 {
    batch_bytes.max(record_bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelForm {
    Rabbit,
    Kafka,
}

impl ModelForm {
    pub fn constant_count(self) -> usize {
        match self {
            ModelForm::Rabbit => 2,
            ModelForm::Kafka => 3,
        }
    }
}

impl std::str::FromStr for ModelForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rabbit" => Ok(ModelForm::Rabbit),
            "kafka" => Ok(ModelForm::Kafka),
            other => Err(format!("unknown model form {other:?} (expected rabbit or kafka)")),
        }
    }
}

/// One measurement. Fields a form does not use are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub producers: u32,
    pub size_bytes: u64,
    #[serde(default = "one")]
    pub partitions: u32,
    #[serde(default = "one")]
    pub topics: u32,
    #[serde(default)]
    pub batch_bytes: u64,
    pub measured_pps: f64,
}

fn one() -> u32 {
    1
}

impl Sample {
    pub fn rabbit(producers: u32, size_bytes: u64, measured_pps: f64) -> Self {
        Sample { producers, size_bytes, partitions: 1, topics: 1, batch_bytes: 0, measured_pps }
    }

    pub fn kafka(producers: u32, partitions: u32, topics: u32, effective_size: u64, measured_pps: f64) -> Self {
        Sample { producers, size_bytes: effective_size, partitions, topics, batch_bytes: 0, measured_pps }
    }

    fn multiplicity(&self, form: ModelForm) -> f64 {
        match form {
            ModelForm::Rabbit => f64::from(self.producers),
            ModelForm::Kafka => f64::from(self.producers) * f64::from(self.partitions),
        }
    }

    fn features(&self, form: ModelForm) -> Vec<f64> {
        match form {
            ModelForm::Rabbit => vec![1.0, self.size_bytes as f64],
            ModelForm::Kafka => {
                let eff = effective_size(self.batch_bytes, self.size_bytes) as f64;
                vec![1.0, f64::from(self.topics), eff.sqrt()]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Constants {
    Rabbit(RabbitThroughputModel),
    Kafka(KafkaThroughputModel),
}

impl Constants {
    fn from_vec(form: ModelForm, c: &[f64]) -> Self {
        match form {
            ModelForm::Rabbit => Constants::Rabbit(RabbitThroughputModel { u_routing: c[0], u_byte: c[1] }),
            ModelForm::Kafka => Constants::Kafka(KafkaThroughputModel { u_routing: c[0], u_topics: c[1], u_byte: c[2] }),
        }
    }

    pub fn form(&self) -> ModelForm {
        match self {
            Constants::Rabbit(_) => ModelForm::Rabbit,
            Constants::Kafka(_) => ModelForm::Kafka,
        }
    }

    pub fn predict(&self, s: &Sample) -> f64 {
        match self {
            Constants::Rabbit(m) => predict_rabbit(s.producers, s.size_bytes, m),
            Constants::Kafka(m) => {
                predict_kafka(s.producers, s.partitions, s.topics, effective_size(s.batch_bytes, s.size_bytes), m)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub constants: Constants,
    pub mean_relative_error: f64,
    pub samples_used: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} samples with distinct inputs spanning every constant, got {got}")]
    Underdetermined { needed: usize, got: usize },
    #[error("sample {index} has non-positive measurement {value}")]
    NonPositiveMeasurement { index: usize, value: f64 },
    #[error("sample {index} has a zero producer or partition count")]
    ZeroMultiplicity { index: usize },
    #[error("reading samples: {0}")]
    Read(String),
}

fn mean_relative_error(form: ModelForm, c: &[f64], samples: &[Sample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let denom: f64 = s.features(form).iter().zip(c).map(|(x, c)| x * c).sum();
            let pred = s.multiplicity(form) / denom;
            ((pred - s.measured_pps) / s.measured_pps).abs()
        })
        .sum();
    total / samples.len() as f64
}

pub fn fit(samples: &[Sample], form: ModelForm) -> Result<FitResult, FitError> {
    let k = form.constant_count();
    for (index, s) in samples.iter().enumerate() {
        if !(s.measured_pps > 0.0) || !s.measured_pps.is_finite() {
            return Err(FitError::NonPositiveMeasurement { index, value: s.measured_pps });
        }
        if s.multiplicity(form) == 0.0 {
            return Err(FitError::ZeroMultiplicity { index });
        }
    }
    let distinct: BTreeSet<Vec<u64>> =
        samples.iter().map(|s| s.features(form).iter().map(|x| x.to_bits()).collect()).collect();
    if distinct.len() < k {
        return Err(FitError::Underdetermined { needed: k, got: distinct.len() });
    }

    let rows = samples.len();
    let a = DMatrix::from_fn(rows, k, |i, j| {
        let s = &samples[i];
        s.features(form)[j] * s.measured_pps / s.multiplicity(form)
    });
    // Column scaling keeps the SVD well conditioned when features differ by
    // orders of magnitude.
    let scale: Vec<f64> = (0..k).map(|j| a.column(j).norm().max(f64::MIN_POSITIVE)).collect();
    let a_scaled = DMatrix::from_fn(rows, k, |i, j| a[(i, j)] / scale[j]);
    let svd = a_scaled.svd(true, true);
    let rank = svd.rank(1e-12 * svd.singular_values.max());
    if rank < k {
        return Err(FitError::Underdetermined { needed: k, got: rank });
    }
    let b = DVector::from_element(rows, 1.0);
    let y = svd.solve(&b, 1e-15).map_err(|e| FitError::Read(e.to_string()))?;
    let mut c: Vec<f64> = (0..k).map(|j| y[j] / scale[j]).collect();

    // Every constant must stay positive for the log-space search.
    let floor = c.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() { floor * 1e-6 } else { 1e-12 };
    for v in &mut c {
        if !(*v > 0.0) {
            *v = floor;
        }
    }

    let mut best = mean_relative_error(form, &c, samples);
    let mut step = 0.5f64;
    let mut iterations = 0;
    while step > 1e-9 && iterations < 20_000 {
        iterations += 1;
        let mut improved = false;
        for j in 0..k {
            for dir in [1.0, -1.0] {
                let mut trial = c.clone();
                trial[j] *= (dir * step).exp();
                let err = mean_relative_error(form, &trial, samples);
                if err < best {
                    best = err;
                    c = trial;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }

    Ok(FitResult { constants: Constants::from_vec(form, &c), mean_relative_error: best, samples_used: samples.len() })
}

/// Read samples from a results CSV. Uses the `pps` column and whichever of
/// `producers`, `record_size`, `partitions`, `topics`, `batch_bytes` exist;
/// missing counts default to 1 and missing sizes to 0.
pub fn samples_from_csv<R: Read>(reader: R) -> Result<Vec<Sample>, FitError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| FitError::Read(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let pps = col("pps").ok_or_else(|| FitError::Read("missing pps column".into()))?;
    let (producers, size, partitions, topics, batch) =
        (col("producers"), col("record_size"), col("partitions"), col("topics"), col("batch_bytes"));
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| FitError::Read(e.to_string()))?;
        let num = |idx: Option<usize>, default: f64| -> Result<f64, FitError> {
            match idx.and_then(|i| rec.get(i)) {
                None | Some("") => Ok(default),
                Some(v) => v.parse::<f64>().map_err(|_| FitError::Read(format!("row {}: bad number {v:?}", line + 1))),
            }
        };
        out.push(Sample {
            producers: num(producers, 1.0)? as u32,
            size_bytes: num(size, 0.0)? as u64,
            partitions: num(partitions, 1.0)? as u32,
            topics: num(topics, 1.0)? as u32,
            batch_bytes: num(batch, 0.0)? as u64,
            measured_pps: num(Some(pps), f64::NAN)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        ((a - b) / b).abs() <= rel
    }

    #[test]
    fn rabbit_examples() {
        let one = predict_rabbit(1, 100, &RABBIT_NO_REPLICATION);
        assert!(close(one, 30_153.2, 1e-4), "{one}");
        assert_eq!(predict_rabbit(2, 100, &RABBIT_NO_REPLICATION), 2.0 * one);
        assert!(close(predict_rabbit(1, 100, &RABBIT_REPLICATED_QUEUE), 15_148.0, 1e-3));
    }

    #[test]
    fn kafka_examples() {
        assert!(close(predict_kafka(5, 10, 5, 4000, &KAFKA_ACKS0), 72_364.0, 1e-4));
        assert!(close(predict_kafka(1, 1, 1, 1, &KAFKA_ACKS0), 2_596.6, 1e-4));
        assert_eq!(predict_kafka(5, 20, 5, 4000, &KAFKA_ACKS0), 2.0 * predict_kafka(5, 10, 5, 4000, &KAFKA_ACKS0));
    }

    #[test]
    fn effective_size_is_max() {
        assert_eq!(effective_size(100, 4000), 4000);
        assert_eq!(effective_size(0, 7), 7);
        assert_eq!(effective_size(9, 9), 9);
    }

    #[test]
    fn single_sample_is_underdetermined() {
        let s = [Sample::kafka(1, 1, 1, 100, 1000.0)];
        assert!(matches!(fit(&s, ModelForm::Kafka), Err(FitError::Underdetermined { .. })));
    }

    #[test]
    fn repeated_inputs_are_underdetermined() {
        let s = [Sample::rabbit(1, 100, 1000.0), Sample::rabbit(2, 100, 2000.0)];
        assert!(matches!(fit(&s, ModelForm::Rabbit), Err(FitError::Underdetermined { .. })));
    }

    #[test]
    fn rejects_non_positive() {
        let s = [Sample::rabbit(1, 100, 1000.0), Sample::rabbit(1, 200, 0.0)];
        assert_eq!(fit(&s, ModelForm::Rabbit), Err(FitError::NonPositiveMeasurement { index: 1, value: 0.0 }));
    }

    #[test]
    fn csv_columns_by_name() {
        let data = "engine,pps,producers,record_size\nexch,1000,1,100\nexch,500,1,1000\n";
        let s = samples_from_csv(data.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].size_bytes, 1000);
        assert_eq!(s[1].partitions, 1);
    }
}
