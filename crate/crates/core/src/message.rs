use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The unit of transfer shared by both engines.
///
/// `seq_no` is dense per `flow_id` at production time. `ttl_ms` is kept
/// signed so that malformed input can be represented and rejected by
/// [`validate_message`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub flow_id: String,
    pub seq_no: u64,
    #[serde(default)]
    pub key: Option<Vec<u8>>,
    #[serde(default)]
    pub routing_key: Option<String>,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(default)]
    pub payload: Vec<u8>,
    #[serde(default)]
    pub produced_at: u64,
    #[serde(default)]
    pub ttl_ms: Option<i64>,
}

impl Message {
    pub fn new(flow_id: impl Into<String>, seq_no: u64, payload: impl Into<Vec<u8>>) -> Self {
        Message {
            flow_id: flow_id.into(),
            seq_no,
            key: None,
            routing_key: None,
            headers: BTreeMap::new(),
            payload: payload.into(),
            produced_at: 0,
            ttl_ms: None,
        }
    }

    pub fn with_key(mut self, key: impl Into<Vec<u8>>) -> Self {
        self.key = Some(key.into());
        self
    }

    pub fn with_routing_key(mut self, rk: impl Into<String>) -> Self {
        self.routing_key = Some(rk.into());
        self
    }

    pub fn with_header(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.headers.insert(k.into(), v.into());
        self
    }

    pub fn with_ttl_ms(mut self, ttl: i64) -> Self {
        self.ttl_ms = Some(ttl);
        self
    }

    pub fn at(mut self, produced_at: u64) -> Self {
        self.produced_at = produced_at;
        self
    }

    /// Bytes accounted against quotas: payload only.
    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("routing_key {0:?} contains an empty segment")]
    EmptyRoutingSegment(String),
    #[error("ttl_ms is negative ({0})")]
    NegativeTtl(i64),
    #[error("flow_id is empty")]
    EmptyFlowId,
}

impl ValidationError {
    pub fn field(&self) -> &'static str {
        match self {
            ValidationError::EmptyRoutingSegment(_) => "routing_key",
            ValidationError::NegativeTtl(_) => "ttl_ms",
            ValidationError::EmptyFlowId => "flow_id",
        }
    }
}

/// Returns true iff `key` is one or more non-empty dot-separated segments.
pub fn is_well_formed_dotted(key: &str) -> bool {
    !key.is_empty() && key.split('.').all(|s| !s.is_empty())
}

pub fn validate_message(msg: &Message) -> Result<(), ValidationError> {
    if msg.flow_id.is_empty() {
        return Err(ValidationError::EmptyFlowId);
    }
    if let Some(rk) = &msg.routing_key {
        if !is_well_formed_dotted(rk) {
            return Err(ValidationError::EmptyRoutingSegment(rk.clone()));
        }
    }
    if let Some(ttl) = msg.ttl_ms {
        if ttl < 0 {
            return Err(ValidationError::NegativeTtl(ttl));
        }
    }
    Ok(())
}
