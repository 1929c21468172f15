use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

fn default_vhost() -> String {
    "/".to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeKind {
    Direct,
    Fanout,
    Topic,
    Headers,
    ConsistentHash,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    #[serde(default = "default_vhost")]
    pub vhost: String,
    pub name: String,
    pub kind: ExchangeKind,
    #[serde(default)]
    pub alternate: Option<String>,
}

impl Exchange {
    pub fn new(name: impl Into<String>, kind: ExchangeKind) -> Self {
        Exchange { vhost: default_vhost(), name: name.into(), kind, alternate: None }
    }

    pub fn in_vhost(mut self, vhost: impl Into<String>) -> Self {
        self.vhost = vhost.into();
        self
    }

    pub fn with_alternate(mut self, alt: impl Into<String>) -> Self {
        self.alternate = Some(alt.into());
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    All,
    Any,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    #[serde(default = "default_vhost")]
    pub vhost: String,
    pub exchange: String,
    pub queue: String,
    /// Topic exchanges.
    #[serde(default)]
    pub pattern: Option<String>,
    /// Direct exchanges.
    #[serde(default)]
    pub key: Option<String>,
    /// Headers exchanges.
    #[serde(default)]
    pub header_match: BTreeMap<String, String>,
    #[serde(default)]
    pub match_mode: MatchMode,
    /// Consistent-hash exchanges.
    #[serde(default)]
    pub weight: Option<u32>,
}

impl Binding {
    pub fn new(exchange: impl Into<String>, queue: impl Into<String>) -> Self {
        Binding {
            vhost: default_vhost(),
            exchange: exchange.into(),
            queue: queue.into(),
            pattern: None,
            key: None,
            header_match: BTreeMap::new(),
            match_mode: MatchMode::All,
            weight: None,
        }
    }

    pub fn in_vhost(mut self, vhost: impl Into<String>) -> Self {
        self.vhost = vhost.into();
        self
    }

    pub fn key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }

    pub fn pattern(mut self, p: impl Into<String>) -> Self {
        self.pattern = Some(p.into());
        self
    }

    pub fn header(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.header_match.insert(k.into(), v.into());
        self
    }

    pub fn mode(mut self, m: MatchMode) -> Self {
        self.match_mode = m;
        self
    }

    pub fn weight(mut self, w: u32) -> Self {
        self.weight = Some(w);
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    #[default]
    DropOldest,
    RejectPublish,
}

/// Declaration of a queue. Runtime state lives in [`super::queue::BoundQueue`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSpec {
    #[serde(default = "default_vhost")]
    pub vhost: String,
    pub name: String,
    #[serde(default)]
    pub max_length: Option<usize>,
    #[serde(default)]
    pub overflow: OverflowPolicy,
    #[serde(default)]
    pub default_ttl_ms: Option<u64>,
    #[serde(default)]
    pub memory_cap_bytes: Option<u64>,
    #[serde(default)]
    pub spill: bool,
    /// Home node.
    #[serde(default)]
    pub node: usize,
    #[serde(default)]
    pub mirrors: Vec<usize>,
    #[serde(default)]
    pub durable: bool,
}

impl QueueSpec {
    pub fn new(name: impl Into<String>) -> Self {
        QueueSpec {
            vhost: default_vhost(),
            name: name.into(),
            max_length: None,
            overflow: OverflowPolicy::DropOldest,
            default_ttl_ms: None,
            memory_cap_bytes: None,
            spill: false,
            node: 0,
            mirrors: Vec::new(),
            durable: false,
        }
    }

    pub fn in_vhost(mut self, vhost: impl Into<String>) -> Self {
        self.vhost = vhost.into();
        self
    }

    pub fn durable(mut self) -> Self {
        self.durable = true;
        self
    }

    pub fn max_length(mut self, n: usize, overflow: OverflowPolicy) -> Self {
        self.max_length = Some(n);
        self.overflow = overflow;
        self
    }

    pub fn ttl_ms(mut self, ttl: u64) -> Self {
        self.default_ttl_ms = Some(ttl);
        self
    }

    pub fn spill_above(mut self, cap: u64) -> Self {
        self.memory_cap_bytes = Some(cap);
        self.spill = true;
        self
    }

    pub fn mirrored_on(mut self, nodes: &[usize]) -> Self {
        self.mirrors = nodes.to_vec();
        self
    }

    pub fn on_node(mut self, node: usize) -> Self {
        self.node = node;
        self
    }
}
