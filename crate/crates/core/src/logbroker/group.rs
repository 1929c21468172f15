use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TopicPartition {
    pub topic: String,
    pub partition: u32,
}

impl TopicPartition {
    pub fn new(topic: impl Into<String>, partition: u32) -> Self {
        TopicPartition { topic: topic.into(), partition }
    }
}

pub type Assignment = BTreeMap<TopicPartition, String>;

#[derive(Clone, Debug, Default)]
pub struct ConsumerGroup {
    pub group_id: String,
    pub members: Vec<String>,
    pub assignment: Assignment,
    pub committed: HashMap<TopicPartition, u64>,
}

/// Sort partitions and members, then deal partitions round-robin.
///
/// Every partition gets exactly one owner; members past the partition count
/// stay idle.
pub fn round_robin_assign(partitions: &[TopicPartition], members: &[String]) -> Assignment {
    let mut parts = partitions.to_vec();
    parts.sort();
    parts.dedup();
    let mut members = members.to_vec();
    members.sort();
    members.dedup();
    if members.is_empty() {
        return Assignment::new();
    }
    parts.into_iter().enumerate().map(|(i, tp)| (tp, members[i % members.len()].clone())).collect()
}
