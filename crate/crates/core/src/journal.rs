//! Produced / consumed event journals and their JSON Lines form.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Produced,
    Confirmed,
    Delivered,
    Acked,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub flow: String,
    pub seq: u64,
    pub event: EventKind,
    pub at_ns: u64,
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("timestamp for flow {flow} went backwards ({at_ns} < {last_ns})")]
    TimeRegression { flow: String, at_ns: u64, last_ns: u64 },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Append-only event log; timestamps are non-decreasing per flow.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Journal {
    entries: Vec<JournalEntry>,
    last_at: HashMap<String, u64>,
}

impl Journal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, flow: &str, seq: u64, event: EventKind, at_ns: u64) -> Result<(), JournalError> {
        if let Some(&last) = self.last_at.get(flow) {
            if at_ns < last {
                return Err(JournalError::TimeRegression { flow: flow.to_string(), at_ns, last_ns: last });
            }
        }
        self.last_at.insert(flow.to_string(), at_ns);
        self.entries.push(JournalEntry { flow: flow.to_string(), seq, event, at_ns });
        Ok(())
    }

    pub fn entries(&self) -> &[JournalEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &JournalEntry> {
        self.entries.iter()
    }

    pub fn count(&self, event: EventKind) -> usize {
        self.entries.iter().filter(|e| e.event == event).count()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = JournalEntry>) -> Result<Self, JournalError> {
        let mut j = Journal::new();
        for e in entries {
            j.push(&e.flow, e.seq, e.event, e.at_ns)?;
        }
        Ok(j)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, JournalError> {
        let mut j = Journal::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: JournalEntry =
                serde_json::from_str(&line).map_err(|source| JournalError::Parse { line: i + 1, source })?;
            j.push(&e.flow, e.seq, e.event, e.at_ns)?;
        }
        Ok(j)
    }
}

/// Thread-safe append-only sink. Timestamps are taken under the lock so the
/// per-flow monotonicity invariant holds for concurrent appenders.
#[derive(Debug, Default)]
pub struct JournalSink {
    inner: Mutex<Journal>,
}

impl JournalSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, clock: &dyn Clock, flow: &str, seq: u64, event: EventKind) -> u64 {
        let mut j = self.inner.lock().unwrap();
        let at = clock.now_ns().max(j.last_at.get(flow).copied().unwrap_or(0));
        j.push(flow, seq, event, at).expect("timestamp clamped to be monotonic");
        at
    }

    pub fn snapshot(&self) -> Journal {
        self.inner.lock().unwrap().clone()
    }

    pub fn into_journal(self) -> Journal {
        self.inner.into_inner().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_line_format() {
        let mut j = Journal::new();
        j.push("p0", 3, EventKind::Delivered, 17).unwrap();
        assert_eq!(j.to_jsonl(), "{\"flow\":\"p0\",\"seq\":3,\"event\":\"delivered\",\"at_ns\":17}\n");
    }

    #[test]
    fn rejects_time_regression() {
        let mut j = Journal::new();
        j.push("a", 0, EventKind::Produced, 10).unwrap();
        j.push("b", 0, EventKind::Produced, 5).unwrap();
        assert!(matches!(j.push("a", 1, EventKind::Produced, 9), Err(JournalError::TimeRegression { .. })));
    }

    #[test]
    fn jsonl_round_trip() {
        let mut j = Journal::new();
        for s in 0..5 {
            j.push("f", s, EventKind::Produced, s * 10).unwrap();
            j.push("f", s, EventKind::Confirmed, s * 10 + 1).unwrap();
        }
        let back = Journal::read_jsonl(j.to_jsonl().as_bytes()).unwrap();
        assert_eq!(back, j);
    }

    #[test]
    fn bad_line_reports_position() {
        let input = "{\"flow\":\"a\",\"seq\":0,\"event\":\"produced\",\"at_ns\":0}\nnot json\n";
        match Journal::read_jsonl(input.as_bytes()) {
            Err(JournalError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
