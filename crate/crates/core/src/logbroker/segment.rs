//! Segment record layout and the in-memory segmented log.
//!
//! Every record is laid out little-endian as
//!
//! ```text
//! u32 payload_len | u32 header_len | u64 offset | u64 produced_at_ns | header block | payload
//! ```
//!
//! The header block carries the remaining message fields:
//!
//! ```text
//! u32 flow_len, flow bytes
//! u64 seq_no
//! u8 has_key      [u32 len, key bytes]
//! u8 has_routing  [u32 len, routing key bytes]
//! u32 header_count, then per header: u32 klen, k, u32 vlen, v
//! u8 has_ttl      [i64 ttl_ms]
//! ```
//!
//! Segment files are a plain concatenation of records named
//! `<base_offset>.seg`. In-memory segments use the same bytes.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::message::Message;

pub const RECORD_PREFIX_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("record truncated at byte {0}")]
    Truncated(usize),
    #[error("invalid utf-8 in {0}")]
    Utf8(&'static str),
    #[error("invalid flag byte {0}")]
    BadFlag(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub offset: u64,
    pub message: Message,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    put_u32(buf, b.len() as u32);
    buf.extend_from_slice(b);
}

fn encode_header_block(msg: &Message, buf: &mut Vec<u8>) {
    put_bytes(buf, msg.flow_id.as_bytes());
    buf.extend_from_slice(&msg.seq_no.to_le_bytes());
    match &msg.key {
        Some(k) => {
            buf.push(1);
            put_bytes(buf, k);
        }
        None => buf.push(0),
    }
    match &msg.routing_key {
        Some(rk) => {
            buf.push(1);
            put_bytes(buf, rk.as_bytes());
        }
        None => buf.push(0),
    }
    put_u32(buf, msg.headers.len() as u32);
    for (k, v) in &msg.headers {
        put_bytes(buf, k.as_bytes());
        put_bytes(buf, v.as_bytes());
    }
    match msg.ttl_ms {
        Some(t) => {
            buf.push(1);
            buf.extend_from_slice(&t.to_le_bytes());
        }
        None => buf.push(0),
    }
}

/// Append the encoded record for `msg` at `offset` to `buf`.
pub fn encode_record(offset: u64, msg: &Message, buf: &mut Vec<u8>) {
    let start = buf.len();
    buf.extend_from_slice(&[0u8; RECORD_PREFIX_LEN]);
    encode_header_block(msg, buf);
    let header_len = (buf.len() - start - RECORD_PREFIX_LEN) as u32;
    buf.extend_from_slice(&msg.payload);
    let prefix = &mut buf[start..start + RECORD_PREFIX_LEN];
    prefix[0..4].copy_from_slice(&(msg.payload.len() as u32).to_le_bytes());
    prefix[4..8].copy_from_slice(&header_len.to_le_bytes());
    prefix[8..16].copy_from_slice(&offset.to_le_bytes());
    prefix[16..24].copy_from_slice(&msg.produced_at.to_le_bytes());
}

pub fn encoded_len(msg: &Message) -> usize {
    let mut n = RECORD_PREFIX_LEN + 4 + msg.flow_id.len() + 8 + 1 + 1 + 4 + 1;
    if let Some(k) = &msg.key {
        n += 4 + k.len();
    }
    if let Some(rk) = &msg.routing_key {
        n += 4 + rk.len();
    }
    for (k, v) in &msg.headers {
        n += 8 + k.len() + v.len();
    }
    if msg.ttl_ms.is_some() {
        n += 8;
    }
    n + msg.payload.len()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self, what: &'static str) -> Result<String, CodecError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| CodecError::Utf8(what))
    }
    fn flag(&mut self) -> Result<bool, CodecError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CodecError::BadFlag(b)),
        }
    }
}

/// Fixed prefix fields: (payload_len, header_len, offset, produced_at).
pub fn read_prefix(buf: &[u8]) -> Result<(u32, u32, u64, u64), CodecError> {
    if buf.len() < RECORD_PREFIX_LEN {
        return Err(CodecError::Truncated(0));
    }
    Ok((
        u32::from_le_bytes(buf[0..4].try_into().unwrap()),
        u32::from_le_bytes(buf[4..8].try_into().unwrap()),
        u64::from_le_bytes(buf[8..16].try_into().unwrap()),
        u64::from_le_bytes(buf[16..24].try_into().unwrap()),
    ))
}

pub fn record_len(buf: &[u8]) -> Result<usize, CodecError> {
    let (p, h, _, _) = read_prefix(buf)?;
    Ok(RECORD_PREFIX_LEN + p as usize + h as usize)
}

/// Decode one record from the front of `buf`, returning it and its length.
pub fn decode_record(buf: &[u8]) -> Result<(Record, usize), CodecError> {
    let (payload_len, header_len, offset, produced_at) = read_prefix(buf)?;
    let total = RECORD_PREFIX_LEN + header_len as usize + payload_len as usize;
    if buf.len() < total {
        return Err(CodecError::Truncated(buf.len()));
    }
    let header = &buf[RECORD_PREFIX_LEN..RECORD_PREFIX_LEN + header_len as usize];
    let mut r = Reader { buf: header, pos: 0 };
    let flow_id = r.string("flow_id")?;
    let seq_no = r.u64()?;
    let key = if r.flag()? { Some(r.bytes()?.to_vec()) } else { None };
    let routing_key = if r.flag()? { Some(r.string("routing_key")?) } else { None };
    let n = r.u32()?;
    let mut headers = BTreeMap::new();
    for _ in 0..n {
        let k = r.string("header name")?;
        let v = r.string("header value")?;
        headers.insert(k, v);
    }
    let ttl_ms = if r.flag()? { Some(r.u64()? as i64) } else { None };
    let payload = buf[RECORD_PREFIX_LEN + header_len as usize..total].to_vec();
    let message = Message { flow_id, seq_no, key, routing_key, headers, payload, produced_at, ttl_ms };
    Ok((Record { offset, message }, total))
}

/// Only the key of an encoded record, without decoding the rest.
pub fn record_key(buf: &[u8]) -> Result<Option<&[u8]>, CodecError> {
    let (_, header_len, _, _) = read_prefix(buf)?;
    let header = buf
        .get(RECORD_PREFIX_LEN..RECORD_PREFIX_LEN + header_len as usize)
        .ok_or(CodecError::Truncated(buf.len()))?;
    let mut r = Reader { buf: header, pos: 0 };
    r.bytes()?;
    r.u64()?;
    if r.flag()? {
        Ok(Some(r.bytes()?))
    } else {
        Ok(None)
    }
}

pub fn decode_all(mut buf: &[u8]) -> Result<Vec<Record>, CodecError> {
    let mut out = Vec::new();
    while !buf.is_empty() {
        let (rec, n) = decode_record(buf)?;
        out.push(rec);
        buf = &buf[n..];
    }
    Ok(out)
}

pub fn segment_file_name(base_offset: u64) -> String {
    format!("{base_offset}.seg")
}

pub fn read_segment_file(path: &Path) -> Result<Vec<Record>, CodecError> {
    decode_all(&fs::read(path)?)
}

/// A contiguous run of records starting at `base_offset`.
///
/// `end_offset` is one past the last offset ever appended here; compaction
/// may remove records but never moves either bound.
#[derive(Clone, Debug)]
pub struct Segment {
    pub base_offset: u64,
    pub end_offset: u64,
    buf: Vec<u8>,
    // (offset, byte position, produced_at)
    index: Vec<(u64, usize, u64)>,
}

impl Segment {
    fn new(base_offset: u64) -> Self {
        Segment { base_offset, end_offset: base_offset, buf: Vec::new(), index: Vec::new() }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn byte_len(&self) -> usize {
        self.buf.len()
    }

    pub fn record_count(&self) -> usize {
        self.index.len()
    }

    pub fn newest_timestamp(&self) -> Option<u64> {
        self.index.iter().map(|e| e.2).max()
    }

    fn record_at(&self, i: usize) -> &[u8] {
        let start = self.index[i].1;
        let end = self.index.get(i + 1).map_or(self.buf.len(), |e| e.1);
        &self.buf[start..end]
    }

    fn push_raw(&mut self, offset: u64, produced_at: u64, rec: &[u8]) {
        self.index.push((offset, self.buf.len(), produced_at));
        self.buf.extend_from_slice(rec);
        self.end_offset = offset + 1;
    }

    fn truncate_from(&mut self, offset: u64) {
        let cut = self.index.partition_point(|e| e.0 < offset);
        if cut < self.index.len() {
            self.buf.truncate(self.index[cut].1);
            self.index.truncate(cut);
        }
        self.end_offset = self.end_offset.min(offset);
    }

    fn retain(&mut self, mut keep: impl FnMut(u64, &[u8]) -> bool) -> usize {
        let mut buf = Vec::with_capacity(self.buf.len());
        let mut index = Vec::with_capacity(self.index.len());
        let mut removed = 0;
        for i in 0..self.index.len() {
            let (off, _, ts) = self.index[i];
            let rec = self.record_at(i);
            if keep(off, rec) {
                index.push((off, buf.len(), ts));
                buf.extend_from_slice(rec);
            } else {
                removed += 1;
            }
        }
        self.buf = buf;
        self.index = index;
        removed
    }
}

/// Offset-indexed sequence of segments for one replica of a partition.
#[derive(Clone, Debug)]
pub struct SegmentedLog {
    segments: VecDeque<Segment>,
    next_offset: u64,
    log_start: u64,
    segment_bytes: usize,
    bytes: usize,
    count: usize,
}

impl SegmentedLog {
    pub fn new(segment_bytes: usize) -> Self {
        SegmentedLog {
            segments: VecDeque::new(),
            next_offset: 0,
            log_start: 0,
            segment_bytes: segment_bytes.max(1),
            bytes: 0,
            count: 0,
        }
    }

    pub fn next_offset(&self) -> u64 {
        self.next_offset
    }

    /// Oldest offset that has not been removed by retention.
    pub fn log_start(&self) -> u64 {
        self.log_start
    }

    pub fn byte_len(&self) -> usize {
        self.bytes
    }

    pub fn record_count(&self) -> usize {
        self.count
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter()
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// Append an already-encoded record carrying `offset`, rolling a new
    /// segment when the tail would exceed `segment_bytes`.
    pub fn append_raw(&mut self, offset: u64, produced_at: u64, rec: &[u8]) {
        debug_assert!(offset >= self.next_offset);
        let roll = match self.segments.back() {
            None => true,
            Some(tail) => tail.record_count() > 0 && tail.byte_len() + rec.len() > self.segment_bytes,
        };
        if roll {
            self.segments.push_back(Segment::new(offset));
        }
        self.segments.back_mut().unwrap().push_raw(offset, produced_at, rec);
        self.next_offset = offset + 1;
        self.bytes += rec.len();
        self.count += 1;
    }

    /// Encoded records with offset >= `from`, stopping once `max_bytes` would
    /// be exceeded (at least one record is returned when any exist) or at `until`.
    pub fn read_raw(&self, from: u64, until: u64, max_bytes: usize) -> Vec<(u64, &[u8])> {
        let mut out = Vec::new();
        let mut total = 0usize;
        let first_seg = self.segments.partition_point(|s| s.end_offset <= from);
        for seg in self.segments.iter().skip(first_seg) {
            let start = seg.index.partition_point(|e| e.0 < from);
            for i in start..seg.index.len() {
                let off = seg.index[i].0;
                if off >= until {
                    return out;
                }
                let rec = seg.record_at(i);
                if !out.is_empty() && total + rec.len() > max_bytes {
                    return out;
                }
                total += rec.len();
                out.push((off, rec));
            }
        }
        out
    }

    pub fn read(&self, from: u64, until: u64, max_bytes: usize) -> Result<Vec<Record>, CodecError> {
        self.read_raw(from, until, max_bytes)
            .into_iter()
            .map(|(_, rec)| decode_record(rec).map(|(r, _)| r))
            .collect()
    }

    /// Copy every record of `source` at or after our `next_offset`.
    pub fn catch_up_from(&mut self, source: &SegmentedLog) -> usize {
        let mut copied = 0;
        if self.count == 0 && self.next_offset < source.log_start {
            self.next_offset = source.log_start;
            self.log_start = source.log_start;
        }
        for (off, rec) in source.read_raw(self.next_offset, u64::MAX, usize::MAX) {
            let (_, _, _, ts) = read_prefix(rec).expect("records in a log are well formed");
            self.append_raw(off, ts, rec);
            copied += 1;
        }
        if source.next_offset > self.next_offset {
            self.next_offset = source.next_offset;
        }
        copied
    }

    /// Drop every record with offset >= `offset`.
    pub fn truncate_to(&mut self, offset: u64) {
        if offset >= self.next_offset {
            return;
        }
        while let Some(tail) = self.segments.back() {
            if tail.base_offset >= offset {
                let s = self.segments.pop_back().unwrap();
                self.bytes -= s.byte_len();
                self.count -= s.record_count();
            } else {
                break;
            }
        }
        if let Some(tail) = self.segments.back_mut() {
            let (b, c) = (tail.byte_len(), tail.record_count());
            tail.truncate_from(offset);
            self.bytes -= b - tail.byte_len();
            self.count -= c - tail.record_count();
        }
        self.next_offset = offset.max(self.log_start);
    }

    pub fn front(&self) -> Option<&Segment> {
        self.segments.front()
    }

    /// Remove the oldest segment; `log_start` moves past it.
    pub fn pop_front(&mut self) -> Option<Segment> {
        let s = self.segments.pop_front()?;
        self.bytes -= s.byte_len();
        self.count -= s.record_count();
        self.log_start = self.segments.front().map_or(self.next_offset, |n| n.base_offset).max(s.end_offset);
        Some(s)
    }

    /// Keep only records for which `keep(offset, encoded)` holds.
    pub fn retain(&mut self, mut keep: impl FnMut(u64, &[u8]) -> bool) -> usize {
        let mut removed = 0;
        for seg in self.segments.iter_mut() {
            let before = seg.byte_len();
            let r = seg.retain(&mut keep);
            self.bytes -= before - seg.byte_len();
            removed += r;
        }
        self.count -= removed;
        removed
    }

    pub fn for_each_raw(&self, mut f: impl FnMut(u64, &[u8])) {
        for seg in &self.segments {
            for i in 0..seg.index.len() {
                f(seg.index[i].0, seg.record_at(i));
            }
        }
    }

    /// Write segments whose range reaches `from_offset` or later to `dir`.
    pub fn persist_from(&self, dir: &Path, from_offset: u64) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for seg in self.segments.iter().filter(|s| s.end_offset > from_offset || s.record_count() == 0) {
            let path = dir.join(segment_file_name(seg.base_offset));
            crate::fsutil::write_atomic(&path, seg.bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(i: u64, n: usize) -> Message {
        Message::new("f", i, vec![i as u8; n]).at(i * 10)
    }

    fn log_with(count: u64, seg_bytes: usize, payload: usize) -> SegmentedLog {
        let mut log = SegmentedLog::new(seg_bytes);
        let mut buf = Vec::new();
        for i in 0..count {
            buf.clear();
            let m = msg(i, payload);
            encode_record(i, &m, &mut buf);
            log.append_raw(i, m.produced_at, &buf);
        }
        log
    }

    #[test]
    fn prefix_layout_is_little_endian() {
        let m = Message::new("ab", 7, vec![9, 9, 9]).at(0x0102);
        let mut buf = Vec::new();
        encode_record(0x0a0b, &m, &mut buf);
        assert_eq!(&buf[0..4], &[3, 0, 0, 0]);
        let header_len = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        assert_eq!(&buf[8..16], &[0x0b, 0x0a, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&buf[16..24], &[0x02, 0x01, 0, 0, 0, 0, 0, 0]);
        assert_eq!(buf.len(), RECORD_PREFIX_LEN + header_len + 3);
        assert_eq!(&buf[buf.len() - 3..], &[9, 9, 9]);
        assert_eq!(encoded_len(&m), buf.len());
    }

    #[test]
    fn full_message_round_trip() {
        let m = Message::new("flow", 42, b"payload".to_vec())
            .with_key(b"k1".to_vec())
            .with_routing_key("a.b")
            .with_header("x", "1")
            .with_ttl_ms(250)
            .at(99);
        let mut buf = Vec::new();
        encode_record(5, &m, &mut buf);
        assert_eq!(encoded_len(&m), buf.len());
        let (rec, n) = decode_record(&buf).unwrap();
        assert_eq!(n, buf.len());
        assert_eq!(rec, Record { offset: 5, message: m });
        assert_eq!(record_key(&buf).unwrap(), Some(&b"k1"[..]));
    }

    #[test]
    fn truncated_input_is_an_error() {
        let mut buf = Vec::new();
        encode_record(0, &msg(0, 10), &mut buf);
        assert!(decode_record(&buf[..buf.len() - 1]).is_err());
        assert!(decode_record(&buf[..10]).is_err());
    }

    #[test]
    fn rolls_segments_at_size_bound() {
        let one = encoded_len(&msg(0, 100));
        let log = log_with(10, one * 3, 100);
        assert_eq!(log.segment_count(), 4);
        let bases: Vec<u64> = log.segments().map(|s| s.base_offset).collect();
        assert_eq!(bases, vec![0, 3, 6, 9]);
        assert_eq!(log.record_count(), 10);
        assert_eq!(log.byte_len(), one * 10);
    }

    #[test]
    fn oversized_record_gets_its_own_segment() {
        let log = log_with(3, 10, 100);
        assert_eq!(log.segment_count(), 3);
    }

    #[test]
    fn read_respects_bounds() {
        let one = encoded_len(&msg(0, 50));
        let log = log_with(10, one * 4, 50);
        let all = log.read(0, u64::MAX, usize::MAX).unwrap();
        assert_eq!(all.iter().map(|r| r.offset).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
        assert_eq!(log.read(3, 6, usize::MAX).unwrap().len(), 3);
        assert_eq!(log.read(0, u64::MAX, one * 2).unwrap().len(), 2);
        assert_eq!(log.read(0, u64::MAX, 1).unwrap().len(), 1);
        assert!(log.read(10, u64::MAX, usize::MAX).unwrap().is_empty());
    }

    #[test]
    fn truncate_drops_tail() {
        let one = encoded_len(&msg(0, 20));
        let mut log = log_with(10, one * 3, 20);
        log.truncate_to(4);
        assert_eq!(log.next_offset(), 4);
        assert_eq!(log.record_count(), 4);
        assert_eq!(log.byte_len(), one * 4);
        log.truncate_to(0);
        assert_eq!(log.record_count(), 0);
        assert_eq!(log.byte_len(), 0);
    }

    #[test]
    fn catch_up_copies_missing_suffix() {
        let leader = log_with(8, 200, 10);
        let mut follower = SegmentedLog::new(200);
        follower.catch_up_from(&leader);
        assert_eq!(follower.next_offset(), 8);
        assert_eq!(follower.read(0, u64::MAX, usize::MAX).unwrap(), leader.read(0, u64::MAX, usize::MAX).unwrap());
        assert_eq!(follower.catch_up_from(&leader), 0);
    }

    #[test]
    fn pop_front_advances_start() {
        let one = encoded_len(&msg(0, 20));
        let mut log = log_with(6, one * 2, 20);
        log.pop_front();
        assert_eq!(log.log_start(), 2);
        assert_eq!(log.record_count(), 4);
    }

    #[test]
    fn segment_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = log_with(5, 1 << 20, 7);
        let files = log.persist_from(dir.path(), 0).unwrap();
        assert_eq!(files, vec![dir.path().join("0.seg")]);
        let back = read_segment_file(&files[0]).unwrap();
        assert_eq!(back, log.read(0, u64::MAX, usize::MAX).unwrap());
    }
}
