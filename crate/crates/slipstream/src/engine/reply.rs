//! Wire codecs for the reply topic and the dead-letter topic.
//!
//! Reply frame, bit-exact:
//!   [version u8][ingest_id u64][stream len u16][stream bytes]
//!   [metric count u16][per metric: id len u16, id bytes, value (canonical)]
//!   [event_ts i64][ingest_wall_ms u64][reply_wall_ms u64]
//! The record key on the reply topic is the source topic name, which gives
//! the collector its (ingest_id, topic) dedup key for free.

use crate::model::{Timestamp, Value};

pub const REPLY_FORMAT_VERSION: u8 = 1;

/// One task processor's answer for one routed copy of an event.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplyFrame {
    pub ingest_id: u64,
    pub stream_id: String,
    /// (metric id, value) for the arriving event's group, one entry per
    /// metric served by the source topic. Empty for rejected events.
    pub metrics: Vec<(String, Value)>,
    pub event_ts: Timestamp,
    /// Wall clock at front-end append and at reply append; lets latency be
    /// split into queueing and processing without cross-thread clocks.
    pub ingest_wall_ms: u64,
    pub reply_wall_ms: u64,
}

impl ReplyFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.push(REPLY_FORMAT_VERSION);
        out.extend_from_slice(&self.ingest_id.to_le_bytes());
        out.extend_from_slice(&(self.stream_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.stream_id.as_bytes());
        out.extend_from_slice(&(self.metrics.len() as u16).to_le_bytes());
        for (id, value) in &self.metrics {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            value.write_canonical(&mut out);
        }
        out.extend_from_slice(&self.event_ts.to_le_bytes());
        out.extend_from_slice(&self.ingest_wall_ms.to_le_bytes());
        out.extend_from_slice(&self.reply_wall_ms.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Option<ReplyFrame> {
        let mut pos = 0usize;
        if *buf.first()? != REPLY_FORMAT_VERSION {
            return None;
        }
        pos += 1;
        let ingest_id = read_u64(buf, &mut pos)?;
        let stream_id = read_string(buf, &mut pos)?;
        let count = read_u16(buf, &mut pos)? as usize;
        let mut metrics = Vec::with_capacity(count);
        for _ in 0..count {
            let id = read_string(buf, &mut pos)?;
            let value = read_value(buf, &mut pos)?;
            metrics.push((id, value));
        }
        let event_ts = read_u64(buf, &mut pos)? as i64;
        let ingest_wall_ms = read_u64(buf, &mut pos)?;
        let reply_wall_ms = read_u64(buf, &mut pos)?;
        (pos == buf.len()).then_some(ReplyFrame {
            ingest_id,
            stream_id,
            metrics,
            event_ts,
            ingest_wall_ms,
            reply_wall_ms,
        })
    }
}

/// An undecodable record parked on the dead-letter topic, with the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadLetter {
    pub reason: String,
    pub payload: Vec<u8>,
}

impl DeadLetter {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.payload.len());
        out.extend_from_slice(&(self.reason.len() as u16).to_le_bytes());
        out.extend_from_slice(self.reason.as_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(buf: &[u8]) -> Option<DeadLetter> {
        let mut pos = 0usize;
        let reason = read_string(buf, &mut pos)?;
        Some(DeadLetter {
            reason,
            payload: buf[pos..].to_vec(),
        })
    }
}

fn read_u16(buf: &[u8], pos: &mut usize) -> Option<u16> {
    let v = u16::from_le_bytes(buf.get(*pos..*pos + 2)?.try_into().unwrap());
    *pos += 2;
    Some(v)
}

fn read_u64(buf: &[u8], pos: &mut usize) -> Option<u64> {
    let v = u64::from_le_bytes(buf.get(*pos..*pos + 8)?.try_into().unwrap());
    *pos += 8;
    Some(v)
}

fn read_string(buf: &[u8], pos: &mut usize) -> Option<String> {
    let len = read_u16(buf, pos)? as usize;
    let s = std::str::from_utf8(buf.get(*pos..*pos + len)?).ok()?.to_string();
    *pos += len;
    Some(s)
}

/// Inverse of Value::write_canonical.
pub(crate) fn read_value(buf: &[u8], pos: &mut usize) -> Option<Value> {
    let tag = *buf.get(*pos)?;
    *pos += 1;
    Some(match tag {
        0x01 => {
            let b = *buf.get(*pos)?;
            *pos += 1;
            Value::Bool(b != 0)
        }
        0x02 => Value::Int(read_u64(buf, pos)? as i64),
        0x03 => Value::Float(f64::from_bits(read_u64(buf, pos)?)),
        0x04 => {
            let len = u32::from_le_bytes(buf.get(*pos..*pos + 4)?.try_into().unwrap()) as usize;
            *pos += 4;
            let s = std::str::from_utf8(buf.get(*pos..*pos + len)?).ok()?.to_string();
            *pos += len;
            Value::Str(s)
        }
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ReplyFrame {
        ReplyFrame {
            ingest_id: 42,
            stream_id: "payments".to_string(),
            metrics: vec![
                ("q1_sum".to_string(), Value::Float(150.5)),
                ("q1_count".to_string(), Value::Int(3)),
                ("flag".to_string(), Value::Bool(true)),
                ("tag".to_string(), Value::Str("x".to_string())),
            ],
            event_ts: 345_000,
            ingest_wall_ms: 1_000_000,
            reply_wall_ms: 1_000_007,
        }
    }

    #[test]
    fn reply_round_trips() {
        let f = sample();
        assert_eq!(ReplyFrame::decode(&f.encode()), Some(f));
    }

    #[test]
    fn empty_reply_round_trips() {
        // a rejected event still produces a fragment, with zero metrics
        let f = ReplyFrame {
            metrics: Vec::new(),
            ..sample()
        };
        assert_eq!(ReplyFrame::decode(&f.encode()), Some(f));
    }

    #[test]
    fn truncation_and_bad_version_are_rejected() {
        let mut buf = sample().encode();
        buf[0] = 99;
        assert_eq!(ReplyFrame::decode(&buf), None);
        let buf = sample().encode();
        for cut in 0..buf.len() {
            assert_eq!(ReplyFrame::decode(&buf[..cut]), None, "cut at {cut}");
        }
    }

    #[test]
    fn dead_letter_round_trips() {
        let d = DeadLetter {
            reason: "event decode: truncated buffer".to_string(),
            payload: vec![1, 2, 3],
        };
        assert_eq!(DeadLetter::decode(&d.encode()), Some(d));
    }
}
