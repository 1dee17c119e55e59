//! Chunk file codec.
//!
//! A chunk is an immutable batch of events in arrival order, stored columnar:
//! delta-encoded timestamps and ingest ids, then per-field presence bitmaps
//! and value arrays, the whole block deflate-compressed.
//!
//! File layout, bit-exact and versioned:
//!   magic "SSCH" | version u32 LE | chunk_id u64 LE | body_len u32 LE | body
//!   footer: crc32 u32 LE (over everything before the footer)
//!           | min_ts i64 LE | max_ts i64 LE | event_count u32 LE
//!
//! Files are named by zero-padded chunk id: `NNNNNNNN.chk`.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::model::{Event, Timestamp, Value};

pub const CHUNK_MAGIC: &[u8; 4] = b"SSCH";
pub const CHUNK_VERSION: u32 = 1;
pub const CHUNK_FILE_EXT: &str = "chk";
const FOOTER_LEN: usize = 4 + 8 + 8 + 4;

/// Sealed-chunk metadata kept in memory and in the file footer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkMeta {
    pub chunk_id: u64,
    pub min_ts: Timestamp,
    pub max_ts: Timestamp,
    pub event_count: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum ChunkCodecError {
    #[error("bad magic or version")]
    BadHeader,
    #[error("truncated chunk file")]
    Truncated,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed chunk body")]
    Malformed,
}

pub fn chunk_file_name(chunk_id: u64) -> String {
    format!("{chunk_id:08}.{CHUNK_FILE_EXT}")
}

/// Encodes events (arrival order, non-decreasing timestamps) into the full
/// chunk file image, footer included.
pub fn encode_chunk(chunk_id: u64, events: &[Event]) -> Vec<u8> {
    assert!(!events.is_empty(), "chunks are never empty");
    let body = compress(&encode_columns(events));

    let mut out = Vec::with_capacity(body.len() + 64);
    out.extend_from_slice(CHUNK_MAGIC);
    out.extend_from_slice(&CHUNK_VERSION.to_le_bytes());
    out.extend_from_slice(&chunk_id.to_le_bytes());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);

    let crc = crc32fast::hash(&out);
    let min_ts = events.first().unwrap().timestamp;
    let max_ts = events.last().unwrap().timestamp;
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&min_ts.to_le_bytes());
    out.extend_from_slice(&max_ts.to_le_bytes());
    out.extend_from_slice(&(events.len() as u32).to_le_bytes());
    out
}

/// Decodes a full chunk file image back into (meta, events).
pub fn decode_chunk(buf: &[u8]) -> Result<(ChunkMeta, Vec<Event>), ChunkCodecError> {
    if buf.len() < 20 + FOOTER_LEN {
        return Err(ChunkCodecError::Truncated);
    }
    let (head, footer) = buf.split_at(buf.len() - FOOTER_LEN);
    if &head[0..4] != CHUNK_MAGIC
        || u32::from_le_bytes(head[4..8].try_into().unwrap()) != CHUNK_VERSION
    {
        return Err(ChunkCodecError::BadHeader);
    }
    let chunk_id = u64::from_le_bytes(head[8..16].try_into().unwrap());
    let body_len = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
    if head.len() != 20 + body_len {
        return Err(ChunkCodecError::Truncated);
    }
    let crc = u32::from_le_bytes(footer[0..4].try_into().unwrap());
    if crc32fast::hash(head) != crc {
        return Err(ChunkCodecError::ChecksumMismatch);
    }
    let min_ts = i64::from_le_bytes(footer[4..12].try_into().unwrap());
    let max_ts = i64::from_le_bytes(footer[12..20].try_into().unwrap());
    let event_count = u32::from_le_bytes(footer[20..24].try_into().unwrap());

    let raw = decompress(&head[20..]).ok_or(ChunkCodecError::Malformed)?;
    let events = decode_columns(&raw).ok_or(ChunkCodecError::Malformed)?;
    if events.len() != event_count as usize {
        return Err(ChunkCodecError::Malformed);
    }
    Ok((
        ChunkMeta {
            chunk_id,
            min_ts,
            max_ts,
            event_count,
        },
        events,
    ))
}

fn compress(raw: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(raw).expect("in-memory deflate");
    enc.finish().expect("in-memory deflate")
}

fn decompress(body: &[u8]) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    DeflateDecoder::new(body).read_to_end(&mut out).ok()?;
    Some(out)
}

fn encode_columns(events: &[Event]) -> Vec<u8> {
    let n = events.len();
    let mut out = Vec::new();
    out.extend_from_slice(&(n as u32).to_le_bytes());

    let mut prev = 0i64;
    for e in events {
        write_zigzag(&mut out, e.timestamp - prev);
        prev = e.timestamp;
    }
    let mut prev = 0i64;
    for e in events {
        write_zigzag(&mut out, e.ingest_id as i64 - prev);
        prev = e.ingest_id as i64;
    }

    let names: BTreeSet<&str> = events
        .iter()
        .flat_map(|e| e.fields.keys().map(|k| k.as_str()))
        .collect();
    out.extend_from_slice(&(names.len() as u16).to_le_bytes());
    for name in names {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let mut bitmap = vec![0u8; n.div_ceil(8)];
        for (i, e) in events.iter().enumerate() {
            if e.fields.contains_key(name) {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bitmap);
        for e in events {
            if let Some(v) = e.fields.get(name) {
                v.write_canonical(&mut out);
            }
        }
    }
    out
}

fn decode_columns(raw: &[u8]) -> Option<Vec<Event>> {
    let mut pos = 0usize;
    let n = read_u32(raw, &mut pos)? as usize;

    let mut timestamps = Vec::with_capacity(n);
    let mut prev = 0i64;
    for _ in 0..n {
        prev += read_zigzag(raw, &mut pos)?;
        timestamps.push(prev);
    }
    let mut ingest_ids = Vec::with_capacity(n);
    let mut prev = 0i64;
    for _ in 0..n {
        prev += read_zigzag(raw, &mut pos)?;
        ingest_ids.push(prev as u64);
    }

    let mut events: Vec<Event> = timestamps
        .into_iter()
        .zip(ingest_ids)
        .map(|(ts, id)| Event::new(ts, id, Default::default()))
        .collect();

    let field_count = read_u16(raw, &mut pos)?;
    for _ in 0..field_count {
        let name_len = read_u16(raw, &mut pos)? as usize;
        let name = std::str::from_utf8(raw.get(pos..pos + name_len)?).ok()?;
        pos += name_len;
        let bitmap = raw.get(pos..pos + n.div_ceil(8))?.to_vec();
        pos += n.div_ceil(8);
        for (i, event) in events.iter_mut().enumerate() {
            if bitmap[i / 8] & (1 << (i % 8)) != 0 {
                let v = read_value(raw, &mut pos)?;
                event.fields.insert(name.to_string(), v);
            }
        }
    }
    if pos != raw.len() {
        return None;
    }
    Some(events)
}

fn write_zigzag(out: &mut Vec<u8>, v: i64) {
    let mut z = ((v << 1) ^ (v >> 63)) as u64;
    loop {
        let byte = (z & 0x7f) as u8;
        z >>= 7;
        if z == 0 {
            out.push(byte);
            break;
        }
        out.push(byte | 0x80);
    }
}

fn read_zigzag(raw: &[u8], pos: &mut usize) -> Option<i64> {
    let mut z = 0u64;
    let mut shift = 0;
    loop {
        let byte = *raw.get(*pos)?;
        *pos += 1;
        z |= ((byte & 0x7f) as u64) << shift;
        if byte & 0x80 == 0 {
            break;
        }
        shift += 7;
        if shift > 63 {
            return None;
        }
    }
    Some(((z >> 1) as i64) ^ -((z & 1) as i64))
}

fn read_u32(raw: &[u8], pos: &mut usize) -> Option<u32> {
    let v = u32::from_le_bytes(raw.get(*pos..*pos + 4)?.try_into().unwrap());
    *pos += 4;
    Some(v)
}

fn read_u16(raw: &[u8], pos: &mut usize) -> Option<u16> {
    let v = u16::from_le_bytes(raw.get(*pos..*pos + 2)?.try_into().unwrap());
    *pos += 2;
    Some(v)
}

fn read_value(raw: &[u8], pos: &mut usize) -> Option<Value> {
    let tag = *raw.get(*pos)?;
    *pos += 1;
    Some(match tag {
        0x01 => {
            let b = *raw.get(*pos)?;
            *pos += 1;
            Value::Bool(b != 0)
        }
        0x02 => {
            let v = i64::from_le_bytes(raw.get(*pos..*pos + 8)?.try_into().unwrap());
            *pos += 8;
            Value::Int(v)
        }
        0x03 => {
            let v = u64::from_le_bytes(raw.get(*pos..*pos + 8)?.try_into().unwrap());
            *pos += 8;
            Value::Float(f64::from_bits(v))
        }
        0x04 => {
            let len = read_u32(raw, pos)? as usize;
            let s = std::str::from_utf8(raw.get(*pos..*pos + len)?).ok()?;
            *pos += len;
            Value::Str(s.to_string())
        }
        _ => return None,
    })
}
