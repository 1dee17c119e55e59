//! On-disk log: one append-only segment file per partition.
//!
//! Frame layout, bit-exact:
//!   [frame length u32 LE][crc32 of payload][key length u16 LE][key][payload]
//! where frame length counts everything after the length field itself.
//!
//! Directory layout: `<root>/<topic>/<partition>/segment.log` plus
//! `<root>/<topic>/<partition>/committed/<group_id>` holding the committed
//! offset as 8 bytes LE.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex, RwLock};

use super::{LogError, TopicPartition};

/// Group-commit policy: fsync when either bound is reached.
#[derive(Debug, Clone, Copy)]
pub struct FsyncPolicy {
    pub max_delay: Duration,
    pub max_records: u32,
}

impl Default for FsyncPolicy {
    fn default() -> Self {
        FsyncPolicy {
            max_delay: Duration::from_millis(5),
            max_records: 64,
        }
    }
}

/// A durable log entry: routing key plus opaque payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub key: Vec<u8>,
    pub payload: Vec<u8>,
    /// Wall-clock millis at append; informational, not persisted.
    pub append_time_ms: u64,
}

impl Record {
    pub fn new(key: impl Into<Vec<u8>>, payload: impl Into<Vec<u8>>) -> Self {
        Record {
            key: key.into(),
            payload: payload.into(),
            append_time_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or_default()
                .as_millis() as u64,
        }
    }
}

/// A record as returned by a consumer poll.
#[derive(Debug, Clone)]
pub struct PolledRecord {
    pub tp: TopicPartition,
    pub offset: u64,
    pub record: Record,
}

struct Partition {
    dir: PathBuf,
    writer: File,
    reader: File,
    /// offset -> file position of the frame's length field.
    index: Vec<u64>,
    end_pos: u64,
    pending_records: u32,
    last_sync: Instant,
}

impl Partition {
    fn next_offset(&self) -> u64 {
        self.index.len() as u64
    }
}

struct Topic {
    partitions: Vec<Mutex<Partition>>,
}

/// The embedded log. Thread-safe: appends from many producers, reads from
/// many consumers; per-partition appends are serialized internally.
pub struct Log {
    root: PathBuf,
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    policy: FsyncPolicy,
    /// Signalled on every append so blocked polls can wake early.
    append_signal: Arc<(Mutex<u64>, Condvar)>,
}

impl Log {
    /// Opens (or creates) a log rooted at `root`, rebuilding per-partition
    /// offset indexes by scanning segment files. A torn final frame is
    /// truncated away.
    pub fn open(root: impl Into<PathBuf>, policy: FsyncPolicy) -> Result<Log, LogError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut topics = HashMap::new();
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let topic = Self::open_topic(&entry.path())?;
            topics.insert(name, Arc::new(topic));
        }
        Ok(Log {
            root,
            topics: RwLock::new(topics),
            policy,
            append_signal: Arc::new((Mutex::new(0), Condvar::new())),
        })
    }

    fn open_topic(dir: &Path) -> Result<Topic, LogError> {
        let mut indices: Vec<(u32, PathBuf)> = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if let Ok(p) = entry.file_name().to_string_lossy().parse::<u32>() {
                indices.push((p, entry.path()));
            }
        }
        indices.sort();
        let mut partitions = Vec::new();
        for (idx, (p, path)) in indices.iter().enumerate() {
            if *p != idx as u32 {
                return Err(LogError::UnknownPartition(*p));
            }
            partitions.push(Mutex::new(Self::open_partition(path)?));
        }
        Ok(Topic { partitions })
    }

    fn open_partition(dir: &Path) -> Result<Partition, LogError> {
        fs::create_dir_all(dir.join("committed"))?;
        let seg = dir.join("segment.log");
        let writer = OpenOptions::new().create(true).append(true).open(&seg)?;
        let reader = File::open(&seg)?;

        // Rebuild the offset index by scanning frames; truncate a torn tail.
        let mut buf = Vec::new();
        File::open(&seg)?.read_to_end(&mut buf)?;
        let mut index = Vec::new();
        let mut pos = 0u64;
        while (pos as usize) < buf.len() {
            match parse_frame(&buf[pos as usize..]) {
                Some((frame_len, _, _)) => {
                    index.push(pos);
                    pos += 4 + frame_len as u64;
                }
                None => {
                    // torn or corrupt tail: keep the durable prefix
                    let f = OpenOptions::new().write(true).open(&seg)?;
                    f.set_len(pos)?;
                    f.sync_all()?;
                    break;
                }
            }
        }
        Ok(Partition {
            dir: dir.to_path_buf(),
            writer,
            reader,
            index,
            end_pos: pos,
            pending_records: 0,
            last_sync: Instant::now(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Creates a topic with `partition_count` empty partitions, durable
    /// across restart.
    pub fn create_topic(&self, name: &str, partition_count: u32) -> Result<(), LogError> {
        assert!(partition_count >= 1, "partition_count must be >= 1");
        let mut topics = self.topics.write();
        if topics.contains_key(name) {
            return Err(LogError::DuplicateTopic(name.to_string()));
        }
        let dir = self.root.join(name);
        let mut partitions = Vec::new();
        for p in 0..partition_count {
            let pdir = dir.join(p.to_string());
            fs::create_dir_all(&pdir)?;
            partitions.push(Mutex::new(Self::open_partition(&pdir)?));
        }
        topics.insert(name.to_string(), Arc::new(Topic { partitions }));
        Ok(())
    }

    pub fn topic_exists(&self, name: &str) -> bool {
        self.topics.read().contains_key(name)
    }

    pub fn partition_count(&self, topic: &str) -> Result<u32, LogError> {
        let topics = self.topics.read();
        let t = topics
            .get(topic)
            .ok_or_else(|| LogError::UnknownTopic(topic.to_string()))?;
        Ok(t.partitions.len() as u32)
    }

    pub fn topic_names(&self) -> Vec<String> {
        self.topics.read().keys().cloned().collect()
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>, LogError> {
        self.topics
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| LogError::UnknownTopic(name.to_string()))
    }

    fn with_partition<T>(
        &self,
        tp: &TopicPartition,
        f: impl FnOnce(&mut Partition) -> Result<T, LogError>,
    ) -> Result<T, LogError> {
        let topic = self.topic(&tp.topic)?;
        let slot = topic
            .partitions
            .get(tp.partition as usize)
            .ok_or(LogError::UnknownPartition(tp.partition))?;
        let result = f(&mut slot.lock());
        result
    }

    /// Appends a record; returns its offset (dense, starting at 0).
    pub fn append(&self, tp: &TopicPartition, record: &Record) -> Result<u64, LogError> {
        if record.payload.is_empty() {
            return Err(LogError::EmptyPayload);
        }
        let offset = self.with_partition(tp, |p| {
            let frame = encode_frame(&record.key, &record.payload);
            p.writer.write_all(&frame)?;
            let offset = p.next_offset();
            p.index.push(p.end_pos);
            p.end_pos += frame.len() as u64;
            p.pending_records += 1;
            if p.pending_records >= self.policy.max_records
                || p.last_sync.elapsed() >= self.policy.max_delay
            {
                p.writer.sync_data()?;
                p.pending_records = 0;
                p.last_sync = Instant::now();
            }
            Ok(offset)
        })?;
        let (lock, cvar) = &*self.append_signal;
        *lock.lock() += 1;
        cvar.notify_all();
        Ok(offset)
    }

    /// Forces outstanding appends of every partition to disk.
    pub fn sync(&self) -> Result<(), LogError> {
        let topics: Vec<Arc<Topic>> = self.topics.read().values().cloned().collect();
        for t in topics {
            for slot in &t.partitions {
                let mut p = slot.lock();
                if p.pending_records > 0 {
                    p.writer.sync_data()?;
                    p.pending_records = 0;
                    p.last_sync = Instant::now();
                }
            }
        }
        Ok(())
    }

    pub fn next_offset(&self, tp: &TopicPartition) -> Result<u64, LogError> {
        self.with_partition(tp, |p| Ok(p.next_offset()))
    }

    /// Reads up to `max` records starting at `offset`, in offset order.
    pub fn read_from(
        &self,
        tp: &TopicPartition,
        offset: u64,
        max: usize,
    ) -> Result<Vec<(u64, Record)>, LogError> {
        self.with_partition(tp, |p| {
            let next = p.next_offset();
            if offset > next {
                return Err(LogError::OffsetOutOfRange {
                    tp: tp.clone(),
                    offset,
                    next,
                });
            }
            let mut out = Vec::new();
            let mut off = offset;
            while off < next && out.len() < max {
                let pos = p.index[off as usize];
                let end = if (off + 1) < next {
                    p.index[off as usize + 1]
                } else {
                    p.end_pos
                };
                let mut buf = vec![0u8; (end - pos) as usize];
                p.reader.read_exact_at(&mut buf, pos)?;
                let (_, key, payload) =
                    parse_frame(&buf).ok_or(LogError::CorruptSegment { tp: tp.clone(), pos })?;
                out.push((
                    off,
                    Record {
                        key: key.to_vec(),
                        payload: payload.to_vec(),
                        append_time_ms: 0,
                    },
                ));
                off += 1;
            }
            Ok(out)
        })
    }

    /// Durably stores the restart position for `group` on `tp`. Commits must
    /// be monotone; regressions are rejected.
    pub fn commit(&self, group: &str, tp: &TopicPartition, offset: u64) -> Result<(), LogError> {
        self.with_partition(tp, |p| {
            let next = p.next_offset();
            if offset > next {
                return Err(LogError::OffsetOutOfRange {
                    tp: tp.clone(),
                    offset,
                    next,
                });
            }
            let path = p.dir.join("committed").join(group);
            if let Some(prev) = read_committed(&path)? {
                if offset < prev {
                    return Err(LogError::CommitRegression {
                        tp: tp.clone(),
                        attempted: offset,
                        committed: prev,
                    });
                }
            }
            let tmp = p.dir.join("committed").join(format!("{group}.tmp"));
            let mut f = File::create(&tmp)?;
            f.write_all(&offset.to_le_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, &path)?;
            Ok(())
        })
    }

    pub fn committed(&self, group: &str, tp: &TopicPartition) -> Result<Option<u64>, LogError> {
        self.with_partition(tp, |p| read_committed(&p.dir.join("committed").join(group)))
    }

    /// Blocks until the append counter changes or the deadline passes.
    /// Used by consumer polls to avoid busy-waiting.
    pub(crate) fn wait_for_append(&self, seen: u64, deadline: Instant) -> u64 {
        let (lock, cvar) = &*self.append_signal;
        let mut count = lock.lock();
        while *count == seen {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            if cvar.wait_for(&mut count, deadline - now).timed_out() {
                break;
            }
        }
        *count
    }

    pub(crate) fn append_count(&self) -> u64 {
        *self.append_signal.0.lock()
    }
}

fn read_committed(path: &Path) -> Result<Option<u64>, LogError> {
    match fs::read(path) {
        Ok(bytes) if bytes.len() == 8 => {
            Ok(Some(u64::from_le_bytes(bytes.as_slice().try_into().unwrap())))
        }
        Ok(_) => Ok(None),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn encode_frame(key: &[u8], payload: &[u8]) -> Vec<u8> {
    let frame_len = 4 + 2 + key.len() + payload.len();
    let mut out = Vec::with_capacity(4 + frame_len);
    out.extend_from_slice(&(frame_len as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(&(key.len() as u16).to_le_bytes());
    out.extend_from_slice(key);
    out.extend_from_slice(payload);
    out
}

/// Parses one frame from the front of `buf`. Returns (frame length after the
/// length field, key, payload), or None if the frame is incomplete or fails
/// its checksum.
fn parse_frame(buf: &[u8]) -> Option<(u32, &[u8], &[u8])> {
    if buf.len() < 4 {
        return None;
    }
    let frame_len = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    if frame_len < 6 || buf.len() < 4 + frame_len {
        return None;
    }
    let body = &buf[4..4 + frame_len];
    let crc = u32::from_le_bytes(body[0..4].try_into().unwrap());
    let key_len = u16::from_le_bytes(body[4..6].try_into().unwrap()) as usize;
    if 6 + key_len > body.len() {
        return None;
    }
    let key = &body[6..6 + key_len];
    let payload = &body[6 + key_len..];
    if payload.is_empty() || crc32fast::hash(payload) != crc {
        return None;
    }
    Some((frame_len as u32, key, payload))
}
