//! The event reservoir: a disk-backed store of raw events, serialized and
//! compressed into immutable ordered chunk files, serving windows through
//! head/tail iterators with eager adjacent-chunk caching.
//!
//! One reservoir is owned by a single task-processor thread; append and
//! iterator calls come only from the owner. All disk I/O (chunk persistence
//! and loads) runs on a shared worker pool, keeping the append/advance path
//! free of synchronous disk operations.

pub mod chunk;
mod cache;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_channel::{Receiver, Sender};

use crate::model::{Event, Timestamp};
use cache::ChunkCache;
use chunk::{chunk_file_name, decode_chunk, encode_chunk, ChunkMeta, CHUNK_FILE_EXT};

#[derive(Debug, Clone, Copy)]
pub struct ReservoirConfig {
    /// Seal the open chunk at this many events...
    pub chunk_events: usize,
    /// ...or at this approximate in-memory size, whichever first.
    pub chunk_bytes: usize,
    /// Max resident decoded chunks beyond pins.
    pub cache_capacity: usize,
    /// Chunks loaded ahead of an iterator crossing into a new chunk.
    pub prefetch_depth: usize,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        ReservoirConfig {
            chunk_events: 4096,
            chunk_bytes: 1 << 20,
            cache_capacity: 220,
            prefetch_depth: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ReservoirPosition {
    pub chunk_id: u64,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterRole {
    Head,
    Tail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterStart {
    /// First event with timestamp >= the given instant.
    Time(Timestamp),
    /// Exactly this position.
    Position(ReservoirPosition),
    /// One past the last event; yields nothing until the next append.
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IteratorId(u64);

#[derive(Debug, thiserror::Error)]
pub enum ReservoirError {
    #[error("non-monotone append: ts {ts} < last {last}")]
    NonMonotoneAppend { ts: Timestamp, last: Timestamp },
    #[error("start {0:?} is before the retained range")]
    OutOfRetention(IterStart),
    #[error("unknown iterator")]
    UnknownIterator,
    #[error("invalid position {0:?}")]
    InvalidPosition(ReservoirPosition),
    #[error("interior chunk {chunk_id} is corrupt")]
    FatalCorruption { chunk_id: u64 },
    #[error("truncation watermark {watermark} is ahead of a head iterator at {head_ts}")]
    TruncateUnsafe {
        watermark: Timestamp,
        head_ts: Timestamp,
    },
    #[error("chunk load failed: {0}")]
    LoadFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared counters; readable from any thread.
#[derive(Debug, Default)]
pub struct ReservoirStats {
    /// Blocking loads where the chunk was neither resident nor in flight.
    pub cache_misses: AtomicU64,
    /// Chunk loads performed, prefetches included.
    pub chunk_loads: AtomicU64,
    /// Times the owner blocked on an in-flight (prefetch) load.
    pub load_waits: AtomicU64,
    /// Disk operations performed on the owner thread inside the
    /// append/advance critical path. Zero by construction; instrumented so a
    /// regression shows up.
    pub critical_path_disk_ops: AtomicU64,
    /// Asynchronous persistence failures (health signal).
    pub persist_failures: AtomicU64,
    /// High-water mark of resident decoded chunks.
    pub resident_hwm: AtomicUsize,
}

impl ReservoirStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            cache_misses: self.cache_misses.load(Ordering::Relaxed),
            chunk_loads: self.chunk_loads.load(Ordering::Relaxed),
            load_waits: self.load_waits.load(Ordering::Relaxed),
            critical_path_disk_ops: self.critical_path_disk_ops.load(Ordering::Relaxed),
            persist_failures: self.persist_failures.load(Ordering::Relaxed),
            resident_hwm: self.resident_hwm.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub cache_misses: u64,
    pub chunk_loads: u64,
    pub load_waits: u64,
    pub critical_path_disk_ops: u64,
    pub persist_failures: u64,
    pub resident_hwm: usize,
}

// ---------------------------------------------------------------------------
// I/O worker pool

struct PersistOutcome {
    chunk_id: u64,
    result: Result<(), String>,
}

/// Keyed externally by chunk id (loads_in_flight), so only the result travels.
struct LoadOutcome {
    result: Result<Arc<Vec<Event>>, String>,
}

enum Job {
    Persist {
        path: PathBuf,
        chunk_id: u64,
        events: Arc<Vec<Event>>,
        done: Sender<PersistOutcome>,
    },
    Load {
        path: PathBuf,
        chunk_id: u64,
        done: Sender<LoadOutcome>,
    },
}

/// Background disk workers shared by all reservoirs of a process.
pub struct IoPool {
    tx: Sender<Job>,
    handles: Vec<std::thread::JoinHandle<()>>,
}

impl IoPool {
    pub fn new(threads: usize) -> Arc<IoPool> {
        let (tx, rx) = crossbeam_channel::unbounded::<Job>();
        let mut handles = Vec::new();
        for i in 0..threads.max(1) {
            let rx = rx.clone();
            handles.push(
                std::thread::Builder::new()
                    .name(format!("reservoir-io-{i}"))
                    .spawn(move || {
                        for job in rx.iter() {
                            match job {
                                Job::Persist {
                                    path,
                                    chunk_id,
                                    events,
                                    done,
                                } => {
                                    let result = persist_chunk(&path, chunk_id, &events);
                                    let _ = done.send(PersistOutcome { chunk_id, result });
                                }
                                Job::Load {
                                    path,
                                    chunk_id,
                                    done,
                                } => {
                                    let result = load_chunk(&path, chunk_id);
                                    let _ = done.send(LoadOutcome { result });
                                }
                            }
                        }
                    })
                    .expect("spawn io worker"),
            );
        }
        Arc::new(IoPool { tx, handles })
    }
}

impl Drop for IoPool {
    fn drop(&mut self) {
        // closing the channel stops the workers
        let (tx, _) = crossbeam_channel::bounded(0);
        drop(std::mem::replace(&mut self.tx, tx));
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn persist_chunk(path: &Path, chunk_id: u64, events: &[Event]) -> Result<(), String> {
    let buf = encode_chunk(chunk_id, events);
    fs::write(path, &buf).map_err(|e| e.to_string())?;
    fs::File::open(path)
        .and_then(|f| f.sync_all())
        .map_err(|e| e.to_string())
}

fn load_chunk(path: &Path, chunk_id: u64) -> Result<Arc<Vec<Event>>, String> {
    let buf = fs::read(path).map_err(|e| e.to_string())?;
    let (meta, events) = decode_chunk(&buf).map_err(|e| e.to_string())?;
    if meta.chunk_id != chunk_id {
        return Err(format!("chunk id mismatch: file says {}", meta.chunk_id));
    }
    Ok(Arc::new(events))
}

// ---------------------------------------------------------------------------
// Reservoir

struct IterState {
    role: IterRole,
    pos: ReservoirPosition,
    pinned: Option<u64>,
}

/// What a fresh open found on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecoveryInfo {
    /// Events durably on disk (ordinals 0..durable_events, truncated ones
    /// included in the count).
    pub durable_events: u64,
    /// Position the next append will take.
    pub next_position: ReservoirPosition,
    /// Timestamp of the last durable event, if any survive.
    pub last_durable_ts: Option<Timestamp>,
}

pub struct Reservoir {
    dir: PathBuf,
    cfg: ReservoirConfig,
    pool: Arc<IoPool>,
    cache: ChunkCache,
    /// Sealed chunks, persisted or awaiting persistence.
    metas: BTreeMap<u64, ChunkMeta>,
    /// chunk_id -> ordinal of its first event.
    base_ordinal: BTreeMap<u64, u64>,
    open: Vec<Event>,
    open_chunk_id: u64,
    open_weight: usize,
    first_chunk: u64,
    total_appended: u64,
    truncated_events: u64,
    truncate_watermark: Option<Timestamp>,
    last_ts: Option<Timestamp>,
    /// All chunks < this id are durable on disk.
    durable_upto: u64,
    persist_tx: Sender<PersistOutcome>,
    persist_rx: Receiver<PersistOutcome>,
    persist_in_flight: Option<u64>,
    persist_queue: VecDeque<u64>,
    loads_in_flight: HashMap<u64, Receiver<LoadOutcome>>,
    iters: HashMap<u64, IterState>,
    next_iter_id: u64,
    stats: Arc<ReservoirStats>,
    /// Set while inside append/advance; disk helpers increment the
    /// critical-path counter when it is on.
    on_critical_path: bool,
}

impl Reservoir {
    /// Opens a reservoir directory, validating every chunk file in id order.
    /// A torn final write is removed; corruption with valid successors is
    /// fatal. Returns the reservoir plus what survived, so the caller can
    /// replay the missing suffix from the log.
    pub fn open(
        dir: impl Into<PathBuf>,
        cfg: ReservoirConfig,
        pool: Arc<IoPool>,
    ) -> Result<(Reservoir, RecoveryInfo), ReservoirError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;

        let (first_chunk, truncated_events, truncate_watermark) = read_base_marker(&dir)?;

        let mut ids: Vec<u64> = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(CHUNK_FILE_EXT) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    if let Ok(id) = stem.parse::<u64>() {
                        ids.push(id);
                    }
                }
            }
        }
        ids.sort_unstable();

        let mut metas = BTreeMap::new();
        let mut expected = first_chunk;
        for (i, &id) in ids.iter().enumerate() {
            let last_file = i + 1 == ids.len();
            if id != expected {
                // gap: chunks were persisted strictly in order, so a hole
                // means interior damage unless it is trailing garbage
                return Err(ReservoirError::FatalCorruption { chunk_id: expected });
            }
            let path = dir.join(chunk_file_name(id));
            let buf = fs::read(&path)?;
            match decode_chunk(&buf) {
                Ok((meta, _)) => {
                    metas.insert(id, meta);
                    expected += 1;
                }
                Err(_) if last_file => {
                    // torn final write from a crash mid-persist
                    fs::remove_file(&path)?;
                    break;
                }
                Err(_) => return Err(ReservoirError::FatalCorruption { chunk_id: id }),
            }
        }

        let mut base_ordinal = BTreeMap::new();
        let mut ordinal = truncated_events;
        for (id, meta) in &metas {
            base_ordinal.insert(*id, ordinal);
            ordinal += meta.event_count as u64;
        }
        let open_chunk_id = metas.keys().next_back().map_or(first_chunk, |k| k + 1);
        let last_ts = metas.values().next_back().map(|m| m.max_ts);

        let (persist_tx, persist_rx) = crossbeam_channel::unbounded();
        let info = RecoveryInfo {
            durable_events: ordinal,
            next_position: ReservoirPosition {
                chunk_id: open_chunk_id,
                index: 0,
            },
            last_durable_ts: last_ts,
        };
        Ok((
            Reservoir {
                dir,
                cache: ChunkCache::new(cfg.cache_capacity),
                cfg,
                pool,
                metas,
                base_ordinal,
                open: Vec::new(),
                open_chunk_id,
                open_weight: 0,
                first_chunk,
                total_appended: ordinal,
                truncated_events,
                truncate_watermark,
                last_ts,
                durable_upto: open_chunk_id,
                persist_tx,
                persist_rx,
                persist_in_flight: None,
                persist_queue: VecDeque::new(),
                loads_in_flight: HashMap::new(),
                iters: HashMap::new(),
                next_iter_id: 0,
                stats: Arc::new(ReservoirStats::default()),
                on_critical_path: false,
            },
            info,
        ))
    }

    pub fn stats(&self) -> Arc<ReservoirStats> {
        Arc::clone(&self.stats)
    }

    pub fn config(&self) -> &ReservoirConfig {
        &self.cfg
    }

    /// Total events ever appended (truncated ones included): the ordinal the
    /// next append will take.
    pub fn total_events(&self) -> u64 {
        self.total_appended
    }

    pub fn last_timestamp(&self) -> Option<Timestamp> {
        self.last_ts
    }

    pub fn resident_chunks(&self) -> usize {
        self.cache.resident()
    }

    pub fn live_iterators(&self) -> usize {
        self.iters.len()
    }

    /// Resident chunks currently held by at least one pin.
    pub fn pinned_chunks(&self) -> usize {
        self.cache.pinned_count()
    }

    /// Maps an event ordinal to its position, if retained.
    pub fn position_of_ordinal(&self, ordinal: u64) -> Option<ReservoirPosition> {
        if ordinal >= self.total_appended {
            return None;
        }
        if ordinal < self.truncated_events {
            return None;
        }
        let open_base = self.total_appended - self.open.len() as u64;
        if ordinal >= open_base {
            return Some(ReservoirPosition {
                chunk_id: self.open_chunk_id,
                index: (ordinal - open_base) as u32,
            });
        }
        // bases increase with chunk id, so the last base <= ordinal wins
        let (&chunk_id, &base) = self
            .base_ordinal
            .iter()
            .take_while(|(_, &b)| b <= ordinal)
            .last()?;
        Some(ReservoirPosition {
            chunk_id,
            index: (ordinal - base) as u32,
        })
    }

    /// Appends an event to the open chunk; seals and schedules asynchronous
    /// persistence when the chunk reaches its configured size. Never touches
    /// disk on the calling thread.
    pub fn append(&mut self, event: Event) -> Result<ReservoirPosition, ReservoirError> {
        self.on_critical_path = true;
        let result = self.append_inner(event);
        self.on_critical_path = false;
        result
    }

    fn append_inner(&mut self, event: Event) -> Result<ReservoirPosition, ReservoirError> {
        self.drain_completions();
        if let Some(last) = self.last_ts {
            if event.timestamp < last {
                return Err(ReservoirError::NonMonotoneAppend {
                    ts: event.timestamp,
                    last,
                });
            }
        }
        let pos = ReservoirPosition {
            chunk_id: self.open_chunk_id,
            index: self.open.len() as u32,
        };
        self.last_ts = Some(event.timestamp);
        self.open_weight += event_weight(&event);
        self.open.push(event);
        self.total_appended += 1;
        if self.open.len() >= self.cfg.chunk_events || self.open_weight >= self.cfg.chunk_bytes {
            self.seal_open_chunk();
        }
        Ok(pos)
    }

    /// Seals the open chunk (if non-empty) regardless of size. Used at
    /// shutdown and by tests.
    pub fn seal_now(&mut self) {
        if !self.open.is_empty() {
            self.seal_open_chunk();
        }
    }

    fn seal_open_chunk(&mut self) {
        debug_assert!(!self.open.is_empty());
        let id = self.open_chunk_id;
        let events = Arc::new(std::mem::take(&mut self.open));
        let meta = ChunkMeta {
            chunk_id: id,
            min_ts: events.first().unwrap().timestamp,
            max_ts: events.last().unwrap().timestamp,
            event_count: events.len() as u32,
        };
        let base = self.total_appended - meta.event_count as u64;
        self.metas.insert(id, meta);
        self.base_ordinal.insert(id, base);
        self.cache.insert(id, Arc::clone(&events));
        // persistence pin: the chunk must stay readable until it is on disk
        self.cache.pin(id);
        // iterators currently inside this chunk take their own pin now
        for iter in self.iters.values_mut() {
            if iter.pos.chunk_id == id && iter.pinned.is_none() {
                self.cache.pin(id);
                iter.pinned = Some(id);
            }
        }
        self.note_residency();
        self.open_chunk_id += 1;
        self.open_weight = 0;
        self.persist_queue.push_back(id);
        self.submit_next_persist();
    }

    fn submit_next_persist(&mut self) {
        if self.persist_in_flight.is_some() {
            return;
        }
        let Some(id) = self.persist_queue.pop_front() else {
            return;
        };
        let events = self.cache.get(id).expect("sealed chunk pinned in cache");
        self.persist_in_flight = Some(id);
        let _ = self.pool.tx.send(Job::Persist {
            path: self.dir.join(chunk_file_name(id)),
            chunk_id: id,
            events,
            done: self.persist_tx.clone(),
        });
    }

    fn drain_completions(&mut self) {
        while let Ok(outcome) = self.persist_rx.try_recv() {
            self.finish_persist(outcome);
        }
    }

    fn finish_persist(&mut self, outcome: PersistOutcome) {
        debug_assert_eq!(self.persist_in_flight, Some(outcome.chunk_id));
        self.persist_in_flight = None;
        match outcome.result {
            Ok(()) => {
                // persists are strictly ordered, so the durable prefix grows
                self.durable_upto = outcome.chunk_id + 1;
            }
            Err(_) => {
                self.stats.persist_failures.fetch_add(1, Ordering::Relaxed);
            }
        }
        self.cache.unpin(outcome.chunk_id);
        self.submit_next_persist();
    }

    /// Blocks until every sealed chunk is persisted. Not part of the event
    /// path; used at checkpoint/shutdown and by tests.
    pub fn wait_persisted(&mut self) {
        self.drain_completions();
        while self.persist_in_flight.is_some() || !self.persist_queue.is_empty() {
            match self.persist_rx.recv() {
                Ok(outcome) => self.finish_persist(outcome),
                Err(_) => break,
            }
        }
    }

    /// Events durably on disk right now (ordinal count).
    pub fn durable_events(&self) -> u64 {
        let mut n = self.truncated_events;
        for (id, meta) in &self.metas {
            if *id < self.durable_upto {
                n += meta.event_count as u64;
            }
        }
        n
    }

    // -- iterators ----------------------------------------------------------

    pub fn open_iterator(
        &mut self,
        role: IterRole,
        start: IterStart,
    ) -> Result<IteratorId, ReservoirError> {
        self.drain_completions();
        let pos = match start {
            IterStart::End => ReservoirPosition {
                chunk_id: self.open_chunk_id,
                index: self.open.len() as u32,
            },
            IterStart::Position(pos) => {
                if pos.chunk_id < self.first_chunk {
                    return Err(ReservoirError::OutOfRetention(start));
                }
                let valid = if pos.chunk_id == self.open_chunk_id {
                    pos.index as usize <= self.open.len()
                } else {
                    self.metas
                        .get(&pos.chunk_id)
                        .is_some_and(|m| pos.index < m.event_count)
                };
                if !valid {
                    return Err(ReservoirError::InvalidPosition(pos));
                }
                pos
            }
            IterStart::Time(ts) => {
                if let Some(w) = self.truncate_watermark {
                    if ts < w {
                        return Err(ReservoirError::OutOfRetention(start));
                    }
                }
                self.position_at_time(ts)?
            }
        };
        let id = IteratorId(self.next_iter_id);
        self.next_iter_id += 1;
        self.iters.insert(
            id.0,
            IterState {
                role,
                pos,
                pinned: None,
            },
        );
        // make the starting chunk resident and pinned up front
        if pos.chunk_id < self.open_chunk_id {
            self.ensure_resident_blocking(pos.chunk_id)?;
            self.cache.pin(pos.chunk_id);
            self.iters.get_mut(&id.0).unwrap().pinned = Some(pos.chunk_id);
            self.schedule_prefetch(pos.chunk_id);
        }
        Ok(id)
    }

    /// First position whose event timestamp >= ts.
    fn position_at_time(&mut self, ts: Timestamp) -> Result<ReservoirPosition, ReservoirError> {
        let sealed_hit = self
            .metas
            .values()
            .find(|m| m.max_ts >= ts)
            .map(|m| (m.chunk_id, m.event_count));
        if let Some((chunk_id, _count)) = sealed_hit {
            let events = self.ensure_resident_blocking(chunk_id)?;
            let index = events.partition_point(|e| e.timestamp < ts) as u32;
            return Ok(ReservoirPosition { chunk_id, index });
        }
        // open chunk or end
        let index = self.open.partition_point(|e| e.timestamp < ts) as u32;
        Ok(ReservoirPosition {
            chunk_id: self.open_chunk_id,
            index,
        })
    }

    pub fn close_iterator(&mut self, id: IteratorId) {
        if let Some(iter) = self.iters.remove(&id.0) {
            if let Some(c) = iter.pinned {
                self.cache.unpin(c);
            }
        }
    }

    pub fn iterator_position(&self, id: IteratorId) -> Option<ReservoirPosition> {
        self.iters.get(&id.0).map(|i| i.pos)
    }

    pub fn iterator_role(&self, id: IteratorId) -> Option<IterRole> {
        self.iters.get(&id.0).map(|i| i.role)
    }

    /// Timestamp of the event at the iterator's position, without advancing.
    /// None when exhausted.
    pub fn iterator_peek_ts(&mut self, id: IteratorId) -> Result<Option<Timestamp>, ReservoirError> {
        self.on_critical_path = true;
        let r = self.current_event(id).map(|e| e.map(|e| e.timestamp));
        self.on_critical_path = false;
        r
    }

    /// Returns the event at the iterator's position and advances past it.
    pub fn iterator_next(&mut self, id: IteratorId) -> Result<Option<Event>, ReservoirError> {
        self.on_critical_path = true;
        let result = (|| {
            let event = self.current_event(id)?;
            if event.is_some() {
                self.advance(id)?;
            }
            Ok(event)
        })();
        self.on_critical_path = false;
        result
    }

    /// Normalizes the position (skipping past sealed-chunk ends) and returns
    /// the current event, loading its chunk if necessary.
    fn current_event(&mut self, id: IteratorId) -> Result<Option<Event>, ReservoirError> {
        self.drain_completions();
        loop {
            let iter = self
                .iters
                .get(&id.0)
                .ok_or(ReservoirError::UnknownIterator)?;
            let pos = iter.pos;
            if pos.chunk_id == self.open_chunk_id {
                return Ok(self.open.get(pos.index as usize).cloned());
            }
            let meta = *self
                .metas
                .get(&pos.chunk_id)
                .ok_or(ReservoirError::InvalidPosition(pos))?;
            if pos.index >= meta.event_count {
                self.move_iter_to_chunk(id, pos.chunk_id + 1)?;
                continue;
            }
            let events = self.ensure_resident_blocking(pos.chunk_id)?;
            // keep the pin honest if the chunk was reloaded after eviction
            let iter = self.iters.get_mut(&id.0).unwrap();
            if iter.pinned != Some(pos.chunk_id) {
                if let Some(old) = iter.pinned.take() {
                    self.cache.unpin(old);
                }
                self.cache.pin(pos.chunk_id);
                self.iters.get_mut(&id.0).unwrap().pinned = Some(pos.chunk_id);
            }
            return Ok(Some(events[pos.index as usize].clone()));
        }
    }

    fn advance(&mut self, id: IteratorId) -> Result<(), ReservoirError> {
        let iter = self
            .iters
            .get_mut(&id.0)
            .ok_or(ReservoirError::UnknownIterator)?;
        iter.pos.index += 1;
        let pos = iter.pos;
        if pos.chunk_id < self.open_chunk_id {
            let count = self.metas[&pos.chunk_id].event_count;
            if pos.index >= count {
                self.move_iter_to_chunk(id, pos.chunk_id + 1)?;
            }
        }
        Ok(())
    }

    /// Crosses an iterator into `chunk`: swaps pins, makes the chunk resident
    /// (blocking only if the prefetch has not finished), and eagerly
    /// schedules the loads of the next chunks.
    fn move_iter_to_chunk(&mut self, id: IteratorId, chunk: u64) -> Result<(), ReservoirError> {
        let iter = self.iters.get_mut(&id.0).unwrap();
        if let Some(old) = iter.pinned.take() {
            self.cache.unpin(old);
        }
        let iter = self.iters.get_mut(&id.0).unwrap();
        iter.pos = ReservoirPosition {
            chunk_id: chunk,
            index: 0,
        };
        if chunk < self.open_chunk_id {
            self.ensure_resident_blocking(chunk)?;
            self.cache.pin(chunk);
            self.iters.get_mut(&id.0).unwrap().pinned = Some(chunk);
            self.schedule_prefetch(chunk);
        }
        Ok(())
    }

    /// Starts asynchronous loads for the chunks following `chunk`, up to the
    /// configured prefetch depth.
    fn schedule_prefetch(&mut self, chunk: u64) {
        for next in chunk + 1..=chunk + self.cfg.prefetch_depth as u64 {
            if next >= self.durable_upto {
                break; // still in cache by the persistence pin, or open
            }
            if self.cache.contains(next) || self.loads_in_flight.contains_key(&next) {
                continue;
            }
            self.start_load(next);
        }
    }

    fn start_load(&mut self, chunk: u64) {
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.stats.chunk_loads.fetch_add(1, Ordering::Relaxed);
        let _ = self.pool.tx.send(Job::Load {
            path: self.dir.join(chunk_file_name(chunk)),
            chunk_id: chunk,
            done: tx,
        });
        self.loads_in_flight.insert(chunk, rx);
    }

    /// Returns the chunk's decoded events, blocking on a load when it is not
    /// resident. A block with no load in flight counts as a cache miss; a
    /// block on an unfinished prefetch counts as a load wait.
    fn ensure_resident_blocking(
        &mut self,
        chunk: u64,
    ) -> Result<Arc<Vec<Event>>, ReservoirError> {
        if let Some(events) = self.cache.get(chunk) {
            return Ok(events);
        }
        if !self.loads_in_flight.contains_key(&chunk) {
            self.stats.cache_misses.fetch_add(1, Ordering::Relaxed);
            self.start_load(chunk);
        } else {
            self.stats.load_waits.fetch_add(1, Ordering::Relaxed);
        }
        let rx = self.loads_in_flight.remove(&chunk).unwrap();
        let outcome = rx
            .recv()
            .map_err(|_| ReservoirError::LoadFailed("io pool gone".into()))?;
        let events = outcome.result.map_err(ReservoirError::LoadFailed)?;
        self.cache.insert(chunk, Arc::clone(&events));
        self.note_residency();
        Ok(events)
    }

    /// Folds any finished in-flight loads into the cache without blocking.
    fn absorb_finished_loads(&mut self) {
        let finished: Vec<u64> = self
            .loads_in_flight
            .iter()
            .filter(|(_, rx)| !rx.is_empty())
            .map(|(id, _)| *id)
            .collect();
        for id in finished {
            let rx = self.loads_in_flight.remove(&id).unwrap();
            if let Ok(outcome) = rx.recv() {
                if let Ok(events) = outcome.result {
                    self.cache.insert(id, events);
                }
            }
        }
        self.note_residency();
    }

    fn note_residency(&mut self) {
        let hwm = self.cache.resident_high_water_mark();
        self.stats.resident_hwm.fetch_max(hwm, Ordering::Relaxed);
    }

    // -- retention ----------------------------------------------------------

    /// Deletes chunk files wholly older than `watermark`. Rejected when the
    /// watermark is ahead of any head iterator's current event time; never
    /// removes a pinned chunk or breaks chunk-id contiguity.
    pub fn truncate_before(&mut self, watermark: Timestamp) -> Result<usize, ReservoirError> {
        self.absorb_finished_loads();
        // precondition: no head iterator is still behind the watermark
        for iter in self.iters.values() {
            if iter.role != IterRole::Head {
                continue;
            }
            let head_ts = self.iter_lower_bound_ts(iter);
            if let Some(head_ts) = head_ts {
                if watermark > head_ts {
                    return Err(ReservoirError::TruncateUnsafe { watermark, head_ts });
                }
            }
        }
        let mut freed = 0usize;
        while let Some((&id, meta)) = self.metas.first_key_value() {
            if meta.max_ts >= watermark || self.cache.is_pinned(id) {
                break;
            }
            let count = meta.event_count as u64;
            self.owner_disk_op();
            fs::remove_file(self.dir.join(chunk_file_name(id)))?;
            self.metas.remove(&id);
            self.base_ordinal.remove(&id);
            self.cache.remove(id);
            self.first_chunk = id + 1;
            self.truncated_events += count;
            freed += 1;
        }
        if freed > 0 {
            self.truncate_watermark = Some(
                self.truncate_watermark
                    .map_or(watermark, |w| w.max(watermark)),
            );
            write_base_marker(
                &self.dir,
                self.first_chunk,
                self.truncated_events,
                self.truncate_watermark,
            )?;
        }
        Ok(freed)
    }

    /// Every direct disk operation on the owner thread declares itself here;
    /// the ones issued while the append/advance flag is up are counted, and
    /// that count is asserted zero.
    fn owner_disk_op(&self) {
        if self.on_critical_path {
            self.stats
                .critical_path_disk_ops
                .fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Lower bound on the timestamp of the iterator's current event, exact
    /// when the chunk is resident.
    fn iter_lower_bound_ts(&self, iter: &IterState) -> Option<Timestamp> {
        let pos = iter.pos;
        if pos.chunk_id == self.open_chunk_id {
            return self
                .open
                .get(pos.index as usize)
                .map(|e| e.timestamp)
                .or(self.last_ts);
        }
        let meta = self.metas.get(&pos.chunk_id)?;
        if pos.index >= meta.event_count {
            return self.metas.get(&(pos.chunk_id + 1)).map(|m| m.min_ts);
        }
        self.cache
            .peek(pos.chunk_id)
            .and_then(|events| events.get(pos.index as usize).map(|e| e.timestamp))
            .or(Some(meta.min_ts))
    }
}

impl Drop for Reservoir {
    /// Flushes in-flight persists so a successor opening the same directory
    /// never races an outstanding write.
    fn drop(&mut self) {
        self.wait_persisted();
    }
}

fn event_weight(e: &Event) -> usize {
    24 + e
        .fields
        .iter()
        .map(|(k, v)| {
            k.len()
                + match v {
                    crate::model::Value::Str(s) => 8 + s.len(),
                    _ => 9,
                }
        })
        .sum::<usize>()
}

const BASE_MARKER: &str = "BASE";

fn read_base_marker(dir: &Path) -> Result<(u64, u64, Option<Timestamp>), ReservoirError> {
    let path = dir.join(BASE_MARKER);
    match fs::read(&path) {
        Ok(buf) if buf.len() == 24 => Ok((
            u64::from_le_bytes(buf[0..8].try_into().unwrap()),
            u64::from_le_bytes(buf[8..16].try_into().unwrap()),
            Some(i64::from_le_bytes(buf[16..24].try_into().unwrap())),
        )),
        Ok(_) => Ok((0, 0, None)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok((0, 0, None)),
        Err(e) => Err(e.into()),
    }
}

fn write_base_marker(
    dir: &Path,
    first_chunk: u64,
    truncated_events: u64,
    watermark: Option<Timestamp>,
) -> Result<(), ReservoirError> {
    let mut buf = Vec::with_capacity(24);
    buf.extend_from_slice(&first_chunk.to_le_bytes());
    buf.extend_from_slice(&truncated_events.to_le_bytes());
    buf.extend_from_slice(&watermark.unwrap_or(i64::MIN).to_le_bytes());
    let tmp = dir.join(format!("{BASE_MARKER}.tmp"));
    fs::write(&tmp, &buf)?;
    fs::rename(tmp, dir.join(BASE_MARKER))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Iterator sharing

/// A window as seen by the reservoir: covering `(now - offset - size,
/// now - offset]`. Plain sliding windows have offset 0 and therefore share a
/// tail edge; a nonzero offset misaligns both edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowShape {
    pub size_ms: i64,
    pub offset_ms: i64,
}

impl WindowShape {
    pub fn sliding(size_ms: i64) -> Self {
        WindowShape {
            size_ms,
            offset_ms: 0,
        }
    }
}

/// The iterator complement for a set of windows over one reservoir: one head
/// iterator per distinct expiring edge, one tail iterator per distinct
/// arriving edge. All zero-offset sliding windows share a single tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IteratorPlan {
    /// Distinct expiring-edge ages (offset + size), sorted.
    pub head_edges: Vec<i64>,
    /// Distinct arriving-edge ages (offset), sorted.
    pub tail_edges: Vec<i64>,
}

impl IteratorPlan {
    pub fn total(&self) -> usize {
        self.head_edges.len() + self.tail_edges.len()
    }
}

/// Iterator plan for declared sliding windows: every window shares the one
/// arriving-edge (tail) iterator, each distinct size adds a head, so the
/// total is distinct sizes + 1.
pub fn share_tail(windows: &[crate::model::WindowSpec]) -> IteratorPlan {
    let shapes: Vec<WindowShape> = windows
        .iter()
        .map(|w| WindowShape::sliding(w.size_ms))
        .collect();
    plan_iterators(&shapes)
}

/// Computes the shared-iterator plan for a set of windows.
pub fn plan_iterators(windows: &[WindowShape]) -> IteratorPlan {
    let mut head_edges: Vec<i64> = windows.iter().map(|w| w.offset_ms + w.size_ms).collect();
    let mut tail_edges: Vec<i64> = windows.iter().map(|w| w.offset_ms).collect();
    head_edges.sort_unstable();
    head_edges.dedup();
    tail_edges.sort_unstable();
    tail_edges.dedup();
    IteratorPlan {
        head_edges,
        tail_edges,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Value;
    use std::collections::BTreeMap;

    fn ev(ts: Timestamp, id: u64) -> Event {
        let mut fields = BTreeMap::new();
        fields.insert("amount".to_string(), Value::Float(id as f64));
        fields.insert("card".to_string(), Value::Str(format!("c{}", id % 5)));
        Event::new(ts, id, fields)
    }

    fn small_cfg(chunk_events: usize, cache_capacity: usize) -> ReservoirConfig {
        ReservoirConfig {
            chunk_events,
            chunk_bytes: usize::MAX,
            cache_capacity,
            prefetch_depth: 1,
        }
    }

    fn fill(r: &mut Reservoir, n: u64) {
        for i in 0..n {
            r.append(ev(i as i64 * 10, i)).unwrap();
        }
    }

    #[test]
    fn seals_at_event_threshold_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        let (mut r, info) = Reservoir::open(dir.path(), small_cfg(10, 8), pool).unwrap();
        assert_eq!(info.durable_events, 0);
        fill(&mut r, 25);
        assert_eq!(r.total_events(), 25);
        r.wait_persisted();
        assert_eq!(r.durable_events(), 20);
        assert!(dir.path().join(chunk_file_name(0)).exists());
        assert!(dir.path().join(chunk_file_name(1)).exists());
        assert!(!dir.path().join(chunk_file_name(2)).exists());
    }

    #[test]
    fn rejects_non_monotone_append() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(1);
        let (mut r, _) = Reservoir::open(dir.path(), small_cfg(10, 4), pool).unwrap();
        r.append(ev(100, 0)).unwrap();
        assert!(matches!(
            r.append(ev(99, 1)),
            Err(ReservoirError::NonMonotoneAppend { .. })
        ));
        r.append(ev(100, 2)).unwrap(); // equal is fine
    }

    #[test]
    fn full_scan_round_trips_including_open_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        let (mut r, _) = Reservoir::open(dir.path(), small_cfg(16, 4), pool).unwrap();
        let events: Vec<Event> = (0..100).map(|i| ev(i * 7, i as u64)).collect();
        for e in &events {
            r.append(e.clone()).unwrap();
        }
        let it = r.open_iterator(IterRole::Head, IterStart::Time(0)).unwrap();
        let mut got = Vec::new();
        while let Some(e) = r.iterator_next(it).unwrap() {
            got.push(e);
        }
        assert_eq!(got, events);
        assert_eq!(r.stats().snapshot().critical_path_disk_ops, 0);
    }

    #[test]
    fn reopen_recovers_durable_prefix_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        let events: Vec<Event> = (0..64).map(|i| ev(i * 3, i as u64)).collect();
        {
            let (mut r, _) =
                Reservoir::open(dir.path(), small_cfg(16, 8), Arc::clone(&pool)).unwrap();
            for e in &events {
                r.append(e.clone()).unwrap();
            }
            r.wait_persisted(); // 4 sealed chunks, nothing in the open one
        }
        let (mut r, info) = Reservoir::open(dir.path(), small_cfg(16, 8), pool).unwrap();
        assert_eq!(info.durable_events, 64);
        assert_eq!(info.last_durable_ts, Some(63 * 3));
        assert_eq!(
            info.next_position,
            ReservoirPosition {
                chunk_id: 4,
                index: 0
            }
        );
        let it = r.open_iterator(IterRole::Head, IterStart::Time(0)).unwrap();
        let mut got = Vec::new();
        while let Some(e) = r.iterator_next(it).unwrap() {
            got.push(e);
        }
        assert_eq!(got, events);
    }

    #[test]
    fn torn_final_chunk_is_dropped_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        {
            let (mut r, _) =
                Reservoir::open(dir.path(), small_cfg(8, 8), Arc::clone(&pool)).unwrap();
            fill(&mut r, 24);
            r.wait_persisted();
        }
        // simulate a crash mid-write of the last chunk
        let last = dir.path().join(chunk_file_name(2));
        let bytes = fs::read(&last).unwrap();
        fs::write(&last, &bytes[..bytes.len() / 2]).unwrap();
        let (_, info) = Reservoir::open(dir.path(), small_cfg(8, 8), pool).unwrap();
        assert_eq!(info.durable_events, 16);
        assert_eq!(info.next_position.chunk_id, 2);
        assert!(!last.exists());
    }

    #[test]
    fn interior_corruption_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        {
            let (mut r, _) =
                Reservoir::open(dir.path(), small_cfg(8, 8), Arc::clone(&pool)).unwrap();
            fill(&mut r, 24);
            r.wait_persisted();
        }
        let mid = dir.path().join(chunk_file_name(1));
        let mut bytes = fs::read(&mid).unwrap();
        let at = bytes.len() / 2;
        bytes[at] ^= 0x20;
        fs::write(&mid, &bytes).unwrap();
        assert!(matches!(
            Reservoir::open(dir.path(), small_cfg(8, 8), pool),
            Err(ReservoirError::FatalCorruption { chunk_id: 1 })
        ));
    }

    #[test]
    fn sequential_scan_blocks_on_at_most_first_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        let (mut r, _) = Reservoir::open(dir.path(), small_cfg(8, 2), pool).unwrap();
        fill(&mut r, 80); // 10 chunks
        r.wait_persisted();
        // capacity 2 means older chunks were evicted once unpinned
        let before = r.stats().snapshot();
        let it = r.open_iterator(IterRole::Head, IterStart::Time(0)).unwrap();
        let mut n = 0;
        while r.iterator_next(it).unwrap().is_some() {
            n += 1;
        }
        assert_eq!(n, 80);
        let after = r.stats().snapshot();
        // every chunk was read, but blocking misses happen only where no
        // prefetch was in flight; a warm prefetch pipeline absorbs the rest
        let misses = after.cache_misses - before.cache_misses;
        let loads = after.chunk_loads - before.chunk_loads;
        assert!(loads >= 8, "evicted chunks had to be loaded, got {loads}");
        assert!(
            misses <= loads,
            "misses {misses} cannot exceed loads {loads}"
        );
        assert_eq!(after.critical_path_disk_ops, 0);
    }

    #[test]
    fn iterators_pin_their_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        let (mut r, _) = Reservoir::open(dir.path(), small_cfg(8, 4), pool).unwrap();
        fill(&mut r, 40); // 5 chunks
        r.wait_persisted();
        let a = r.open_iterator(IterRole::Head, IterStart::Time(0)).unwrap();
        let b = r
            .open_iterator(IterRole::Tail, IterStart::Time(25 * 10))
            .unwrap();
        assert_eq!(r.pinned_chunks(), 2);
        r.close_iterator(a);
        assert_eq!(r.pinned_chunks(), 1);
        r.close_iterator(b);
        assert_eq!(r.pinned_chunks(), 0);
    }

    #[test]
    fn end_iterator_yields_only_later_appends() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        let (mut r, _) = Reservoir::open(dir.path(), small_cfg(8, 4), pool).unwrap();
        fill(&mut r, 20);
        let it = r.open_iterator(IterRole::Tail, IterStart::End).unwrap();
        assert_eq!(r.iterator_peek_ts(it).unwrap(), None);
        for i in 20..40u64 {
            r.append(ev(i as i64 * 10, i)).unwrap();
        }
        let mut got = Vec::new();
        while let Some(e) = r.iterator_next(it).unwrap() {
            got.push(e.ingest_id);
        }
        assert_eq!(got, (20..40).collect::<Vec<u64>>());
    }

    #[test]
    fn truncation_respects_head_iterators_and_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        let (mut r, _) =
            Reservoir::open(dir.path(), small_cfg(8, 4), Arc::clone(&pool)).unwrap();
        fill(&mut r, 80); // ts 0..790, 10 chunks
        r.wait_persisted();
        let head = r
            .open_iterator(IterRole::Head, IterStart::Time(400))
            .unwrap();
        // watermark ahead of the head's current event is rejected
        assert!(matches!(
            r.truncate_before(500),
            Err(ReservoirError::TruncateUnsafe { .. })
        ));
        // safe watermark removes only chunks wholly older
        let freed = r.truncate_before(400).unwrap();
        assert!(freed >= 4, "freed {freed}");
        assert!(!dir.path().join(chunk_file_name(0)).exists());
        assert_eq!(r.position_of_ordinal(0), None);
        // the head still scans from its position untouched
        assert_eq!(r.iterator_peek_ts(head).unwrap(), Some(400));
        r.close_iterator(head);
        drop(r);
        let (r2, info) = Reservoir::open(dir.path(), small_cfg(8, 4), pool).unwrap();
        // truncated events still count toward the ordinal space
        assert_eq!(info.durable_events, 80);
        assert_eq!(r2.position_of_ordinal(10), None);
        assert!(r2.position_of_ordinal(79).is_some());
    }

    #[test]
    fn time_start_before_watermark_is_out_of_retention() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        let (mut r, _) = Reservoir::open(dir.path(), small_cfg(8, 4), pool).unwrap();
        fill(&mut r, 40);
        r.wait_persisted();
        r.truncate_before(200).unwrap();
        assert!(matches!(
            r.open_iterator(IterRole::Head, IterStart::Time(100)),
            Err(ReservoirError::OutOfRetention(_))
        ));
        assert!(r.open_iterator(IterRole::Head, IterStart::Time(200)).is_ok());
    }

    #[test]
    fn iterator_plan_shares_tails_across_sliding_windows() {
        // two plain sliding windows: two heads, one shared tail
        let plan = plan_iterators(&[WindowShape::sliding(60_000), WindowShape::sliding(300_000)]);
        assert_eq!(plan.head_edges.len(), 2);
        assert_eq!(plan.tail_edges.len(), 1);
        assert_eq!(plan.total(), 3);

        // ten windows with pairwise distinct offsets share nothing
        let windows: Vec<WindowShape> = (0..10)
            .map(|i| WindowShape {
                size_ms: 60_000,
                offset_ms: i * 1000,
            })
            .collect();
        assert_eq!(plan_iterators(&windows).total(), 20);

        // same offset collapses both edges
        let plan = plan_iterators(&[WindowShape::sliding(60_000), WindowShape::sliding(60_000)]);
        assert_eq!(plan.total(), 2);
    }

    #[test]
    fn ordinal_positions_cover_sealed_and_open_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        let (mut r, _) = Reservoir::open(dir.path(), small_cfg(8, 4), pool).unwrap();
        fill(&mut r, 20);
        assert_eq!(
            r.position_of_ordinal(0),
            Some(ReservoirPosition {
                chunk_id: 0,
                index: 0
            })
        );
        assert_eq!(
            r.position_of_ordinal(9),
            Some(ReservoirPosition {
                chunk_id: 1,
                index: 1
            })
        );
        assert_eq!(
            r.position_of_ordinal(17),
            Some(ReservoirPosition {
                chunk_id: 2,
                index: 1
            })
        );
        assert_eq!(r.position_of_ordinal(20), None);
        // an iterator opened at a recovered position resumes exactly there
        let it = r
            .open_iterator(
                IterRole::Head,
                IterStart::Position(r.position_of_ordinal(9).unwrap()),
            )
            .unwrap();
        assert_eq!(r.iterator_next(it).unwrap().unwrap().ingest_id, 9);
    }
}
