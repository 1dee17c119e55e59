//! Orchestration: front-end ingestion, routing and reply collection, and
//! back-end processor units running task processors over the partitioned log.
//!
//! The front-end hashes each event by every topic's routing keys and appends
//! one copy per topic; the task processor owning that (topic, partition)
//! appends it to its reservoir, advances its plan, and publishes a reply
//! fragment. A collector thread joins fragments by ingest id into client
//! responses. Processor units are plain threads: each owns its task
//! processors exclusively, so the event path takes no locks.
//!
//! Recovery: every task processor checkpoints (reservoir flush, then states +
//! offsets snapshot, then offset commit) on a configurable cadence. On a
//! rebalance grant the new owner restores the newest checkpoint, seeks the
//! log to its offsets, and replays through the normal poll loop; events whose
//! ordinal is below the reservoir's durable count are advanced without being
//! re-appended. The restore invariant — reservoir durable count >= events
//! reflected in the checkpoint — holds because the reservoir is flushed
//! before the snapshot is taken.

pub mod reply;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::messaging::{
    FsyncPolicy, GroupCoordinator, Log, LogError, Member, PolledRecord, Record, TopicPartition,
};
use crate::model::{
    validate_config, ConfigViolation, Event, MetricSpec, StreamConfig, Timestamp, Value, ValueType,
    WindowSpec,
};
use crate::plan::agg::AggState;
use crate::plan::{
    HoppingSnapshot, LeafSnapshot, LiveWindowSnapshot, MetricOutput, PlanDag, PlanError,
    PlanSnapshot,
};
use crate::reservoir::{
    IoPool, IterStart, Reservoir, ReservoirConfig, ReservoirError, ReservoirStats, StatsSnapshot,
};
use crate::state_store::{StateKey, StateStore};
use reply::{DeadLetter, ReplyFrame};

/// Engine-level knobs, loadable from TOML. Stream semantics live in
/// StreamConfig; this is deployment shape only.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub data_root: PathBuf,
    /// Processor unit (thread) count.
    pub units: usize,
    /// Background I/O worker threads shared by all reservoirs.
    pub io_threads: usize,
    /// Reservoir cache capacity, in decoded chunks.
    pub cache_capacity: usize,
    pub chunk_events: usize,
    pub chunk_bytes: usize,
    /// Checkpoint after this many processed events per partition...
    pub checkpoint_events: u64,
    /// ...or after this much wall time, whichever comes first.
    pub checkpoint_ms: u64,
    pub fsync_max_delay_ms: u64,
    pub fsync_max_records: u32,
    /// Seed of the routing hash; fixed for reproducible placement.
    pub hash_seed: u64,
    /// How long the collector waits for all fragments of one event.
    pub reply_timeout_ms: u64,
    pub poll_batch: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            data_root: PathBuf::from("data"),
            units: 2,
            io_threads: 2,
            cache_capacity: 220,
            chunk_events: 4096,
            chunk_bytes: 1 << 20,
            checkpoint_events: 10_000,
            checkpoint_ms: 10_000,
            fsync_max_delay_ms: 5,
            fsync_max_records: 64,
            hash_seed: 0x5EED_CAFE,
            reply_timeout_ms: 5_000,
            poll_batch: 256,
        }
    }
}

impl EngineConfig {
    pub fn from_toml(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("engine config serializes")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid stream config: {0:?}")]
    Config(Vec<ConfigViolation>),
    #[error("metric `{0}` has no covering topic")]
    NoCoveringTopic(String),
    #[error("duplicate metric `{0}`")]
    DuplicateMetric(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("field `{0}` is not in the stream schema")]
    UnknownField(String),
    #[error("field `{field}` expects {expected:?}, got {actual:?}")]
    TypeMismatch {
        field: String,
        expected: ValueType,
        actual: ValueType,
    },
    #[error("routing key `{field}` of topic `{topic}` is missing")]
    MissingRoutingKey { topic: String, field: String },
    #[error(transparent)]
    Log(#[from] LogError),
}

/// Internal task-processor failure; any of these halts the partition with an
/// alarm rather than losing data silently.
#[derive(Debug, thiserror::Error)]
enum TaskError {
    #[error(transparent)]
    Reservoir(#[from] ReservoirError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("reservoir durable count {durable} below checkpointed {accepted}")]
    ReservoirBehind { durable: u64, accepted: u64 },
    #[error("checkpoint extra payload is corrupt")]
    BadExtra,
}

/// One joined client response: all fragments for an ingested event, or what
/// arrived before the reply timeout.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub ingest_id: u64,
    pub complete: bool,
    /// Topics that never replied (only when incomplete).
    pub missing_topics: Vec<String>,
    /// Metric values merged across fragments.
    pub metrics: BTreeMap<String, Value>,
    pub event_ts: Timestamp,
}

/// Shared health/behavior counters; all monotone.
#[derive(Debug, Default)]
pub struct EngineCounters {
    pub clamped: AtomicU64,
    pub rejected_old: AtomicU64,
    pub dead_letters: AtomicU64,
    pub duplicate_fragments: AtomicU64,
    pub unknown_fragments: AtomicU64,
    pub malformed_replies: AtomicU64,
    pub incomplete_responses: AtomicU64,
    pub halted_partitions: AtomicU64,
    pub checkpoints: AtomicU64,
    pub restores: AtomicU64,
    /// High-water mark of concurrently executing process calls; bounded by
    /// the number of (topic, partition) pairs.
    pub processing_now: AtomicU64,
    pub processing_hwm: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CountersSnapshot {
    pub clamped: u64,
    pub rejected_old: u64,
    pub dead_letters: u64,
    pub duplicate_fragments: u64,
    pub unknown_fragments: u64,
    pub malformed_replies: u64,
    pub incomplete_responses: u64,
    pub halted_partitions: u64,
    pub checkpoints: u64,
    pub restores: u64,
    pub processing_hwm: u64,
}

impl EngineCounters {
    pub fn snapshot(&self) -> CountersSnapshot {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        CountersSnapshot {
            clamped: g(&self.clamped),
            rejected_old: g(&self.rejected_old),
            dead_letters: g(&self.dead_letters),
            duplicate_fragments: g(&self.duplicate_fragments),
            unknown_fragments: g(&self.unknown_fragments),
            malformed_replies: g(&self.malformed_replies),
            incomplete_responses: g(&self.incomplete_responses),
            halted_partitions: g(&self.halted_partitions),
            checkpoints: g(&self.checkpoints),
            restores: g(&self.restores),
            processing_hwm: g(&self.processing_hwm),
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_millis() as u64
}

/// Seeded FNV-1a over the canonical routing-key values, with a separator so
/// value boundaries cannot collide.
fn route_hash(seed: u64, routing_keys: &[String], fields: &BTreeMap<String, Value>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for key in routing_keys {
        for b in fields[key].canonical() {
            eat(b);
        }
        eat(0xFF);
    }
    h
}

// -- checkpoint payload -------------------------------------------------------

/// Everything a task processor checkpoints beyond the per-group states:
/// counters, the timestamp frontier, mid-stream activation instants, and
/// hopping live-window accumulators. Keyed by metric id / window spec rather
/// than node index, so it survives metric additions and removals.
struct ExtraState {
    accepted: u64,
    clamped: u64,
    rejected_old: u64,
    max_ts: Option<Timestamp>,
    last_event_ts: Option<Timestamp>,
    active_from: Vec<(String, Timestamp)>,
    hopping: Vec<(WindowSpec, Vec<LiveSnap>)>,
}

struct LiveSnap {
    start: Timestamp,
    end: Timestamp,
    /// (leaf's first metric id, group key, state)
    states: Vec<(String, Vec<u8>, AggState)>,
}

const EXTRA_VERSION: u8 = 1;

impl ExtraState {
    fn from_snapshot(snap: &PlanSnapshot, specs: &[WindowSpec], p: &TaskProcessor) -> ExtraState {
        let leaf_id = |i: usize| snap.leaves[i].metric_ids.first().cloned();
        let active_from = snap
            .leaves
            .iter()
            .filter_map(|l| Some((l.metric_ids.first()?.clone(), l.active_from?)))
            .collect();
        let hopping = specs
            .iter()
            .zip(&snap.hopping)
            .filter_map(|(spec, h)| {
                let h = h.as_ref()?;
                let live = h
                    .live
                    .iter()
                    .map(|w| LiveSnap {
                        start: w.start,
                        end: w.end,
                        states: w
                            .states
                            .iter()
                            .filter_map(|(l, k, s)| Some((leaf_id(*l)?, k.clone(), s.clone())))
                            .collect(),
                    })
                    .collect();
                Some((*spec, live))
            })
            .collect();
        ExtraState {
            accepted: p.accepted,
            clamped: p.clamped,
            rejected_old: p.rejected_old,
            max_ts: p.max_ts,
            last_event_ts: snap.last_event_ts,
            active_from,
            hopping,
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(EXTRA_VERSION);
        out.extend_from_slice(&self.accepted.to_le_bytes());
        out.extend_from_slice(&self.clamped.to_le_bytes());
        out.extend_from_slice(&self.rejected_old.to_le_bytes());
        write_opt_ts(&mut out, self.max_ts);
        write_opt_ts(&mut out, self.last_event_ts);
        out.extend_from_slice(&(self.active_from.len() as u32).to_le_bytes());
        for (id, ts) in &self.active_from {
            write_str(&mut out, id);
            out.extend_from_slice(&ts.to_le_bytes());
        }
        out.extend_from_slice(&(self.hopping.len() as u32).to_le_bytes());
        for (spec, live) in &self.hopping {
            out.push(match spec.kind {
                crate::model::WindowKind::Sliding => 0,
                crate::model::WindowKind::Hopping => 1,
                crate::model::WindowKind::Tumbling => 2,
            });
            out.extend_from_slice(&spec.size_ms.to_le_bytes());
            write_opt_ts(&mut out, spec.hop_ms);
            out.extend_from_slice(&(live.len() as u32).to_le_bytes());
            for w in live {
                out.extend_from_slice(&w.start.to_le_bytes());
                out.extend_from_slice(&w.end.to_le_bytes());
                out.extend_from_slice(&(w.states.len() as u32).to_le_bytes());
                for (id, key, state) in &w.states {
                    write_str(&mut out, id);
                    out.extend_from_slice(&(key.len() as u32).to_le_bytes());
                    out.extend_from_slice(key);
                    state.encode(&mut out);
                }
            }
        }
        out
    }

    fn decode(buf: &[u8]) -> Option<ExtraState> {
        let mut pos = 0usize;
        if *buf.first()? != EXTRA_VERSION {
            return None;
        }
        pos += 1;
        let accepted = read_u64(buf, &mut pos)?;
        let clamped = read_u64(buf, &mut pos)?;
        let rejected_old = read_u64(buf, &mut pos)?;
        let max_ts = read_opt_ts(buf, &mut pos)?;
        let last_event_ts = read_opt_ts(buf, &mut pos)?;
        let n = read_u32(buf, &mut pos)? as usize;
        let mut active_from = Vec::with_capacity(n);
        for _ in 0..n {
            let id = read_str(buf, &mut pos)?;
            let ts = read_u64(buf, &mut pos)? as i64;
            active_from.push((id, ts));
        }
        let n = read_u32(buf, &mut pos)? as usize;
        let mut hopping = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = match *buf.get(pos)? {
                0 => crate::model::WindowKind::Sliding,
                1 => crate::model::WindowKind::Hopping,
                2 => crate::model::WindowKind::Tumbling,
                _ => return None,
            };
            pos += 1;
            let size_ms = read_u64(buf, &mut pos)? as i64;
            let hop_ms = read_opt_ts(buf, &mut pos)?;
            let spec = WindowSpec {
                kind,
                size_ms,
                hop_ms,
            };
            let wn = read_u32(buf, &mut pos)? as usize;
            let mut live = Vec::with_capacity(wn);
            for _ in 0..wn {
                let start = read_u64(buf, &mut pos)? as i64;
                let end = read_u64(buf, &mut pos)? as i64;
                let sn = read_u32(buf, &mut pos)? as usize;
                let mut states = Vec::with_capacity(sn);
                for _ in 0..sn {
                    let id = read_str(buf, &mut pos)?;
                    let klen = read_u32(buf, &mut pos)? as usize;
                    let key = buf.get(pos..pos + klen)?.to_vec();
                    pos += klen;
                    let state = AggState::decode(buf, &mut pos)?;
                    states.push((id, key, state));
                }
                live.push(LiveSnap { start, end, states });
            }
            hopping.push((spec, live));
        }
        (pos == buf.len()).then_some(ExtraState {
            accepted,
            clamped,
            rejected_old,
            max_ts,
            last_event_ts,
            active_from,
            hopping,
        })
    }
}

fn write_opt_ts(out: &mut Vec<u8>, ts: Option<Timestamp>) {
    match ts {
        Some(t) => {
            out.push(1);
            out.extend_from_slice(&t.to_le_bytes());
        }
        None => out.push(0),
    }
}

fn read_opt_ts(buf: &[u8], pos: &mut usize) -> Option<Option<Timestamp>> {
    let flag = *buf.get(*pos)?;
    *pos += 1;
    Some(match flag {
        0 => None,
        _ => Some(read_u64(buf, pos)? as i64),
    })
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_str(buf: &[u8], pos: &mut usize) -> Option<String> {
    let len = u16::from_le_bytes(buf.get(*pos..*pos + 2)?.try_into().unwrap()) as usize;
    *pos += 2;
    let s = std::str::from_utf8(buf.get(*pos..*pos + len)?).ok()?.to_string();
    *pos += len;
    Some(s)
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Option<u32> {
    let v = u32::from_le_bytes(buf.get(*pos..*pos + 4)?.try_into().unwrap());
    *pos += 4;
    Some(v)
}

fn read_u64(buf: &[u8], pos: &mut usize) -> Option<u64> {
    let v = u64::from_le_bytes(buf.get(*pos..*pos + 8)?.try_into().unwrap());
    *pos += 8;
    Some(v)
}

// -- task processor -----------------------------------------------------------

/// One (topic, partition)'s worth of state: reservoir + plan + store, plus
/// the replay bookkeeping. Owned by exactly one processor unit thread.
struct TaskProcessor {
    tp: TopicPartition,
    stream_id: String,
    group_id: String,
    reply_tp: TopicPartition,
    dead_tp: TopicPartition,
    reservoir: Reservoir,
    plan: PlanDag,
    store: StateStore,
    /// Next log offset to process; records below it are replay duplicates.
    next_offset: u64,
    /// Events accepted into the reservoir's ordinal space so far.
    accepted: u64,
    /// Reservoir durable count at restore; replayed events below it are
    /// advanced without re-appending.
    durable_floor: u64,
    max_ts: Option<Timestamp>,
    clamped: u64,
    rejected_old: u64,
    events_since_checkpoint: u64,
    last_checkpoint: Instant,
}

impl TaskProcessor {
    /// Restores a partition from its newest checkpoint (or cold) and leaves
    /// the plan attached at the right frontier. The caller seeks the log to
    /// `next_offset` before polling.
    fn restore(tp: &TopicPartition, ctx: &UnitCtx) -> Result<TaskProcessor, TaskError> {
        let base = ctx
            .cfg
            .data_root
            .join("tasks")
            .join(&tp.topic)
            .join(tp.partition.to_string());
        let (store, restored) = StateStore::open(base.join("store"))?;
        let rcfg = ReservoirConfig {
            chunk_events: ctx.cfg.chunk_events,
            chunk_bytes: ctx.cfg.chunk_bytes,
            cache_capacity: ctx.cfg.cache_capacity,
            prefetch_depth: 1,
        };
        let (mut reservoir, rinfo) =
            Reservoir::open(base.join("reservoir"), rcfg, Arc::clone(&ctx.pool))?;
        let metrics = ctx
            .metrics_by_topic
            .lock()
            .get(&tp.topic)
            .cloned()
            .unwrap_or_default();
        let mut plan = PlanDag::build(&metrics);

        let mut accepted = 0u64;
        let mut clamped = 0u64;
        let mut rejected_old = 0u64;
        let mut max_ts = None;
        let mut next_offset = 0u64;
        if let Some(cp) = &restored {
            let extra = ExtraState::decode(store.extra()).ok_or(TaskError::BadExtra)?;
            apply_restored_states(&mut plan, &store, &extra);
            accepted = extra.accepted;
            clamped = extra.clamped;
            rejected_old = extra.rejected_old;
            max_ts = extra.max_ts;
            next_offset = cp.offsets.get(tp).copied().unwrap_or(0);
            if rinfo.durable_events < accepted {
                return Err(TaskError::ReservoirBehind {
                    durable: rinfo.durable_events,
                    accepted,
                });
            }
        }
        if plan.last_event_ts().is_some() {
            // normal restore: heads open at the checkpointed expiry frontier
            plan.attach(&mut reservoir)?;
        } else if rinfo.durable_events > accepted {
            // crash before the first checkpoint left durable events the plan
            // never saw; replay walks them, so heads must start below them
            let start = reservoir
                .position_of_ordinal(accepted)
                .map(IterStart::Position)
                .unwrap_or(IterStart::End);
            plan.attach_at(&mut reservoir, start)?;
        } else {
            plan.attach(&mut reservoir)?;
        }
        ctx.stats.lock().insert(tp.clone(), reservoir.stats());
        ctx.counters.restores.fetch_add(1, Ordering::Relaxed);
        Ok(TaskProcessor {
            tp: tp.clone(),
            stream_id: ctx.stream_id.clone(),
            group_id: ctx.group_id.clone(),
            reply_tp: TopicPartition::new(ctx.reply_topic.clone(), 0),
            dead_tp: TopicPartition::new(ctx.dead_topic.clone(), 0),
            durable_floor: rinfo.durable_events,
            reservoir,
            plan,
            store,
            next_offset,
            accepted,
            max_ts,
            clamped,
            rejected_old,
            events_since_checkpoint: 0,
            last_checkpoint: Instant::now(),
        })
    }

    fn process(
        &mut self,
        log: &Log,
        rec: &PolledRecord,
        counters: &EngineCounters,
    ) -> Result<(), TaskError> {
        let now = counters.processing_now.fetch_add(1, Ordering::Relaxed) + 1;
        counters.processing_hwm.fetch_max(now, Ordering::Relaxed);
        let result = self.process_inner(log, rec, counters);
        counters.processing_now.fetch_sub(1, Ordering::Relaxed);
        result
    }

    fn process_inner(
        &mut self,
        log: &Log,
        rec: &PolledRecord,
        counters: &EngineCounters,
    ) -> Result<(), TaskError> {
        debug_assert_eq!(rec.offset, self.next_offset);
        self.next_offset = rec.offset + 1;
        let mut e = match Event::decode(&rec.record.payload) {
            Ok(e) => e,
            Err(err) => {
                counters.dead_letters.fetch_add(1, Ordering::Relaxed);
                let dl = DeadLetter {
                    reason: format!("event decode: {err}"),
                    payload: rec.record.payload.clone(),
                };
                log.append(
                    &self.dead_tp,
                    &Record::new(self.tp.topic.as_bytes().to_vec(), dl.encode()),
                )?;
                return Ok(());
            }
        };
        if let Some(max) = self.max_ts {
            if e.timestamp < max {
                let largest = self.plan.largest_window_ms();
                if largest > 0 && e.timestamp + largest <= max {
                    // too old to intersect any window ever again: reject but
                    // still answer, so the client's response completes
                    self.rejected_old += 1;
                    counters.rejected_old.fetch_add(1, Ordering::Relaxed);
                    self.emit_reply(log, &e, Vec::new(), rec.record.append_time_ms)?;
                    return Ok(());
                }
                // mildly late: clamp to the partition frontier and flag
                e.timestamp = max;
                self.clamped += 1;
                counters.clamped.fetch_add(1, Ordering::Relaxed);
            }
        }
        self.max_ts = Some(e.timestamp);
        if self.accepted >= self.durable_floor {
            self.reservoir.append(e.clone())?;
        } // else: replaying an event the reservoir already holds durably
        self.accepted += 1;
        self.events_since_checkpoint += 1;
        let outputs = self.plan.advance(&mut self.reservoir, &e)?;
        let entries = reply_entries(&outputs);
        self.emit_reply(log, &e, entries, rec.record.append_time_ms)?;
        Ok(())
    }

    fn emit_reply(
        &self,
        log: &Log,
        e: &Event,
        metrics: Vec<(String, Value)>,
        ingest_wall_ms: u64,
    ) -> Result<(), TaskError> {
        let frame = ReplyFrame {
            ingest_id: e.ingest_id,
            stream_id: self.stream_id.clone(),
            metrics,
            event_ts: e.timestamp,
            ingest_wall_ms,
            reply_wall_ms: now_ms(),
        };
        log.append(
            &self.reply_tp,
            &Record::new(self.tp.topic.as_bytes().to_vec(), frame.encode()),
        )?;
        Ok(())
    }

    fn checkpoint_due(&self, cfg: &EngineConfig) -> bool {
        self.events_since_checkpoint > 0
            && (self.events_since_checkpoint >= cfg.checkpoint_events
                || self.last_checkpoint.elapsed() >= Duration::from_millis(cfg.checkpoint_ms))
    }

    /// Flush reservoir, snapshot states + offsets, commit, then prune the
    /// reservoir prefix no window can reach. The flush-before-snapshot order
    /// is what makes the restore invariant hold.
    fn checkpoint(&mut self, log: &Log, counters: &EngineCounters) -> Result<(), TaskError> {
        self.reservoir.seal_now();
        self.reservoir.wait_persisted();
        debug_assert_eq!(self.reservoir.total_events(), self.accepted);
        let snap = self.plan.export();
        let mut entries = Vec::new();
        for ls in &snap.leaves {
            let Some(first) = ls.metric_ids.first() else {
                continue; // leaf orphaned by remove-metric
            };
            for (k, s) in &ls.groups {
                entries.push((
                    StateKey {
                        metric_id: first.clone(),
                        group_key: k.clone(),
                    },
                    s.clone(),
                ));
            }
        }
        self.store.replace_all(entries);
        let extra = ExtraState::from_snapshot(&snap, &self.plan.window_specs(), self);
        self.store.set_extra(extra.encode());
        let mut offsets = BTreeMap::new();
        offsets.insert(self.tp.clone(), self.next_offset);
        self.store.snapshot(&offsets, self.reservoir.durable_events())?;
        log.commit(&self.group_id, &self.tp, self.next_offset)?;
        if let Some(floor) = self.plan.retention_floor() {
            let _ = self.reservoir.truncate_before(floor);
        }
        self.events_since_checkpoint = 0;
        self.last_checkpoint = Instant::now();
        counters.checkpoints.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }
}

/// Rebuilds the plan's snapshot from the store's key/value states plus the
/// extra payload, tolerating metrics added or removed since the checkpoint.
fn apply_restored_states(plan: &mut PlanDag, store: &StateStore, extra: &ExtraState) {
    let ids = plan.leaf_metric_ids();
    let first_to_idx: HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.first().map(|f| (f.as_str(), i)))
        .collect();
    let mut leaves: Vec<LeafSnapshot> = ids
        .iter()
        .map(|m| LeafSnapshot {
            metric_ids: m.clone(),
            groups: Vec::new(),
            active_from: None,
        })
        .collect();
    for (key, state) in store.iter() {
        if let Some(&i) = first_to_idx.get(key.metric_id.as_str()) {
            leaves[i].groups.push((key.group_key.clone(), state.clone()));
        }
    }
    for (id, ts) in &extra.active_from {
        if let Some(&i) = first_to_idx.get(id.as_str()) {
            leaves[i].active_from = Some(*ts);
        }
    }
    let hopping = plan
        .window_specs()
        .iter()
        .map(|spec| {
            if spec.effective_hop_ms().is_none() {
                return None;
            }
            let (_, live) = extra.hopping.iter().find(|(s, _)| s == spec)?;
            Some(HoppingSnapshot {
                live: live
                    .iter()
                    .map(|w| LiveWindowSnapshot {
                        start: w.start,
                        end: w.end,
                        states: w
                            .states
                            .iter()
                            .filter_map(|(id, k, s)| {
                                let &i = first_to_idx.get(id.as_str())?;
                                Some((i, k.clone(), s.clone()))
                            })
                            .collect(),
                    })
                    .collect(),
            })
        })
        .collect();
    plan.restore(PlanSnapshot {
        last_event_ts: extra.last_event_ts,
        leaves,
        hopping,
    });
}

/// Per-metric reply values from one advance. Sliding metrics produce exactly
/// one evaluation; hopping metrics produce one per live window, and the reply
/// reports the largest (the baseline's most favorable answer).
fn reply_entries(outputs: &[MetricOutput]) -> Vec<(String, Value)> {
    let mut map: BTreeMap<&str, Value> = BTreeMap::new();
    for o in outputs {
        if o.closed {
            continue;
        }
        match map.entry(o.metric_id.as_str()) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(o.value.clone());
            }
            std::collections::btree_map::Entry::Occupied(mut cur) => {
                let better = match (cur.get().as_f64(), o.value.as_f64()) {
                    (Some(a), Some(b)) => b > a,
                    _ => false,
                };
                if better {
                    cur.insert(o.value.clone());
                }
            }
        }
    }
    map.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

// -- processor units ----------------------------------------------------------

enum OpTask {
    AddMetric {
        topic: String,
        metric: MetricSpec,
        ack: Sender<()>,
    },
    RemoveMetric(String, Sender<()>),
    Checkpoint(Sender<()>),
    Shutdown,
}

struct UnitHandle {
    id: usize,
    member_id: String,
    ops_tx: Sender<OpTask>,
    killed: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

/// Everything a unit thread (and its rebalance listener) needs.
struct UnitCtx {
    cfg: EngineConfig,
    stream_id: String,
    group_id: String,
    reply_topic: String,
    dead_topic: String,
    log: Arc<Log>,
    pool: Arc<IoPool>,
    metrics_by_topic: Arc<Mutex<BTreeMap<String, Vec<MetricSpec>>>>,
    procs: Arc<Mutex<HashMap<TopicPartition, TaskProcessor>>>,
    granted: Arc<Mutex<Vec<TopicPartition>>>,
    killed: Arc<AtomicBool>,
    ops_rx: Receiver<OpTask>,
    counters: Arc<EngineCounters>,
    stats: Arc<Mutex<HashMap<TopicPartition, Arc<ReservoirStats>>>>,
}

fn unit_loop(ctx: UnitCtx, member: Member) {
    let mut halted: HashSet<TopicPartition> = HashSet::new();
    loop {
        // a kill simulates a crash: drop everything without checkpointing
        if ctx.killed.load(Ordering::Relaxed) {
            return;
        }
        while let Ok(op) = ctx.ops_rx.try_recv() {
            match op {
                OpTask::Shutdown => {
                    let mut procs = ctx.procs.lock();
                    for p in procs.values_mut() {
                        if let Err(err) = p.checkpoint(&ctx.log, &ctx.counters) {
                            eprintln!("[{}] shutdown checkpoint failed: {err}", p.tp);
                        }
                    }
                    procs.clear();
                    drop(procs);
                    let _ = member.leave();
                    return;
                }
                OpTask::Checkpoint(ack) => {
                    for p in ctx.procs.lock().values_mut() {
                        if let Err(err) = p.checkpoint(&ctx.log, &ctx.counters) {
                            eprintln!("[{}] checkpoint failed: {err}", p.tp);
                        }
                    }
                    let _ = ack.send(());
                }
                OpTask::AddMetric { topic, metric, ack } => {
                    for (tp, p) in ctx.procs.lock().iter_mut() {
                        if tp.topic == topic {
                            if let Err(err) = p.plan.add_metric(&metric, &mut p.reservoir) {
                                eprintln!("[{tp}] add metric failed: {err}");
                            }
                        }
                    }
                    let _ = ack.send(());
                }
                OpTask::RemoveMetric(id, ack) => {
                    for p in ctx.procs.lock().values_mut() {
                        p.plan.remove_metric(&id);
                    }
                    let _ = ack.send(());
                }
            }
        }
        let records = match member.poll(ctx.cfg.poll_batch, Duration::from_millis(5)) {
            Ok(r) => r,
            Err(err) => {
                eprintln!("[{}] poll failed: {err}", member.member_id());
                thread::sleep(Duration::from_millis(10));
                continue;
            }
        };
        // grants queued by the rebalance listener during that poll; restore
        // before touching any records so a granted partition's records are
        // never processed against missing state
        let granted: Vec<TopicPartition> = std::mem::take(&mut *ctx.granted.lock());
        for tp in granted {
            match TaskProcessor::restore(&tp, &ctx) {
                Ok(p) => match member.seek(&tp, p.next_offset) {
                    Ok(()) => {
                        ctx.procs.lock().insert(tp, p);
                    }
                    Err(err) => {
                        eprintln!("[{tp}] seek to checkpoint offset failed: {err}");
                        ctx.counters.halted_partitions.fetch_add(1, Ordering::Relaxed);
                        halted.insert(tp);
                    }
                },
                Err(err) => {
                    eprintln!("[{tp}] restore failed, partition halted: {err}");
                    ctx.counters.halted_partitions.fetch_add(1, Ordering::Relaxed);
                    halted.insert(tp);
                }
            }
        }
        for rec in records {
            if ctx.killed.load(Ordering::Relaxed) {
                return;
            }
            let mut procs = ctx.procs.lock();
            let Some(p) = procs.get_mut(&rec.tp) else {
                assert!(
                    halted.contains(&rec.tp),
                    "record for unowned partition {} (assignment bug)",
                    rec.tp
                );
                continue;
            };
            if rec.offset < p.next_offset {
                continue; // replay duplicate from a pre-seek poll
            }
            assert_eq!(rec.offset, p.next_offset, "offset gap on {}", rec.tp);
            if let Err(err) = p.process(&ctx.log, &rec, &ctx.counters) {
                eprintln!("[{}] processing failed, partition halted: {err}", rec.tp);
                ctx.counters.halted_partitions.fetch_add(1, Ordering::Relaxed);
                procs.remove(&rec.tp);
                halted.insert(rec.tp.clone());
            }
        }
        for p in ctx.procs.lock().values_mut() {
            if p.checkpoint_due(&ctx.cfg) {
                if let Err(err) = p.checkpoint(&ctx.log, &ctx.counters) {
                    eprintln!("[{}] checkpoint failed: {err}", p.tp);
                }
            }
        }
    }
}

// -- collector ----------------------------------------------------------------

struct PendingEntry {
    expected: BTreeSet<String>,
    got: BTreeSet<String>,
    metrics: BTreeMap<String, Value>,
    event_ts: Timestamp,
    deadline: Instant,
}

#[allow(clippy::too_many_arguments)]
fn collector_loop(
    log: Arc<Log>,
    reply_tp: TopicPartition,
    pending: Arc<Mutex<HashMap<u64, PendingEntry>>>,
    counters: Arc<EngineCounters>,
    tx: Sender<Response>,
    running: Arc<AtomicBool>,
) {
    let mut pos = log.next_offset(&reply_tp).unwrap_or(0);
    while running.load(Ordering::Relaxed) {
        let batch = log.read_from(&reply_tp, pos, 1024).unwrap_or_default();
        for (offset, rec) in &batch {
            pos = offset + 1;
            let Some(frame) = ReplyFrame::decode(&rec.payload) else {
                counters.malformed_replies.fetch_add(1, Ordering::Relaxed);
                continue;
            };
            let topic = String::from_utf8_lossy(&rec.key).into_owned();
            let mut pending = pending.lock();
            let Some(entry) = pending.get_mut(&frame.ingest_id) else {
                // completed, expired, or replayed from before a restart
                counters.unknown_fragments.fetch_add(1, Ordering::Relaxed);
                continue;
            };
            if !entry.expected.contains(&topic) || !entry.got.insert(topic) {
                counters.duplicate_fragments.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            entry.metrics.extend(frame.metrics);
            if entry.got.len() == entry.expected.len() {
                let entry = pending.remove(&frame.ingest_id).unwrap();
                let _ = tx.send(Response {
                    ingest_id: frame.ingest_id,
                    complete: true,
                    missing_topics: Vec::new(),
                    metrics: entry.metrics,
                    event_ts: entry.event_ts,
                });
            }
        }
        // expire entries whose fragments never all arrived
        let now = Instant::now();
        let expired: Vec<u64> = pending
            .lock()
            .iter()
            .filter(|(_, e)| e.deadline <= now)
            .map(|(&id, _)| id)
            .collect();
        for id in expired {
            let Some(entry) = pending.lock().remove(&id) else {
                continue;
            };
            counters.incomplete_responses.fetch_add(1, Ordering::Relaxed);
            let _ = tx.send(Response {
                ingest_id: id,
                complete: false,
                missing_topics: entry.expected.difference(&entry.got).cloned().collect(),
                metrics: entry.metrics,
                event_ts: entry.event_ts,
            });
        }
        if batch.is_empty() {
            thread::sleep(Duration::from_micros(500));
        }
    }
}

// -- the engine ---------------------------------------------------------------

pub struct Engine {
    cfg: EngineConfig,
    stream: StreamConfig,
    group_id: String,
    reply_topic: String,
    dead_topic: String,
    log: Arc<Log>,
    coordinator: Arc<GroupCoordinator>,
    pool: Arc<IoPool>,
    metrics_by_topic: Arc<Mutex<BTreeMap<String, Vec<MetricSpec>>>>,
    pending: Arc<Mutex<HashMap<u64, PendingEntry>>>,
    counters: Arc<EngineCounters>,
    stats: Arc<Mutex<HashMap<TopicPartition, Arc<ReservoirStats>>>>,
    responses_rx: Receiver<Response>,
    next_ingest: AtomicU64,
    next_unit: AtomicUsize,
    running: Arc<AtomicBool>,
    units: Mutex<Vec<UnitHandle>>,
    collector: Mutex<Option<JoinHandle<()>>>,
}

impl Engine {
    /// Validates the stream config, opens the log, creates topics, and starts
    /// the configured number of processor units plus the reply collector.
    pub fn start(cfg: EngineConfig, stream: StreamConfig) -> Result<Engine, EngineError> {
        let violations = validate_config(&stream);
        if !violations.is_empty() {
            return Err(EngineError::Config(violations));
        }
        let mut metrics_by_topic: BTreeMap<String, Vec<MetricSpec>> = stream
            .topics
            .iter()
            .map(|t| (t.name.clone(), Vec::new()))
            .collect();
        for m in &stream.metrics {
            let topic = stream
                .covering_topic(m)
                .ok_or_else(|| EngineError::NoCoveringTopic(m.metric_id.clone()))?;
            metrics_by_topic
                .get_mut(&topic.name)
                .unwrap()
                .push(m.clone());
        }

        fs::create_dir_all(&cfg.data_root)?;
        let policy = FsyncPolicy {
            max_delay: Duration::from_millis(cfg.fsync_max_delay_ms),
            max_records: cfg.fsync_max_records,
        };
        let log = Arc::new(Log::open(cfg.data_root.join("log"), policy)?);
        for t in &stream.topics {
            if !log.topic_exists(&t.name) {
                log.create_topic(&t.name, t.partitions)?;
            }
        }
        let reply_topic = format!("{}.replies", stream.stream_id);
        let dead_topic = format!("{}.dead", stream.stream_id);
        for t in [&reply_topic, &dead_topic] {
            if !log.topic_exists(t) {
                log.create_topic(t, 1)?;
            }
        }

        let coordinator = Arc::new(GroupCoordinator::new(Arc::clone(&log)));
        let running = Arc::new(AtomicBool::new(true));
        let pending: Arc<Mutex<HashMap<u64, PendingEntry>>> = Arc::default();
        let counters: Arc<EngineCounters> = Arc::default();
        let (responses_tx, responses_rx) = crossbeam_channel::unbounded();
        let collector = {
            let log = Arc::clone(&log);
            let reply_tp = TopicPartition::new(reply_topic.clone(), 0);
            let pending = Arc::clone(&pending);
            let counters = Arc::clone(&counters);
            let running = Arc::clone(&running);
            thread::Builder::new()
                .name("reply-collector".to_string())
                .spawn(move || collector_loop(log, reply_tp, pending, counters, responses_tx, running))
                .expect("spawn collector")
        };

        let engine = Engine {
            group_id: format!("{}.processors", stream.stream_id),
            reply_topic,
            dead_topic,
            coordinator,
            pool: IoPool::new(cfg.io_threads.max(1)),
            metrics_by_topic: Arc::new(Mutex::new(metrics_by_topic)),
            pending,
            counters,
            stats: Arc::default(),
            responses_rx,
            // ingest ids replayed from the log after a restart must not
            // collide with fresh ones; a coarse wall-clock epoch guarantees it
            next_ingest: AtomicU64::new(now_ms() << 16),
            next_unit: AtomicUsize::new(0),
            running,
            units: Mutex::new(Vec::new()),
            collector: Mutex::new(Some(collector)),
            log,
            cfg,
            stream,
        };
        for _ in 0..engine.cfg.units.max(1) {
            engine.spawn_unit()?;
        }
        Ok(engine)
    }

    pub fn log(&self) -> &Arc<Log> {
        &self.log
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn stream(&self) -> &StreamConfig {
        &self.stream
    }

    pub fn counters(&self) -> CountersSnapshot {
        self.counters.snapshot()
    }

    /// Per-partition reservoir counters, for instrumented benchmarks/tests.
    pub fn reservoir_stats(&self) -> Vec<(TopicPartition, StatsSnapshot)> {
        let mut v: Vec<(TopicPartition, StatsSnapshot)> = self
            .stats
            .lock()
            .iter()
            .map(|(tp, s)| (tp.clone(), s.snapshot()))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Joined client responses, in completion order.
    pub fn responses(&self) -> Receiver<Response> {
        self.responses_rx.clone()
    }

    /// Validates an event against the stream schema, routes one copy to every
    /// topic (hashed by that topic's routing keys), and registers it for
    /// reply collection. Returns the correlation id.
    pub fn ingest(
        &self,
        timestamp: Timestamp,
        fields: BTreeMap<String, Value>,
    ) -> Result<u64, IngestError> {
        for (name, value) in &fields {
            match self.stream.schema.get(name) {
                None => return Err(IngestError::UnknownField(name.clone())),
                Some(expected) if *expected != value.value_type() => {
                    return Err(IngestError::TypeMismatch {
                        field: name.clone(),
                        expected: *expected,
                        actual: value.value_type(),
                    })
                }
                Some(_) => {}
            }
        }
        for topic in &self.stream.topics {
            for key in &topic.routing_keys {
                if !fields.contains_key(key) {
                    return Err(IngestError::MissingRoutingKey {
                        topic: topic.name.clone(),
                        field: key.clone(),
                    });
                }
            }
        }
        let ingest_id = self.next_ingest.fetch_add(1, Ordering::Relaxed);
        let event = Event::new(timestamp, ingest_id, fields);
        let payload = event.encode();
        self.pending.lock().insert(
            ingest_id,
            PendingEntry {
                expected: self.stream.topics.iter().map(|t| t.name.clone()).collect(),
                got: BTreeSet::new(),
                metrics: BTreeMap::new(),
                event_ts: timestamp,
                deadline: Instant::now() + Duration::from_millis(self.cfg.reply_timeout_ms),
            },
        );
        for topic in &self.stream.topics {
            let h = route_hash(self.cfg.hash_seed, &topic.routing_keys, &event.fields);
            let partition = (h % topic.partitions as u64) as u32;
            let mut key = Vec::new();
            for k in &topic.routing_keys {
                event.fields[k].write_canonical(&mut key);
            }
            self.log.append(
                &TopicPartition::new(topic.name.clone(), partition),
                &Record::new(key, payload.clone()),
            )?;
        }
        Ok(ingest_id)
    }

    /// Starts one more processor unit; the group rebalances onto it.
    pub fn spawn_unit(&self) -> Result<usize, EngineError> {
        let id = self.next_unit.fetch_add(1, Ordering::Relaxed);
        let member_id = format!("unit-{id:03}");
        let event_topics: Vec<String> = self.stream.topics.iter().map(|t| t.name.clone()).collect();
        let member = self
            .coordinator
            .join(&self.group_id, &member_id, &event_topics)?;

        let procs: Arc<Mutex<HashMap<TopicPartition, TaskProcessor>>> = Arc::default();
        let granted: Arc<Mutex<Vec<TopicPartition>>> = Arc::default();
        {
            // graceful handoff: checkpoint and drop revoked partitions before
            // the revocation is acknowledged (and thus before the next owner
            // can be granted them)
            let procs = Arc::clone(&procs);
            let granted = Arc::clone(&granted);
            let log = Arc::clone(&self.log);
            let counters = Arc::clone(&self.counters);
            member.set_rebalance_listener(move |delta| {
                for tp in &delta.revoked {
                    if let Some(mut p) = procs.lock().remove(tp) {
                        if let Err(err) = p.checkpoint(&log, &counters) {
                            eprintln!("[{tp}] revoke checkpoint failed: {err}");
                        }
                    }
                }
                granted.lock().extend(delta.granted.iter().cloned());
            });
        }

        let (ops_tx, ops_rx) = crossbeam_channel::unbounded();
        let killed = Arc::new(AtomicBool::new(false));
        let ctx = UnitCtx {
            cfg: self.cfg.clone(),
            stream_id: self.stream.stream_id.clone(),
            group_id: self.group_id.clone(),
            reply_topic: self.reply_topic.clone(),
            dead_topic: self.dead_topic.clone(),
            log: Arc::clone(&self.log),
            pool: Arc::clone(&self.pool),
            metrics_by_topic: Arc::clone(&self.metrics_by_topic),
            procs,
            granted,
            killed: Arc::clone(&killed),
            ops_rx,
            counters: Arc::clone(&self.counters),
            stats: Arc::clone(&self.stats),
        };
        let join = thread::Builder::new()
            .name(member_id.clone())
            .spawn(move || unit_loop(ctx, member))
            .expect("spawn unit");
        self.units.lock().push(UnitHandle {
            id,
            member_id,
            ops_tx,
            killed,
            join: Some(join),
        });
        Ok(id)
    }

    /// Live unit ids.
    pub fn unit_ids(&self) -> Vec<usize> {
        self.units
            .lock()
            .iter()
            .filter(|u| u.join.is_some())
            .map(|u| u.id)
            .collect()
    }

    /// Simulates a crash of one unit: its thread stops without checkpointing
    /// and the coordinator reassigns its partitions. Returns false for an
    /// unknown or already-dead unit.
    pub fn kill_unit(&self, id: usize) -> bool {
        let mut units = self.units.lock();
        let Some(u) = units.iter_mut().find(|u| u.id == id && u.join.is_some()) else {
            return false;
        };
        u.killed.store(true, Ordering::Relaxed);
        // join first: the dead unit's resources (reservoir files) must be
        // fully released before the survivor is granted the partitions
        u.join.take().unwrap().join().ok();
        let _ = self.coordinator.remove_member(&self.group_id, &u.member_id);
        true
    }

    /// Registers a metric on the running engine (applied between messages).
    /// No backfill: the metric reflects events from its registration on.
    pub fn add_metric(&self, metric: MetricSpec) -> Result<(), EngineError> {
        let topic = self
            .stream
            .covering_topic(&metric)
            .ok_or_else(|| EngineError::NoCoveringTopic(metric.metric_id.clone()))?
            .name
            .clone();
        {
            let mut map = self.metrics_by_topic.lock();
            if map
                .values()
                .any(|ms| ms.iter().any(|m| m.metric_id == metric.metric_id))
            {
                return Err(EngineError::DuplicateMetric(metric.metric_id.clone()));
            }
            map.get_mut(&topic).unwrap().push(metric.clone());
        }
        let mut acks = Vec::new();
        for u in self.units.lock().iter() {
            if u.join.is_none() {
                continue;
            }
            let (tx, rx) = crossbeam_channel::bounded(1);
            let op = OpTask::AddMetric {
                topic: topic.clone(),
                metric: metric.clone(),
                ack: tx,
            };
            if u.ops_tx.send(op).is_ok() {
                acks.push(rx);
            }
        }
        for rx in acks {
            // applied between messages; the ack pins the registration point
            let _ = rx.recv_timeout(Duration::from_secs(30));
        }
        Ok(())
    }

    pub fn remove_metric(&self, metric_id: &str) {
        for ms in self.metrics_by_topic.lock().values_mut() {
            ms.retain(|m| m.metric_id != metric_id);
        }
        let mut acks = Vec::new();
        for u in self.units.lock().iter() {
            if u.join.is_none() {
                continue;
            }
            let (tx, rx) = crossbeam_channel::bounded(1);
            if u.ops_tx.send(OpTask::RemoveMetric(metric_id.to_string(), tx)).is_ok() {
                acks.push(rx);
            }
        }
        for rx in acks {
            let _ = rx.recv_timeout(Duration::from_secs(30));
        }
    }

    /// Forces an immediate checkpoint on every unit and waits for it.
    pub fn checkpoint_now(&self) {
        let mut acks = Vec::new();
        for u in self.units.lock().iter() {
            if u.join.is_none() {
                continue;
            }
            let (tx, rx) = crossbeam_channel::bounded(1);
            if u.ops_tx.send(OpTask::Checkpoint(tx)).is_ok() {
                acks.push(rx);
            }
        }
        for rx in acks {
            let _ = rx.recv_timeout(Duration::from_secs(30));
        }
    }

    /// Waits until every ingested event has been answered (or timed out).
    pub fn drain(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.pending.lock().is_empty() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(1));
        }
    }

    /// Graceful stop: every unit checkpoints and leaves, then the collector
    /// stops. Idempotent; also runs on drop.
    pub fn shutdown(&self) {
        {
            let units = self.units.lock();
            for u in units.iter() {
                if u.join.is_some() {
                    let _ = u.ops_tx.send(OpTask::Shutdown);
                }
            }
        }
        let mut units = self.units.lock();
        for u in units.iter_mut() {
            if let Some(j) = u.join.take() {
                j.join().ok();
            }
        }
        drop(units);
        self.running.store(false, Ordering::Relaxed);
        if let Some(j) = self.collector.lock().take() {
            j.join().ok();
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shutdown();
    }
}
