//! Embedded store for aggregation states with offset-consistent snapshots.
//!
//! The working set is an in-memory map; durability comes from periodic full
//! checkpoints written with an atomic rename discipline. A checkpoint couples
//! the states with the log offsets they reflect and the reservoir's durable
//! event count, so recovery can replay exactly the missing suffix.
//!
//! On-disk layout per checkpoint:
//!   <dir>/<id>/states.bin    all states plus an opaque extra payload
//!   <dir>/<id>/offsets.bin   committed offsets and the reservoir position
//!   <dir>/<id>/MANIFEST      lengths and crc32 of both files, crc-protected
//! The checkpoint directory is staged under a temporary name and renamed into
//! place; a torn write leaves either no directory or an invalid one, and
//! restore falls back to the newest valid checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::messaging::TopicPartition;
use crate::plan::agg::AggState;

const STATES_MAGIC: &[u8; 4] = b"SSST";
const OFFSETS_MAGIC: &[u8; 4] = b"SSOF";
const MANIFEST_MAGIC: &[u8; 4] = b"SSMF";
const FORMAT_VERSION: u32 = 1;

/// Identifies one aggregation state: the metric plus the canonical group key.
/// Both parts are length-prefixed on disk, so the encoding is injective.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct StateKey {
    pub metric_id: String,
    pub group_key: Vec<u8>,
}

/// What the newest valid checkpoint held.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestoredCheckpoint {
    pub id: u64,
    pub offsets: BTreeMap<TopicPartition, u64>,
    /// Reservoir durable event count at snapshot time.
    pub reservoir_durable: u64,
}

pub struct StateStore {
    dir: PathBuf,
    states: BTreeMap<StateKey, AggState>,
    /// Opaque payload checkpointed alongside the states (the engine keeps
    /// hopping-window accumulators and the event-time frontier here).
    extra: Vec<u8>,
    retention: usize,
    next_id: u64,
}

impl StateStore {
    /// Opens the store, restoring from the newest valid checkpoint if one
    /// exists; otherwise starts cold with empty states.
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<(StateStore, Option<RestoredCheckpoint>)> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;

        let mut ids: Vec<u64> = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            if let Some(name) = entry.file_name().to_str() {
                if let Ok(id) = name.parse::<u64>() {
                    ids.push(id);
                }
            }
        }
        ids.sort_unstable();

        let mut store = StateStore {
            dir,
            states: BTreeMap::new(),
            extra: Vec::new(),
            retention: 3,
            next_id: ids.last().map_or(0, |id| id + 1),
        };
        // newest valid checkpoint wins; invalid ones are skipped, not deleted
        for &id in ids.iter().rev() {
            if let Some((states, extra, restored)) = load_checkpoint(&store.dir, id) {
                store.states = states;
                store.extra = extra;
                return Ok((store, Some(restored)));
            }
        }
        Ok((store, None))
    }

    pub fn get(&self, key: &StateKey) -> Option<&AggState> {
        self.states.get(key)
    }

    pub fn put(&mut self, key: StateKey, state: AggState) {
        self.states.insert(key, state);
    }

    pub fn delete(&mut self, key: &StateKey) {
        self.states.remove(key);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &AggState)> {
        self.states.iter()
    }

    /// Replaces the whole working set (the owning processor re-exports its
    /// plan states before every checkpoint).
    pub fn replace_all(&mut self, entries: impl IntoIterator<Item = (StateKey, AggState)>) {
        self.states = entries.into_iter().collect();
    }

    pub fn set_extra(&mut self, extra: Vec<u8>) {
        self.extra = extra;
    }

    pub fn extra(&self) -> &[u8] {
        &self.extra
    }

    /// Checkpoints kept on disk; older ones are pruned after each snapshot.
    pub fn set_retention(&mut self, keep: usize) {
        self.retention = keep.max(1);
    }

    /// Atomically persists the current states together with the offsets they
    /// reflect. On any error the previous checkpoint remains intact.
    pub fn snapshot(
        &mut self,
        offsets: &BTreeMap<TopicPartition, u64>,
        reservoir_durable: u64,
    ) -> io::Result<u64> {
        let id = self.next_id;
        let staging = self.dir.join(format!("{id:016}.tmp"));
        let _ = fs::remove_dir_all(&staging);
        fs::create_dir_all(&staging)?;

        let states = self.encode_states();
        let offs = encode_offsets(offsets, reservoir_durable);
        write_file_synced(&staging.join("states.bin"), &states)?;
        write_file_synced(&staging.join("offsets.bin"), &offs)?;
        let manifest = encode_manifest(id, &states, &offs);
        write_file_synced(&staging.join("MANIFEST"), &manifest)?;

        let finale = self.dir.join(format!("{id}"));
        fs::rename(&staging, &finale)?;
        sync_dir(&self.dir)?;
        self.next_id += 1;
        self.prune();
        Ok(id)
    }

    fn prune(&self) {
        let mut ids: Vec<u64> = match fs::read_dir(&self.dir) {
            Ok(rd) => rd
                .flatten()
                .filter_map(|e| e.file_name().to_str().and_then(|n| n.parse().ok()))
                .collect(),
            Err(_) => return,
        };
        ids.sort_unstable();
        while ids.len() > self.retention {
            let id = ids.remove(0);
            let _ = fs::remove_dir_all(self.dir.join(format!("{id}")));
        }
    }

    fn encode_states(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATES_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.states.len() as u64).to_le_bytes());
        for (key, state) in &self.states {
            out.extend_from_slice(&(key.metric_id.len() as u16).to_le_bytes());
            out.extend_from_slice(key.metric_id.as_bytes());
            out.extend_from_slice(&(key.group_key.len() as u32).to_le_bytes());
            out.extend_from_slice(&key.group_key);
            state.encode(&mut out);
        }
        out.extend_from_slice(&(self.extra.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.extra);
        out
    }
}

fn decode_states(buf: &[u8]) -> Option<(BTreeMap<StateKey, AggState>, Vec<u8>)> {
    let mut pos = 0usize;
    if buf.get(0..4)? != STATES_MAGIC {
        return None;
    }
    pos += 4;
    if read_u32(buf, &mut pos)? != FORMAT_VERSION {
        return None;
    }
    let count = read_u64(buf, &mut pos)?;
    let mut states = BTreeMap::new();
    for _ in 0..count {
        let mlen = read_u16(buf, &mut pos)? as usize;
        let metric_id = std::str::from_utf8(buf.get(pos..pos + mlen)?).ok()?.to_string();
        pos += mlen;
        let glen = read_u32(buf, &mut pos)? as usize;
        let group_key = buf.get(pos..pos + glen)?.to_vec();
        pos += glen;
        let state = AggState::decode(buf, &mut pos)?;
        states.insert(
            StateKey {
                metric_id,
                group_key,
            },
            state,
        );
    }
    let xlen = read_u32(buf, &mut pos)? as usize;
    let extra = buf.get(pos..pos + xlen)?.to_vec();
    pos += xlen;
    (pos == buf.len()).then_some((states, extra))
}

fn encode_offsets(offsets: &BTreeMap<TopicPartition, u64>, reservoir_durable: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OFFSETS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&reservoir_durable.to_le_bytes());
    out.extend_from_slice(&(offsets.len() as u32).to_le_bytes());
    for (tp, offset) in offsets {
        out.extend_from_slice(&(tp.topic.len() as u16).to_le_bytes());
        out.extend_from_slice(tp.topic.as_bytes());
        out.extend_from_slice(&tp.partition.to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
    }
    out
}

fn decode_offsets(buf: &[u8]) -> Option<(BTreeMap<TopicPartition, u64>, u64)> {
    let mut pos = 0usize;
    if buf.get(0..4)? != OFFSETS_MAGIC {
        return None;
    }
    pos += 4;
    if read_u32(buf, &mut pos)? != FORMAT_VERSION {
        return None;
    }
    let reservoir_durable = read_u64(buf, &mut pos)?;
    let count = read_u32(buf, &mut pos)?;
    let mut offsets = BTreeMap::new();
    for _ in 0..count {
        let tlen = read_u16(buf, &mut pos)? as usize;
        let topic = std::str::from_utf8(buf.get(pos..pos + tlen)?).ok()?.to_string();
        pos += tlen;
        let partition = read_u32(buf, &mut pos)?;
        let offset = read_u64(buf, &mut pos)?;
        offsets.insert(TopicPartition { topic, partition }, offset);
    }
    (pos == buf.len()).then_some((offsets, reservoir_durable))
}

fn encode_manifest(id: u64, states: &[u8], offsets: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MANIFEST_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&id.to_le_bytes());
    out.extend_from_slice(&(states.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(states).to_le_bytes());
    out.extend_from_slice(&(offsets.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(offsets).to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// None unless every file is present, sized and checksummed as the manifest
/// says, and decodable.
fn load_checkpoint(
    dir: &Path,
    id: u64,
) -> Option<(BTreeMap<StateKey, AggState>, Vec<u8>, RestoredCheckpoint)> {
    let cp = dir.join(format!("{id}"));
    let manifest = fs::read(cp.join("MANIFEST")).ok()?;
    if manifest.len() != 4 + 4 + 8 + 8 + 4 + 8 + 4 + 4 {
        return None;
    }
    let (body, tail) = manifest.split_at(manifest.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return None;
    }
    let mut pos = 0usize;
    if body.get(0..4)? != MANIFEST_MAGIC {
        return None;
    }
    pos += 4;
    if read_u32(body, &mut pos)? != FORMAT_VERSION {
        return None;
    }
    let manifest_id = read_u64(body, &mut pos)?;
    if manifest_id != id {
        return None;
    }
    let states_len = read_u64(body, &mut pos)?;
    let states_crc = read_u32(body, &mut pos)?;
    let offsets_len = read_u64(body, &mut pos)?;
    let offsets_crc = read_u32(body, &mut pos)?;

    let states_buf = fs::read(cp.join("states.bin")).ok()?;
    let offsets_buf = fs::read(cp.join("offsets.bin")).ok()?;
    if states_buf.len() as u64 != states_len || crc32fast::hash(&states_buf) != states_crc {
        return None;
    }
    if offsets_buf.len() as u64 != offsets_len || crc32fast::hash(&offsets_buf) != offsets_crc {
        return None;
    }
    let (states, extra) = decode_states(&states_buf)?;
    let (offsets, reservoir_durable) = decode_offsets(&offsets_buf)?;
    Some((
        states,
        extra,
        RestoredCheckpoint {
            id,
            offsets,
            reservoir_durable,
        },
    ))
}

fn write_file_synced(path: &Path, buf: &[u8]) -> io::Result<()> {
    fs::write(path, buf)?;
    fs::File::open(path)?.sync_all()
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    fs::File::open(dir)?.sync_all()
}

fn read_u16(buf: &[u8], pos: &mut usize) -> Option<u16> {
    let v = u16::from_le_bytes(buf.get(*pos..*pos + 2)?.try_into().unwrap());
    *pos += 2;
    Some(v)
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

#[cfg(test)]
mod tests {
    use super::*;

    fn key(metric: &str, group: &[u8]) -> StateKey {
        StateKey {
            metric_id: metric.to_string(),
            group_key: group.to_vec(),
        }
    }

    fn tp(topic: &str, partition: u32) -> TopicPartition {
        TopicPartition {
            topic: topic.to_string(),
            partition,
        }
    }

    #[test]
    fn put_get_delete_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (mut store, restored) = StateStore::open(dir.path()).unwrap();
        assert!(restored.is_none());
        store.put(key("m", b"g1"), AggState::Count { n: 7 });
        assert_eq!(store.get(&key("m", b"g1")), Some(&AggState::Count { n: 7 }));
        assert_eq!(store.get(&key("m", b"g2")), None);
        store.delete(&key("m", b"g1"));
        assert!(store.is_empty());
    }

    #[test]
    fn snapshot_restores_states_offsets_and_extra() {
        let dir = tempfile::tempdir().unwrap();
        let mut offsets = BTreeMap::new();
        offsets.insert(tp("events", 0), 123u64);
        offsets.insert(tp("events", 3), 9u64);
        {
            let (mut store, _) = StateStore::open(dir.path()).unwrap();
            store.put(key("m", b"g1"), AggState::Count { n: 5 });
            store.put(
                key("m2", b"g2"),
                AggState::Sum {
                    total: 1.5,
                    n: 2,
                    updates: 3,
                },
            );
            store.set_extra(vec![1, 2, 3]);
            store.snapshot(&offsets, 456).unwrap();
        }
        let (store, restored) = StateStore::open(dir.path()).unwrap();
        let restored = restored.unwrap();
        assert_eq!(restored.offsets, offsets);
        assert_eq!(restored.reservoir_durable, 456);
        assert_eq!(store.len(), 2);
        assert_eq!(store.get(&key("m", b"g1")), Some(&AggState::Count { n: 5 }));
        assert_eq!(store.extra(), &[1, 2, 3]);
    }

    #[test]
    fn empty_store_snapshot_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let (mut store, _) = StateStore::open(dir.path()).unwrap();
        store.snapshot(&BTreeMap::new(), 0).unwrap();
        let (store, restored) = StateStore::open(dir.path()).unwrap();
        assert!(restored.is_some());
        assert!(store.is_empty());
    }

    #[test]
    fn torn_checkpoint_falls_back_to_previous() {
        let dir = tempfile::tempdir().unwrap();
        let (mut store, _) = StateStore::open(dir.path()).unwrap();
        store.put(key("m", b"old"), AggState::Count { n: 1 });
        let first = store.snapshot(&BTreeMap::new(), 10).unwrap();
        store.put(key("m", b"new"), AggState::Count { n: 2 });
        let second = store.snapshot(&BTreeMap::new(), 20).unwrap();
        drop(store);
        // tear the newer checkpoint's states file
        let states = dir.path().join(format!("{second}")).join("states.bin");
        let bytes = fs::read(&states).unwrap();
        fs::write(&states, &bytes[..bytes.len() - 1]).unwrap();
        let (store, restored) = StateStore::open(dir.path()).unwrap();
        assert_eq!(restored.unwrap().id, first);
        assert_eq!(store.len(), 1);
        assert!(store.get(&key("m", b"old")).is_some());
    }

    #[test]
    fn unrenamed_staging_directory_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let (mut store, _) = StateStore::open(dir.path()).unwrap();
        store.snapshot(&BTreeMap::new(), 1).unwrap();
        // simulate a crash before rename: staging dir with valid files
        let staging = dir.path().join("0000000000000099.tmp");
        fs::create_dir_all(&staging).unwrap();
        fs::write(staging.join("states.bin"), b"junk").unwrap();
        let (_, restored) = StateStore::open(dir.path()).unwrap();
        assert_eq!(restored.unwrap().id, 0);
    }

    #[test]
    fn retention_prunes_oldest_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (mut store, _) = StateStore::open(dir.path()).unwrap();
        store.set_retention(2);
        for i in 0..5u64 {
            store.snapshot(&BTreeMap::new(), i).unwrap();
        }
        let mut kept: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .flatten()
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        kept.sort();
        assert_eq!(kept, vec!["3", "4"]);
    }

    #[test]
    fn checkpoint_ids_keep_growing_after_restart() {
        let dir = tempfile::tempdir().unwrap();
        let id0 = {
            let (mut store, _) = StateStore::open(dir.path()).unwrap();
            store.snapshot(&BTreeMap::new(), 0).unwrap()
        };
        let (mut store, _) = StateStore::open(dir.path()).unwrap();
        let id1 = store.snapshot(&BTreeMap::new(), 0).unwrap();
        assert!(id1 > id0);
    }

    #[test]
    fn many_random_puts_last_write_wins() {
        use rand::{Rng, SeedableRng};
        let dir = tempfile::tempdir().unwrap();
        let (mut store, _) = StateStore::open(dir.path()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut expected: BTreeMap<u32, i64> = BTreeMap::new();
        for i in 0..200_000i64 {
            let k: u32 = rng.gen_range(0..50_000);
            store.put(
                key("m", &k.to_le_bytes()),
                AggState::Count { n: i },
            );
            expected.insert(k, i);
        }
        for _ in 0..1000 {
            let k: u32 = rng.gen_range(0..50_000);
            let got = store.get(&key("m", &k.to_le_bytes())).map(|s| match s {
                AggState::Count { n } => *n,
                _ => unreachable!(),
            });
            assert_eq!(got, expected.get(&k).copied());
        }
    }
}
