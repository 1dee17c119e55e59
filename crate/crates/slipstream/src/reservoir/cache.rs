//! Decoded-chunk cache: LRU over unpinned entries, pinned entries never
//! evicted. Resident count may exceed capacity only by the number of pins.

use std::collections::HashMap;
use std::sync::Arc;

use crate::model::Event;

pub struct CacheEntry {
    pub events: Arc<Vec<Event>>,
    pins: u32,
    last_use: u64,
}

pub struct ChunkCache {
    capacity: usize,
    entries: HashMap<u64, CacheEntry>,
    clock: u64,
    resident_hwm: usize,
}

impl ChunkCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        ChunkCache {
            capacity,
            entries: HashMap::new(),
            clock: 0,
            resident_hwm: 0,
        }
    }

    pub fn resident(&self) -> usize {
        self.entries.len()
    }

    pub fn resident_high_water_mark(&self) -> usize {
        self.resident_hwm
    }

    pub fn pinned_count(&self) -> usize {
        self.entries.values().filter(|e| e.pins > 0).count()
    }

    pub fn contains(&self, chunk_id: u64) -> bool {
        self.entries.contains_key(&chunk_id)
    }

    /// Looks up a chunk without touching its LRU stamp.
    pub fn peek(&self, chunk_id: u64) -> Option<&Arc<Vec<Event>>> {
        self.entries.get(&chunk_id).map(|e| &e.events)
    }

    /// Looks up a chunk, refreshing its LRU stamp.
    pub fn get(&mut self, chunk_id: u64) -> Option<Arc<Vec<Event>>> {
        self.clock += 1;
        let clock = self.clock;
        let e = self.entries.get_mut(&chunk_id)?;
        e.last_use = clock;
        Some(Arc::clone(&e.events))
    }

    /// Inserts a decoded chunk and evicts unpinned LRU entries down to
    /// capacity. Inserting an already-resident chunk is a no-op.
    pub fn insert(&mut self, chunk_id: u64, events: Arc<Vec<Event>>) {
        self.clock += 1;
        let clock = self.clock;
        self.entries.entry(chunk_id).or_insert(CacheEntry {
            events,
            pins: 0,
            last_use: clock,
        });
        // never evict what was just inserted; the caller needs it now
        self.evict_over_capacity(Some(chunk_id));
        self.resident_hwm = self.resident_hwm.max(self.entries.len());
    }

    fn evict_over_capacity(&mut self, keep: Option<u64>) {
        while self.entries.len() > self.capacity {
            let victim = self
                .entries
                .iter()
                .filter(|(id, e)| e.pins == 0 && Some(**id) != keep)
                .min_by_key(|(_, e)| e.last_use)
                .map(|(id, _)| *id);
            match victim {
                Some(id) => {
                    self.entries.remove(&id);
                }
                None => break, // everything pinned
            }
        }
    }

    /// Pins a resident chunk; pinned chunks survive eviction.
    pub fn pin(&mut self, chunk_id: u64) {
        let e = self.entries.get_mut(&chunk_id).expect("pin of non-resident chunk");
        e.pins += 1;
    }

    pub fn unpin(&mut self, chunk_id: u64) {
        if let Some(e) = self.entries.get_mut(&chunk_id) {
            debug_assert!(e.pins > 0);
            e.pins = e.pins.saturating_sub(1);
            if e.pins == 0 {
                self.evict_over_capacity(None);
            }
        }
    }

    pub fn pins(&self, chunk_id: u64) -> u32 {
        self.entries.get(&chunk_id).map_or(0, |e| e.pins)
    }

    pub fn is_pinned(&self, chunk_id: u64) -> bool {
        self.pins(chunk_id) > 0
    }

    /// Drops an entry outright (retention truncation). Must not be pinned.
    pub fn remove(&mut self, chunk_id: u64) {
        if let Some(e) = self.entries.get(&chunk_id) {
            assert_eq!(e.pins, 0, "removing pinned chunk {chunk_id}");
            self.entries.remove(&chunk_id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev() -> Arc<Vec<Event>> {
        Arc::new(Vec::new())
    }

    #[test]
    fn lru_eviction_skips_pinned() {
        let mut cache = ChunkCache::new(2);
        cache.insert(0, ev());
        cache.pin(0);
        cache.insert(1, ev());
        cache.insert(2, ev()); // evicts 1 (LRU unpinned), not pinned 0
        assert!(cache.contains(0));
        assert!(!cache.contains(1));
        assert!(cache.contains(2));
    }

    #[test]
    fn all_pinned_exceeds_capacity() {
        let mut cache = ChunkCache::new(2);
        for id in 0..4 {
            cache.insert(id, ev());
            cache.pin(id);
        }
        assert_eq!(cache.resident(), 4);
        assert_eq!(cache.resident_high_water_mark(), 4);
        cache.unpin(3);
        cache.unpin(2);
        assert_eq!(cache.resident(), 2);
    }

    #[test]
    fn get_refreshes_lru_order() {
        let mut cache = ChunkCache::new(2);
        cache.insert(0, ev());
        cache.insert(1, ev());
        cache.get(0);
        cache.insert(2, ev()); // 1 is now LRU
        assert!(cache.contains(0));
        assert!(!cache.contains(1));
    }
}
