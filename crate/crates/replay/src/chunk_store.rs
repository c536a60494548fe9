//! Refcounted shared chunk storage with deallocation decoupled from table
//! locking: a chunk whose count reaches zero is moved to a drop queue and
//! freed outside any table critical section.

use crate::chunk::{Chunk, ChunkKey};
use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

thread_local! {
    static TABLE_CRITICAL_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// RAII marker held while a table lock is held on this thread. The chunk
/// store refuses to deallocate while the depth is non-zero.
pub(crate) struct CriticalSectionGuard;

impl CriticalSectionGuard {
    pub fn enter() -> CriticalSectionGuard {
        TABLE_CRITICAL_DEPTH.with(|d| d.set(d.get() + 1));
        CriticalSectionGuard
    }
}

impl Drop for CriticalSectionGuard {
    fn drop(&mut self) {
        TABLE_CRITICAL_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub(crate) fn in_table_critical_section() -> bool {
    TABLE_CRITICAL_DEPTH.with(|d| d.get() > 0)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    /// Signals a refcounting bug upstream; must never occur in normal
    /// operation.
    #[error("chunk {0} not found in store")]
    NotFound(ChunkKey),
    #[error("chunk {0} already present in store")]
    Duplicate(ChunkKey),
}

struct Slot {
    chunk: Arc<Chunk>,
    refcount: u64,
}

#[derive(Default)]
pub struct ChunkStore {
    slots: Mutex<HashMap<ChunkKey, Slot>>,
    drop_queue: Mutex<Vec<Arc<Chunk>>>,
    next_key: AtomicU64,
    dealloc_violations: AtomicU64,
}

impl ChunkStore {
    pub fn new() -> ChunkStore {
        ChunkStore {
            slots: Mutex::new(HashMap::new()),
            drop_queue: Mutex::new(Vec::new()),
            next_key: AtomicU64::new(1),
            dealloc_violations: AtomicU64::new(0),
        }
    }

    /// Fresh server-side key. Client-proposed keys are remapped through this.
    pub fn next_key(&self) -> ChunkKey {
        ChunkKey(self.next_key.fetch_add(1, Ordering::Relaxed))
    }

    /// Reserves the id space at or above `floor`, used on checkpoint restore
    /// so restored keys are never reissued.
    pub fn reserve_keys_through(&self, floor: u64) {
        self.next_key.fetch_max(floor + 1, Ordering::Relaxed);
    }

    /// Inserts with refcount 0. The chunk stays resident until a later
    /// release transitions its count to zero.
    pub fn insert(&self, chunk: Chunk) -> Result<(), StoreError> {
        let key = chunk.key();
        let mut slots = self.slots.lock().unwrap();
        if slots.contains_key(&key) {
            return Err(StoreError::Duplicate(key));
        }
        slots.insert(
            key,
            Slot {
                chunk: Arc::new(chunk),
                refcount: 0,
            },
        );
        Ok(())
    }

    /// Remaps the chunk onto a fresh server key, inserts it, and returns
    /// the assigned key.
    pub fn insert_remapped(&self, mut chunk: Chunk) -> Result<ChunkKey, StoreError> {
        let key = self.next_key();
        chunk.set_key(key);
        self.insert(chunk)?;
        Ok(key)
    }

    pub fn add_ref(&self, key: ChunkKey) -> Result<u64, StoreError> {
        let mut slots = self.slots.lock().unwrap();
        let slot = slots.get_mut(&key).ok_or(StoreError::NotFound(key))?;
        slot.refcount += 1;
        Ok(slot.refcount)
    }

    /// Decrements the count; at zero the chunk leaves the map and is queued
    /// for deallocation. Releasing a key that is not resident is a
    /// refcounting bug and panics.
    pub fn release_ref(&self, key: ChunkKey) -> u64 {
        let remaining;
        {
            let mut slots = self.slots.lock().unwrap();
            let slot = slots
                .get_mut(&key)
                .unwrap_or_else(|| panic!("release_ref on absent {key}: refcount underflow"));
            assert!(slot.refcount > 0, "release_ref below zero on {key}");
            slot.refcount -= 1;
            remaining = slot.refcount;
            if remaining == 0 {
                let slot = slots.remove(&key).unwrap();
                self.drop_queue.lock().unwrap().push(slot.chunk);
            }
        }
        if remaining == 0 && !in_table_critical_section() {
            self.reclaim();
        }
        remaining
    }

    pub fn release_refs(&self, keys: &[ChunkKey]) {
        for key in keys {
            self.release_ref(*key);
        }
    }

    /// Drains the drop queue, actually freeing chunk memory.
    pub fn reclaim(&self) {
        let pending: Vec<Arc<Chunk>> = std::mem::take(&mut *self.drop_queue.lock().unwrap());
        if !pending.is_empty() && in_table_critical_section() {
            // Instrumentation for the no-dealloc-under-table-lock contract.
            self.dealloc_violations
                .fetch_add(pending.len() as u64, Ordering::Relaxed);
        }
        drop(pending);
    }

    pub fn get(&self, keys: &[ChunkKey]) -> Result<Vec<Arc<Chunk>>, StoreError> {
        let slots = self.slots.lock().unwrap();
        keys.iter()
            .map(|key| {
                slots
                    .get(key)
                    .map(|s| Arc::clone(&s.chunk))
                    .ok_or(StoreError::NotFound(*key))
            })
            .collect()
    }

    pub fn contains(&self, key: ChunkKey) -> bool {
        self.slots.lock().unwrap().contains_key(&key)
    }

    pub fn refcount(&self, key: ChunkKey) -> Option<u64> {
        self.slots.lock().unwrap().get(&key).map(|s| s.refcount)
    }

    /// Number of resident chunks (including freshly inserted, unreferenced
    /// ones).
    pub fn len(&self) -> usize {
        self.slots.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total times a chunk was deallocated while a table lock was held on
    /// the freeing thread. Must stay zero.
    pub fn dealloc_violations(&self) -> u64 {
        self.dealloc_violations.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::Codec;
    use crate::tensor::{Signature, StepStructure, TensorValue};

    fn chunk(key: u64) -> Chunk {
        let step = StepStructure::single("x", TensorValue::scalar_f32(1.0));
        Chunk::build(ChunkKey(key), &[step.clone()], &Signature::of(&step), Codec::Raw).unwrap()
    }

    #[test]
    fn refcount_algebra_removes_at_zero() {
        let store = ChunkStore::new();
        store.insert(chunk(1)).unwrap();
        assert_eq!(store.add_ref(ChunkKey(1)).unwrap(), 1);
        assert_eq!(store.add_ref(ChunkKey(1)).unwrap(), 2);
        assert_eq!(store.release_ref(ChunkKey(1)), 1);
        assert_eq!(store.release_ref(ChunkKey(1)), 0);
        assert!(!store.contains(ChunkKey(1)));
        assert_eq!(store.len(), 0);
    }

    #[test]
    fn shared_chunk_survives_one_release() {
        // Two items referencing one chunk: deleting one leaves it resident.
        let store = ChunkStore::new();
        store.insert(chunk(2)).unwrap();
        store.add_ref(ChunkKey(2)).unwrap();
        store.add_ref(ChunkKey(2)).unwrap();
        store.release_ref(ChunkKey(2));
        assert!(store.contains(ChunkKey(2)));
        assert_eq!(store.refcount(ChunkKey(2)), Some(1));
    }

    #[test]
    #[should_panic(expected = "refcount underflow")]
    fn release_below_zero_panics() {
        let store = ChunkStore::new();
        store.insert(chunk(3)).unwrap();
        store.add_ref(ChunkKey(3)).unwrap();
        store.release_ref(ChunkKey(3));
        store.release_ref(ChunkKey(3));
    }

    #[test]
    fn get_absent_is_not_found() {
        let store = ChunkStore::new();
        assert_eq!(
            store.get(&[ChunkKey(9)]).unwrap_err(),
            StoreError::NotFound(ChunkKey(9))
        );
    }

    #[test]
    fn duplicate_insert_rejected() {
        let store = ChunkStore::new();
        store.insert(chunk(4)).unwrap();
        assert_eq!(
            store.insert(chunk(4)).unwrap_err(),
            StoreError::Duplicate(ChunkKey(4))
        );
    }

    #[test]
    fn release_under_critical_section_defers_dealloc() {
        let store = ChunkStore::new();
        store.insert(chunk(5)).unwrap();
        store.add_ref(ChunkKey(5)).unwrap();
        {
            let _guard = CriticalSectionGuard::enter();
            store.release_ref(ChunkKey(5));
            // Chunk is gone from the map but its memory is still queued.
            assert!(!store.contains(ChunkKey(5)));
            assert!(!store.drop_queue.lock().unwrap().is_empty());
        }
        store.reclaim();
        assert!(store.drop_queue.lock().unwrap().is_empty());
        assert_eq!(store.dealloc_violations(), 0);
    }

    #[test]
    fn random_sequences_keep_count_consistent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let store = ChunkStore::new();
        let mut live: HashMap<u64, u64> = HashMap::new();
        let mut next = 100u64;
        for _ in 0..5_000 {
            match rng.random_range(0..3) {
                0 => {
                    store.insert(chunk(next)).unwrap();
                    store.add_ref(ChunkKey(next)).unwrap();
                    live.insert(next, 1);
                    next += 1;
                }
                1 => {
                    if let Some((&k, _)) = live.iter().next() {
                        store.add_ref(ChunkKey(k)).unwrap();
                        *live.get_mut(&k).unwrap() += 1;
                    }
                }
                _ => {
                    if let Some((&k, _)) = live.iter().next() {
                        let left = store.release_ref(ChunkKey(k));
                        let c = live.get_mut(&k).unwrap();
                        *c -= 1;
                        assert_eq!(left, *c);
                        if *c == 0 {
                            live.remove(&k);
                        }
                    }
                }
            }
        }
        store.reclaim();
        assert_eq!(store.len(), live.len());
        for (&k, &c) in &live {
            assert_eq!(store.refcount(ChunkKey(k)), Some(c));
        }
    }
}
