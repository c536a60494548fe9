//! The keyed item collection with atomic insert/sample/update/delete,
//! capacity eviction via the remover, sample-count retirement, rate-limiter
//! gating, and extension hooks.
//!
//! One exclusive lock serializes all mutating operations; blocked inserters
//! and samplers wait on a table-scoped condvar with optional timeouts.
//! Chunk memory is never freed while the lock is held: releases collected
//! during an operation are applied after the lock drops.

use crate::chunk::{Chunk, ChunkKey};
use crate::chunk_store::{ChunkStore, CriticalSectionGuard};
use crate::rate_limiter::{RateLimiter, RateLimiterConfig};
use crate::selector::{
    build_selector, Selector, SelectorConfig, SelectorError, SelectorEvent, SelectorKind,
};
use crate::tensor::Signature;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};
use thiserror::Error;

/// Unique within a table; never reused within a server process lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemKey(pub u64);

impl std::fmt::Display for ItemKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "item:{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub key: ItemKey,
    pub priority: f64,
    /// Chunks spanned by this item, in step order.
    pub chunk_keys: Vec<ChunkKey>,
    /// Rows skipped in the first chunk.
    pub offset: u32,
    /// Total rows (steps) the item covers.
    pub length: u32,
    pub times_sampled: u32,
}

#[derive(Debug, Clone)]
pub struct TableConfig {
    pub name: String,
    pub sampler: SelectorConfig,
    pub remover: SelectorConfig,
    pub max_size: u64,
    /// 0 = unlimited.
    pub max_times_sampled: u32,
    pub rate_limiter: RateLimiterConfig,
    pub signature: Option<Signature>,
    pub rng_seed: u64,
}

/// Item metadata captured at sample time plus the referenced chunk payloads.
#[derive(Debug, Clone)]
pub struct SampledItem {
    pub key: ItemKey,
    pub priority: f64,
    /// After the increment for this sample.
    pub times_sampled: u32,
    pub probability: f64,
    pub table_size: u64,
    pub offset: u32,
    pub length: u32,
    pub chunks: Vec<Arc<Chunk>>,
}

#[derive(Debug, Clone, Default)]
pub struct SampleBatch {
    pub items: Vec<SampledItem>,
    /// Set when the rate-limiter timeout expired before all requested items
    /// were collected; tells a streaming iterator it is safe to end.
    pub end_of_data: bool,
}

/// Snapshot of table counters handed to extension callbacks.
#[derive(Debug, Clone, Copy)]
pub struct ExtensionContext {
    pub table_size: usize,
    pub inserts: u64,
    pub samples: u64,
    pub deletes: u64,
    pub limiter_diff: f64,
}

/// Callbacks run while the table lock is held, atomically with the
/// triggering operation. They must be bounded-latency and must not call
/// back into the table.
pub trait TableExtension: Send {
    fn on_insert(&mut self, _item: &Item, _ctx: &ExtensionContext) {}
    fn on_sample(&mut self, _item: &Item, _ctx: &ExtensionContext) {}
    fn on_update(&mut self, _item: &Item, _ctx: &ExtensionContext) {}
    fn on_delete(&mut self, _item: &Item, _ctx: &ExtensionContext) {}
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TableError {
    #[error("operation timed out while blocked by the rate limiter")]
    Timeout,
    #[error("item references chunk {0} which is not resident")]
    MissingChunk(ChunkKey),
    #[error("item {0} not found")]
    NotFound(ItemKey),
    #[error("invalid item: {0}")]
    InvalidItem(String),
    #[error("chunk signature does not match table signature")]
    SignatureMismatch,
    #[error("invalid table config: {0}")]
    InvalidConfig(String),
    #[error("selector inconsistency: {0}")]
    Selector(#[from] SelectorError),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("table {table} failed audit: {detail}")]
pub struct AuditError {
    pub table: String,
    pub detail: String,
}

/// Config summary plus live counters, as reported by server info calls.
#[derive(Debug, Clone, PartialEq)]
pub struct TableInfo {
    pub name: String,
    pub size: u64,
    pub max_size: u64,
    pub max_times_sampled: u32,
    pub sampler: SelectorKind,
    pub remover: SelectorKind,
    pub inserts: u64,
    pub samples: u64,
    pub deletes: u64,
}

pub(crate) struct TableState {
    pub(crate) items: HashMap<ItemKey, Item>,
    pub(crate) sampler: Box<dyn Selector>,
    pub(crate) remover: Box<dyn Selector>,
    pub(crate) limiter: RateLimiter,
    rng: ChaCha8Rng,
    extensions: Vec<Box<dyn TableExtension>>,
}

impl TableState {
    fn ctx(&self) -> ExtensionContext {
        ExtensionContext {
            table_size: self.items.len(),
            inserts: self.limiter.inserts(),
            samples: self.limiter.samples(),
            deletes: self.limiter.deletes(),
            limiter_diff: self.limiter.diff(),
        }
    }

    fn run_extensions(&mut self, item: &Item, hook: ExtensionHook) {
        let ctx = self.ctx();
        let mut extensions = std::mem::take(&mut self.extensions);
        for ext in &mut extensions {
            match hook {
                ExtensionHook::Insert => ext.on_insert(item, &ctx),
                ExtensionHook::Sample => ext.on_sample(item, &ctx),
                ExtensionHook::Update => ext.on_update(item, &ctx),
                ExtensionHook::Delete => ext.on_delete(item, &ctx),
            }
        }
        self.extensions = extensions;
    }
}

#[derive(Clone, Copy)]
enum ExtensionHook {
    Insert,
    Sample,
    Update,
    Delete,
}

pub struct Table {
    config: TableConfig,
    store: Arc<ChunkStore>,
    state: Mutex<TableState>,
    cond: Condvar,
}

impl Table {
    pub fn new(config: TableConfig, store: Arc<ChunkStore>) -> Result<Table, TableError> {
        Table::with_extensions(config, store, Vec::new())
    }

    pub fn with_extensions(
        config: TableConfig,
        store: Arc<ChunkStore>,
        extensions: Vec<Box<dyn TableExtension>>,
    ) -> Result<Table, TableError> {
        if config.max_size == 0 {
            return Err(TableError::InvalidConfig("max_size must be >= 1".into()));
        }
        if config.name.is_empty() {
            return Err(TableError::InvalidConfig("name must be non-empty".into()));
        }
        let state = TableState {
            items: HashMap::new(),
            sampler: build_selector(&config.sampler),
            remover: build_selector(&config.remover),
            limiter: RateLimiter::new(config.rate_limiter),
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            extensions,
        };
        Ok(Table {
            config,
            store,
            state: Mutex::new(state),
            cond: Condvar::new(),
        })
    }

    /// Rebuilds a table from checkpointed state: items are replayed in
    /// insertion order so deterministic selectors resume exactly where they
    /// left off. The rng is re-seeded from config.
    pub fn restore(
        config: TableConfig,
        store: Arc<ChunkStore>,
        counters: (u64, u64, u64),
        items_in_insertion_order: Vec<Item>,
        extensions: Vec<Box<dyn TableExtension>>,
    ) -> Result<Table, TableError> {
        let table = Table::with_extensions(config, store, extensions)?;
        {
            let mut state = table.state.lock().unwrap();
            for item in items_in_insertion_order {
                table.validate_item(&item)?;
                for ck in &item.chunk_keys {
                    table
                        .store
                        .add_ref(*ck)
                        .map_err(|_| TableError::MissingChunk(*ck))?;
                }
                let ev = SelectorEvent::Inserted {
                    key: item.key,
                    priority: item.priority,
                };
                state.sampler.observe(&ev)?;
                state.remover.observe(&ev)?;
                state.items.insert(item.key, item);
            }
            state
                .limiter
                .restore_counters(counters.0, counters.1, counters.2);
        }
        Ok(table)
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn config(&self) -> &TableConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<ChunkStore> {
        &self.store
    }

    fn validate_item(&self, item: &Item) -> Result<(), TableError> {
        if item.length == 0 {
            return Err(TableError::InvalidItem("length must be >= 1".into()));
        }
        if item.chunk_keys.is_empty() {
            return Err(TableError::InvalidItem("no chunk references".into()));
        }
        if !item.priority.is_finite() || item.priority < 0.0 {
            return Err(TableError::InvalidItem(format!(
                "priority {} must be finite and >= 0",
                item.priority
            )));
        }
        let chunks = self
            .store
            .get(&item.chunk_keys)
            .map_err(|e| match e {
                crate::chunk_store::StoreError::NotFound(k) => TableError::MissingChunk(k),
                other => TableError::InvalidItem(other.to_string()),
            })?;
        if let Some(signature) = &self.config.signature {
            for chunk in &chunks {
                if chunk.signature() != signature {
                    return Err(TableError::SignatureMismatch);
                }
            }
        }
        let total_rows: u64 = chunks.iter().map(|c| c.num_rows() as u64).sum();
        if item.offset >= chunks[0].num_rows() {
            return Err(TableError::InvalidItem(format!(
                "offset {} out of range for first chunk of {} rows",
                item.offset,
                chunks[0].num_rows()
            )));
        }
        if item.offset as u64 + item.length as u64 > total_rows {
            return Err(TableError::InvalidItem(format!(
                "offset {} + length {} exceeds {} referenced rows",
                item.offset, item.length, total_rows
            )));
        }
        Ok(())
    }

    fn wait_for<'a>(
        &self,
        mut guard: MutexGuard<'a, TableState>,
        deadline: Option<Instant>,
        pred: impl Fn(&TableState) -> bool,
    ) -> (MutexGuard<'a, TableState>, bool) {
        loop {
            if pred(&guard) {
                return (guard, true);
            }
            match deadline {
                None => guard = self.cond.wait(guard).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return (guard, false);
                    }
                    guard = self.cond.wait_timeout(guard, d - now).unwrap().0;
                }
            }
        }
    }

    fn delete_locked(
        state: &mut TableState,
        key: ItemKey,
        released: &mut Vec<ChunkKey>,
    ) -> Result<Item, TableError> {
        let item = state.items.remove(&key).ok_or(TableError::NotFound(key))?;
        let ev = SelectorEvent::Deleted { key };
        state.sampler.observe(&ev)?;
        state.remover.observe(&ev)?;
        state.limiter.record_delete();
        released.extend_from_slice(&item.chunk_keys);
        state.run_extensions(&item, ExtensionHook::Delete);
        Ok(item)
    }

    /// Inserts a new item, or reassigns the priority of an existing key.
    /// A reassignment is a metadata update: it does not count as an SPI
    /// insert and never triggers eviction. A true insert waits for limiter
    /// admission and, at capacity, first evicts the remover's pick.
    pub fn insert_or_assign(
        &self,
        item: Item,
        timeout: Option<Duration>,
    ) -> Result<(), TableError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut released = Vec::new();
        let result = self.insert_or_assign_inner(item, deadline, &mut released);
        self.store.release_refs(&released);
        result
    }

    fn insert_or_assign_inner(
        &self,
        item: Item,
        deadline: Option<Instant>,
        released: &mut Vec<ChunkKey>,
    ) -> Result<(), TableError> {
        let state = self.state.lock().unwrap();
        let _cs = CriticalSectionGuard::enter();

        if state.items.contains_key(&item.key) {
            let mut state = state;
            let stored = state.items.get_mut(&item.key).unwrap();
            stored.priority = item.priority;
            let snapshot = stored.clone();
            let ev = SelectorEvent::Updated {
                key: item.key,
                priority: item.priority,
            };
            state.sampler.observe(&ev)?;
            state.remover.observe(&ev)?;
            state.run_extensions(&snapshot, ExtensionHook::Update);
            self.cond.notify_all();
            return Ok(());
        }

        let (mut state, admitted) =
            self.wait_for(state, deadline, |s| s.limiter.can_insert());
        if !admitted {
            return Err(TableError::Timeout);
        }
        // Key may have appeared while we were blocked.
        if state.items.contains_key(&item.key) {
            drop(state);
            return self.insert_or_assign_inner(item, deadline, released);
        }
        self.validate_item(&item)?;
        if state.items.len() as u64 >= self.config.max_size {
            let draw = state.rng.random::<f64>();
            let victim = state.remover.select(draw)?.key;
            Self::delete_locked(&mut state, victim, released)?;
        }
        for ck in &item.chunk_keys {
            self.store
                .add_ref(*ck)
                .map_err(|_| TableError::MissingChunk(*ck))?;
        }
        let ev = SelectorEvent::Inserted {
            key: item.key,
            priority: item.priority,
        };
        state.sampler.observe(&ev)?;
        state.remover.observe(&ev)?;
        state.items.insert(item.key, item.clone());
        state.limiter.record_insert();
        state.run_extensions(&item, ExtensionHook::Insert);
        self.cond.notify_all();
        Ok(())
    }

    /// Collects up to `n` items, each selection individually atomic. On
    /// limiter timeout the items gathered so far are returned with
    /// `end_of_data` set.
    pub fn sample(&self, n: usize, timeout: Option<Duration>) -> Result<SampleBatch, TableError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut batch = SampleBatch::default();
        for _ in 0..n {
            let mut released = Vec::new();
            let result = self.sample_one(deadline, &mut released);
            self.store.release_refs(&released);
            match result? {
                Some(item) => batch.items.push(item),
                None => {
                    batch.end_of_data = true;
                    break;
                }
            }
        }
        Ok(batch)
    }

    fn sample_one(
        &self,
        deadline: Option<Instant>,
        released: &mut Vec<ChunkKey>,
    ) -> Result<Option<SampledItem>, TableError> {
        let state = self.state.lock().unwrap();
        let _cs = CriticalSectionGuard::enter();
        let (mut state, admitted) =
            self.wait_for(state, deadline, |s| s.limiter.can_sample(s.items.len()));
        if !admitted {
            return Ok(None);
        }
        let draw = state.rng.random::<f64>();
        let selection = state.sampler.select(draw)?;
        let table_size = state.items.len() as u64;
        let item = state
            .items
            .get_mut(&selection.key)
            .ok_or(TableError::NotFound(selection.key))?;
        item.times_sampled += 1;
        let snapshot = item.clone();
        state.limiter.record_sample();
        state.run_extensions(&snapshot, ExtensionHook::Sample);
        let chunks = self
            .store
            .get(&snapshot.chunk_keys)
            .map_err(|e| TableError::InvalidItem(e.to_string()))?;
        if self.config.max_times_sampled > 0
            && snapshot.times_sampled >= self.config.max_times_sampled
        {
            Self::delete_locked(&mut state, snapshot.key, released)?;
        }
        self.cond.notify_all();
        Ok(Some(SampledItem {
            key: snapshot.key,
            priority: snapshot.priority,
            times_sampled: snapshot.times_sampled,
            probability: selection.probability,
            table_size,
            offset: snapshot.offset,
            length: snapshot.length,
            chunks,
        }))
    }

    /// Applies priority updates atomically; unknown keys are skipped (in
    /// distributed use, learners race with evictions). Returns the number
    /// applied.
    pub fn update_priorities(&self, updates: &[(ItemKey, f64)]) -> usize {
        let mut state = self.state.lock().unwrap();
        let _cs = CriticalSectionGuard::enter();
        let mut applied = 0;
        for (key, priority) in updates {
            if !priority.is_finite() || *priority < 0.0 {
                continue;
            }
            let Some(item) = state.items.get_mut(key) else {
                continue;
            };
            item.priority = *priority;
            let snapshot = item.clone();
            let ev = SelectorEvent::Updated {
                key: *key,
                priority: *priority,
            };
            state.sampler.observe(&ev).expect("selector tracks items");
            state.remover.observe(&ev).expect("selector tracks items");
            state.run_extensions(&snapshot, ExtensionHook::Update);
            applied += 1;
        }
        applied
    }

    pub fn delete(&self, key: ItemKey) -> Result<(), TableError> {
        let mut released = Vec::new();
        let result = {
            let mut state = self.state.lock().unwrap();
            let _cs = CriticalSectionGuard::enter();
            let r = Self::delete_locked(&mut state, key, &mut released).map(|_| ());
            self.cond.notify_all();
            r
        };
        self.store.release_refs(&released);
        result
    }

    pub fn size(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    pub fn info(&self) -> TableInfo {
        let state = self.state.lock().unwrap();
        TableInfo {
            name: self.config.name.clone(),
            size: state.items.len() as u64,
            max_size: self.config.max_size,
            max_times_sampled: self.config.max_times_sampled,
            sampler: self.config.sampler.kind,
            remover: self.config.remover.kind,
            inserts: state.limiter.inserts(),
            samples: state.limiter.samples(),
            deletes: state.limiter.deletes(),
        }
    }

    /// Verifies selector/table key-set agreement, chunk residency,
    /// per-item invariants, and limiter bookkeeping.
    pub fn audit(&self) -> Result<(), AuditError> {
        let state = self.state.lock().unwrap();
        let fail = |detail: String| {
            Err(AuditError {
                table: self.config.name.clone(),
                detail,
            })
        };
        let item_keys: std::collections::HashSet<ItemKey> =
            state.items.keys().copied().collect();
        for (label, sel) in [("sampler", &state.sampler), ("remover", &state.remover)] {
            let keys: std::collections::HashSet<ItemKey> = sel.keys().into_iter().collect();
            if keys != item_keys {
                return fail(format!(
                    "{label} tracks {} keys, table holds {}",
                    keys.len(),
                    item_keys.len()
                ));
            }
        }
        if state.items.len() as u64 > self.config.max_size {
            return fail(format!(
                "size {} exceeds max_size {}",
                state.items.len(),
                self.config.max_size
            ));
        }
        for item in state.items.values() {
            for ck in &item.chunk_keys {
                if !self.store.contains(*ck) {
                    return fail(format!("item {} references missing {ck}", item.key));
                }
            }
            if self.config.max_times_sampled > 0
                && item.times_sampled > self.config.max_times_sampled
            {
                return fail(format!(
                    "item {} sampled {} times, cap {}",
                    item.key, item.times_sampled, self.config.max_times_sampled
                ));
            }
        }
        let expect_diff = state.limiter.config().samples_per_insert * state.limiter.inserts() as f64
            - state.limiter.samples() as f64;
        if (state.limiter.diff() - expect_diff).abs() > 1e-6 {
            return fail(format!(
                "limiter diff {} not recomputable from counters (expected {expect_diff})",
                state.limiter.diff()
            ));
        }
        Ok(())
    }

    /// All items in selector insertion order, for introspection and
    /// state-comparison tests. Takes the table lock.
    pub fn snapshot_items(&self) -> Vec<Item> {
        let state = self.state.lock().unwrap();
        state
            .sampler
            .entries()
            .into_iter()
            .map(|(key, _)| state.items[&key].clone())
            .collect()
    }

    pub(crate) fn lock_state(&self) -> MutexGuard<'_, TableState> {
        self.state.lock().unwrap()
    }

    /// Items in selector insertion order plus limiter counters, for
    /// checkpointing. Caller must hold the state lock via `lock_state`.
    pub(crate) fn snapshot_locked(&self, state: &TableState) -> TableSnapshot {
        let items = state
            .sampler
            .entries()
            .into_iter()
            .map(|(key, _)| state.items[&key].clone())
            .collect();
        TableSnapshot {
            inserts: state.limiter.inserts(),
            samples: state.limiter.samples(),
            deletes: state.limiter.deletes(),
            items,
        }
    }

    #[cfg(test)]
    fn corrupt_sampler_for_test(&self, key: ItemKey) {
        let mut state = self.state.lock().unwrap();
        state
            .sampler
            .observe(&SelectorEvent::Deleted { key })
            .unwrap();
    }
}

pub(crate) struct TableSnapshot {
    pub inserts: u64,
    pub samples: u64,
    pub deletes: u64,
    /// Insertion order.
    pub items: Vec<Item>,
}

/// Built-in extension counting items and rows flowing through a table.
#[derive(Debug, Default)]
pub struct TableStats {
    pub items_inserted: std::sync::atomic::AtomicU64,
    pub items_sampled: std::sync::atomic::AtomicU64,
    pub items_deleted: std::sync::atomic::AtomicU64,
    pub priority_updates: std::sync::atomic::AtomicU64,
    pub rows_inserted: std::sync::atomic::AtomicU64,
    pub rows_sampled: std::sync::atomic::AtomicU64,
}

pub struct StatsExtension {
    stats: Arc<TableStats>,
}

impl StatsExtension {
    pub fn new() -> (StatsExtension, Arc<TableStats>) {
        let stats = Arc::new(TableStats::default());
        (
            StatsExtension {
                stats: Arc::clone(&stats),
            },
            stats,
        )
    }
}

impl TableExtension for StatsExtension {
    fn on_insert(&mut self, item: &Item, _ctx: &ExtensionContext) {
        use std::sync::atomic::Ordering::Relaxed;
        self.stats.items_inserted.fetch_add(1, Relaxed);
        self.stats.rows_inserted.fetch_add(item.length as u64, Relaxed);
    }
    fn on_sample(&mut self, item: &Item, _ctx: &ExtensionContext) {
        use std::sync::atomic::Ordering::Relaxed;
        self.stats.items_sampled.fetch_add(1, Relaxed);
        self.stats.rows_sampled.fetch_add(item.length as u64, Relaxed);
    }
    fn on_update(&mut self, _item: &Item, _ctx: &ExtensionContext) {
        use std::sync::atomic::Ordering::Relaxed;
        self.stats.priority_updates.fetch_add(1, Relaxed);
    }
    fn on_delete(&mut self, _item: &Item, _ctx: &ExtensionContext) {
        use std::sync::atomic::Ordering::Relaxed;
        self.stats.items_deleted.fetch_add(1, Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::Codec;
    use crate::tensor::{Signature, StepStructure, TensorValue};
    use std::sync::atomic::Ordering::Relaxed;

    fn test_step(v: f32) -> StepStructure {
        StepStructure::single("x", TensorValue::scalar_f32(v))
    }

    /// One single-row chunk per item, inserted into the store.
    fn make_item(store: &ChunkStore, key: u64, priority: f64) -> Item {
        let step = test_step(key as f32);
        let ck = store.next_key();
        let chunk = Chunk::build(ck, &[step.clone()], &Signature::of(&step), Codec::Raw).unwrap();
        store.insert(chunk).unwrap();
        Item {
            key: ItemKey(key),
            priority,
            chunk_keys: vec![ck],
            offset: 0,
            length: 1,
            times_sampled: 0,
        }
    }

    fn basic_config(name: &str) -> TableConfig {
        TableConfig {
            name: name.into(),
            sampler: SelectorConfig::fifo(),
            remover: SelectorConfig::fifo(),
            max_size: 1000,
            max_times_sampled: 0,
            rate_limiter: RateLimiterConfig::min_size(1),
            signature: None,
            rng_seed: 1,
        }
    }

    #[test]
    fn queue_table_drains_in_insert_order() {
        let store = Arc::new(ChunkStore::new());
        let mut config = basic_config("q");
        config.max_size = 10;
        config.max_times_sampled = 1;
        config.rate_limiter = RateLimiterConfig::queue(10).unwrap();
        let table = Table::new(config, Arc::clone(&store)).unwrap();
        for k in 1..=3 {
            let item = make_item(&store, k, 1.0);
            table.insert_or_assign(item, None).unwrap();
        }
        let batch = table.sample(3, Some(Duration::from_millis(100))).unwrap();
        let keys: Vec<u64> = batch.items.iter().map(|i| i.key.0).collect();
        assert_eq!(keys, vec![1, 2, 3]);
        assert!(!batch.end_of_data);
        assert_eq!(table.size(), 0);
        // Retired items released their chunks.
        assert_eq!(store.len(), 0);
    }

    #[test]
    fn full_table_evicts_oldest_with_fifo_remover() {
        let store = Arc::new(ChunkStore::new());
        let mut config = basic_config("evict");
        config.max_size = 10;
        let table = Table::new(config, Arc::clone(&store)).unwrap();
        for k in 0..15 {
            table.insert_or_assign(make_item(&store, k, 1.0), None).unwrap();
            assert!(table.size() <= 10);
        }
        assert_eq!(table.size(), 10);
        let batch = table.sample(1, None).unwrap();
        // Keys 0..5 were evicted; FIFO sampler sees 5 first.
        assert_eq!(batch.items[0].key, ItemKey(5));
        table.audit().unwrap();
    }

    #[test]
    fn priority_reassignment_is_not_an_insert() {
        let store = Arc::new(ChunkStore::new());
        let mut config = basic_config("assign");
        config.sampler = SelectorConfig::prioritized(1.0);
        let table = Table::new(config, Arc::clone(&store)).unwrap();
        table.insert_or_assign(make_item(&store, 1, 2.0), None).unwrap();
        let inserts_before = table.info().inserts;
        let mut update = make_item(&store, 1, 9.0);
        // Reuse the same key with a new priority.
        update.key = ItemKey(1);
        table.insert_or_assign(update, None).unwrap();
        let info = table.info();
        assert_eq!(info.inserts, inserts_before);
        assert_eq!(info.size, 1);
        table.audit().unwrap();
    }

    #[test]
    fn insert_blocked_at_spi_bound_times_out() {
        let store = Arc::new(ChunkStore::new());
        let mut config = basic_config("spi");
        config.rate_limiter =
            RateLimiterConfig::sample_to_insert_ratio(0, 1.0, 1.0).unwrap();
        let table = Table::new(config, Arc::clone(&store)).unwrap();
        table.insert_or_assign(make_item(&store, 1, 1.0), None).unwrap();
        let err = table
            .insert_or_assign(make_item(&store, 2, 1.0), Some(Duration::from_millis(10)))
            .unwrap_err();
        assert_eq!(err, TableError::Timeout);
        assert_eq!(table.size(), 1);
    }

    #[test]
    fn sample_timeout_returns_partial_with_end_signal() {
        let store = Arc::new(ChunkStore::new());
        let table = Table::new(basic_config("partial"), Arc::clone(&store)).unwrap();
        for k in 0..3 {
            table.insert_or_assign(make_item(&store, k, 1.0), None).unwrap();
        }
        // FIFO sampler keeps returning key 0; ask for more samples than the
        // min-size limiter will ever block on -- so use a queue limiter.
        let store2 = Arc::new(ChunkStore::new());
        let mut config = basic_config("partial2");
        config.max_times_sampled = 1;
        config.rate_limiter = RateLimiterConfig::queue(100).unwrap();
        let table2 = Table::new(config, Arc::clone(&store2)).unwrap();
        for k in 0..3 {
            table2.insert_or_assign(make_item(&store2, k, 1.0), None).unwrap();
        }
        let batch = table2.sample(5, Some(Duration::from_millis(50))).unwrap();
        assert_eq!(batch.items.len(), 3);
        assert!(batch.end_of_data);
    }

    #[test]
    fn update_priorities_skips_unknown_keys() {
        let store = Arc::new(ChunkStore::new());
        let table = Table::new(basic_config("upd"), Arc::clone(&store)).unwrap();
        table.insert_or_assign(make_item(&store, 1, 1.0), None).unwrap();
        assert_eq!(table.update_priorities(&[]), 0);
        assert_eq!(
            table.update_priorities(&[(ItemKey(1), 5.0), (ItemKey(99), 2.0)]),
            1
        );
    }

    #[test]
    fn delete_then_delete_again_is_not_found() {
        let store = Arc::new(ChunkStore::new());
        let table = Table::new(basic_config("del"), Arc::clone(&store)).unwrap();
        table.insert_or_assign(make_item(&store, 1, 1.0), None).unwrap();
        table.delete(ItemKey(1)).unwrap();
        assert_eq!(table.size(), 0);
        assert_eq!(store.len(), 0, "sole item's chunk freed");
        assert_eq!(table.delete(ItemKey(1)), Err(TableError::NotFound(ItemKey(1))));
    }

    #[test]
    fn info_on_fresh_table() {
        let store = Arc::new(ChunkStore::new());
        let table = Table::new(basic_config("fresh"), store).unwrap();
        let info = table.info();
        assert_eq!((info.size, info.inserts, info.samples), (0, 0, 0));
    }

    #[test]
    fn audit_detects_injected_selector_desync() {
        let store = Arc::new(ChunkStore::new());
        let table = Table::new(basic_config("audit"), Arc::clone(&store)).unwrap();
        table.audit().unwrap();
        table.insert_or_assign(make_item(&store, 1, 1.0), None).unwrap();
        table.audit().unwrap();
        table.corrupt_sampler_for_test(ItemKey(1));
        assert!(table.audit().is_err());
    }

    #[test]
    fn retirement_does_not_consult_remover() {
        // LIFO remover would pick the newest; retirement must remove the
        // sampled item itself regardless.
        let store = Arc::new(ChunkStore::new());
        let mut config = basic_config("retire");
        config.remover = SelectorConfig::lifo();
        config.max_times_sampled = 2;
        let table = Table::new(config, Arc::clone(&store)).unwrap();
        for k in 0..2 {
            table.insert_or_assign(make_item(&store, k, 1.0), None).unwrap();
        }
        // FIFO sampler returns key 0 twice, then it retires.
        table.sample(1, None).unwrap();
        table.sample(1, None).unwrap();
        assert_eq!(table.size(), 1);
        let left = table.sample(1, None).unwrap();
        assert_eq!(left.items[0].key, ItemKey(1));
        table.audit().unwrap();
    }

    #[test]
    fn stats_extension_counts_operations() {
        let store = Arc::new(ChunkStore::new());
        let (ext, stats) = StatsExtension::new();
        let table =
            Table::with_extensions(basic_config("stats"), Arc::clone(&store), vec![Box::new(ext)])
                .unwrap();
        table.insert_or_assign(make_item(&store, 1, 1.0), None).unwrap();
        table.sample(1, None).unwrap();
        table.update_priorities(&[(ItemKey(1), 3.0)]);
        table.delete(ItemKey(1)).unwrap();
        assert_eq!(stats.items_inserted.load(Relaxed), 1);
        assert_eq!(stats.items_sampled.load(Relaxed), 1);
        assert_eq!(stats.priority_updates.load(Relaxed), 1);
        assert_eq!(stats.items_deleted.load(Relaxed), 1);
    }

    #[test]
    fn blocked_sampler_wakes_on_insert() {
        let store = Arc::new(ChunkStore::new());
        let mut config = basic_config("wake");
        config.rate_limiter = RateLimiterConfig::min_size(1);
        let table = Arc::new(Table::new(config, Arc::clone(&store)).unwrap());
        let t2 = Arc::clone(&table);
        let sampler = std::thread::spawn(move || {
            t2.sample(1, Some(Duration::from_secs(5))).unwrap()
        });
        std::thread::sleep(Duration::from_millis(30));
        table.insert_or_assign(make_item(&store, 7, 1.0), None).unwrap();
        let batch = sampler.join().unwrap();
        assert_eq!(batch.items[0].key, ItemKey(7));
    }

    #[test]
    fn no_chunk_dealloc_under_table_lock() {
        let store = Arc::new(ChunkStore::new());
        let mut config = basic_config("dealloc");
        config.max_size = 5;
        let table = Table::new(config, Arc::clone(&store)).unwrap();
        for k in 0..50 {
            table.insert_or_assign(make_item(&store, k, 1.0), None).unwrap();
        }
        for k in 45..50 {
            table.delete(ItemKey(k)).unwrap();
        }
        assert_eq!(store.dealloc_violations(), 0);
    }

    #[test]
    fn missing_chunk_rejected() {
        let store = Arc::new(ChunkStore::new());
        let table = Table::new(basic_config("missing"), Arc::clone(&store)).unwrap();
        let item = Item {
            key: ItemKey(1),
            priority: 1.0,
            chunk_keys: vec![ChunkKey(999)],
            offset: 0,
            length: 1,
            times_sampled: 0,
        };
        assert!(matches!(
            table.insert_or_assign(item, None),
            Err(TableError::MissingChunk(_))
        ));
    }
}
