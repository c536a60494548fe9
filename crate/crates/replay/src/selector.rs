//! Item selection strategies, used both as the sampling and the removal
//! policy of a table.
//!
//! Selectors maintain their own state purely from observed table events
//! (insert/update/delete with priorities). They never see item payloads, so
//! selection depends only on keys, priorities, insertion order, and the rng
//! draw handed in by the table.

use crate::table::ItemKey;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Fifo,
    Lifo,
    Uniform,
    MinHeap,
    MaxHeap,
    Prioritized,
}

impl SelectorKind {
    pub fn code(self) -> u8 {
        match self {
            SelectorKind::Fifo => 0,
            SelectorKind::Lifo => 1,
            SelectorKind::Uniform => 2,
            SelectorKind::MinHeap => 3,
            SelectorKind::MaxHeap => 4,
            SelectorKind::Prioritized => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<SelectorKind> {
        Some(match code {
            0 => SelectorKind::Fifo,
            1 => SelectorKind::Lifo,
            2 => SelectorKind::Uniform,
            3 => SelectorKind::MinHeap,
            4 => SelectorKind::MaxHeap,
            5 => SelectorKind::Prioritized,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub kind: SelectorKind,
    /// Exponent applied to priorities by the prioritized strategy; ignored
    /// by every other kind.
    #[serde(default = "default_exponent")]
    pub priority_exponent: f64,
}

fn default_exponent() -> f64 {
    1.0
}

impl SelectorConfig {
    pub fn fifo() -> Self {
        Self::plain(SelectorKind::Fifo)
    }
    pub fn lifo() -> Self {
        Self::plain(SelectorKind::Lifo)
    }
    pub fn uniform() -> Self {
        Self::plain(SelectorKind::Uniform)
    }
    pub fn min_heap() -> Self {
        Self::plain(SelectorKind::MinHeap)
    }
    pub fn max_heap() -> Self {
        Self::plain(SelectorKind::MaxHeap)
    }
    pub fn prioritized(priority_exponent: f64) -> Self {
        SelectorConfig {
            kind: SelectorKind::Prioritized,
            priority_exponent,
        }
    }

    fn plain(kind: SelectorKind) -> Self {
        SelectorConfig {
            kind,
            priority_exponent: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectorEvent {
    Inserted { key: ItemKey, priority: f64 },
    Updated { key: ItemKey, priority: f64 },
    Deleted { key: ItemKey },
}

/// The chosen key and its exact selection probability under the selector's
/// current state (1.0 for deterministic strategies).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionResult {
    pub key: ItemKey,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectorError {
    #[error("selector is empty")]
    Empty,
    #[error("duplicate insert of {0}")]
    DuplicateKey(ItemKey),
    #[error("unknown key {0}")]
    UnknownKey(ItemKey),
    #[error("priority {0} is not finite and non-negative")]
    InvalidPriority(f64),
}

pub trait Selector: Send {
    fn observe(&mut self, event: &SelectorEvent) -> Result<(), SelectorError>;
    /// `rng_draw` is a uniform draw in [0, 1) owned by the table; passing it
    /// in keeps end-to-end runs reproducible.
    fn select(&self, rng_draw: f64) -> Result<SelectionResult, SelectorError>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn contains(&self, key: ItemKey) -> bool;
    /// Key set, for consistency audits against the owning table.
    fn keys(&self) -> Vec<ItemKey>;
    /// (key, priority) pairs in insertion order; replaying these as inserts
    /// reconstructs the selector exactly (checkpoint encoding).
    fn entries(&self) -> Vec<(ItemKey, f64)>;
    fn config(&self) -> SelectorConfig;
}

pub fn build_selector(config: &SelectorConfig) -> Box<dyn Selector> {
    match config.kind {
        SelectorKind::Fifo => Box::new(OrderSelector::new(SelectorKind::Fifo)),
        SelectorKind::Lifo => Box::new(OrderSelector::new(SelectorKind::Lifo)),
        SelectorKind::Uniform => Box::new(UniformSelector::default()),
        SelectorKind::MinHeap => Box::new(HeapSelector::new(false)),
        SelectorKind::MaxHeap => Box::new(HeapSelector::new(true)),
        SelectorKind::Prioritized => Box::new(PrioritizedSelector::new(config.priority_exponent)),
    }
}

fn check_priority(priority: f64) -> Result<(), SelectorError> {
    if !priority.is_finite() || priority < 0.0 {
        return Err(SelectorError::InvalidPriority(priority));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct KeyInfo {
    seq: u64,
    priority: f64,
}

/// Insertion-ordered key registry shared by every strategy.
#[derive(Debug, Default)]
struct OrderedKeys {
    by_seq: BTreeMap<u64, ItemKey>,
    info: HashMap<ItemKey, KeyInfo>,
    next_seq: u64,
}

impl OrderedKeys {
    fn insert(&mut self, key: ItemKey, priority: f64) -> Result<u64, SelectorError> {
        check_priority(priority)?;
        if self.info.contains_key(&key) {
            return Err(SelectorError::DuplicateKey(key));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.by_seq.insert(seq, key);
        self.info.insert(key, KeyInfo { seq, priority });
        Ok(seq)
    }

    fn update(&mut self, key: ItemKey, priority: f64) -> Result<KeyInfo, SelectorError> {
        check_priority(priority)?;
        let info = self
            .info
            .get_mut(&key)
            .ok_or(SelectorError::UnknownKey(key))?;
        let old = *info;
        info.priority = priority;
        Ok(old)
    }

    fn remove(&mut self, key: ItemKey) -> Result<KeyInfo, SelectorError> {
        let info = self.info.remove(&key).ok_or(SelectorError::UnknownKey(key))?;
        self.by_seq.remove(&info.seq);
        Ok(info)
    }

    fn len(&self) -> usize {
        self.info.len()
    }

    fn oldest(&self) -> Option<ItemKey> {
        self.by_seq.values().next().copied()
    }

    fn newest(&self) -> Option<ItemKey> {
        self.by_seq.values().next_back().copied()
    }

    fn nth(&self, n: usize) -> Option<ItemKey> {
        self.by_seq.values().nth(n).copied()
    }

    fn keys(&self) -> Vec<ItemKey> {
        self.info.keys().copied().collect()
    }

    fn entries(&self) -> Vec<(ItemKey, f64)> {
        self.by_seq
            .values()
            .map(|k| (*k, self.info[k].priority))
            .collect()
    }

    fn contains(&self, key: ItemKey) -> bool {
        self.info.contains_key(&key)
    }
}

/// FIFO picks the oldest-inserted key, LIFO the most recently inserted.
struct OrderSelector {
    kind: SelectorKind,
    base: OrderedKeys,
}

impl OrderSelector {
    fn new(kind: SelectorKind) -> Self {
        OrderSelector {
            kind,
            base: OrderedKeys::default(),
        }
    }
}

impl Selector for OrderSelector {
    fn observe(&mut self, event: &SelectorEvent) -> Result<(), SelectorError> {
        match *event {
            SelectorEvent::Inserted { key, priority } => self.base.insert(key, priority).map(|_| ()),
            SelectorEvent::Updated { key, priority } => self.base.update(key, priority).map(|_| ()),
            SelectorEvent::Deleted { key } => self.base.remove(key).map(|_| ()),
        }
    }

    fn select(&self, _rng_draw: f64) -> Result<SelectionResult, SelectorError> {
        let key = match self.kind {
            SelectorKind::Fifo => self.base.oldest(),
            SelectorKind::Lifo => self.base.newest(),
            _ => unreachable!(),
        }
        .ok_or(SelectorError::Empty)?;
        Ok(SelectionResult {
            key,
            probability: 1.0,
        })
    }

    fn len(&self) -> usize {
        self.base.len()
    }
    fn contains(&self, key: ItemKey) -> bool {
        self.base.contains(key)
    }
    fn keys(&self) -> Vec<ItemKey> {
        self.base.keys()
    }
    fn entries(&self) -> Vec<(ItemKey, f64)> {
        self.base.entries()
    }
    fn config(&self) -> SelectorConfig {
        SelectorConfig::plain(self.kind)
    }
}

/// Each key with probability exactly 1/n.
#[derive(Default)]
struct UniformSelector {
    base: OrderedKeys,
    dense: Vec<ItemKey>,
    pos: HashMap<ItemKey, usize>,
}

impl Selector for UniformSelector {
    fn observe(&mut self, event: &SelectorEvent) -> Result<(), SelectorError> {
        match *event {
            SelectorEvent::Inserted { key, priority } => {
                self.base.insert(key, priority)?;
                self.pos.insert(key, self.dense.len());
                self.dense.push(key);
                Ok(())
            }
            SelectorEvent::Updated { key, priority } => self.base.update(key, priority).map(|_| ()),
            SelectorEvent::Deleted { key } => {
                self.base.remove(key)?;
                let at = self.pos.remove(&key).expect("pos tracks base");
                let last = self.dense.pop().expect("non-empty");
                if last != key {
                    self.dense[at] = last;
                    self.pos.insert(last, at);
                }
                Ok(())
            }
        }
    }

    fn select(&self, rng_draw: f64) -> Result<SelectionResult, SelectorError> {
        let n = self.dense.len();
        if n == 0 {
            return Err(SelectorError::Empty);
        }
        let idx = ((rng_draw * n as f64) as usize).min(n - 1);
        Ok(SelectionResult {
            key: self.dense[idx],
            probability: 1.0 / n as f64,
        })
    }

    fn len(&self) -> usize {
        self.base.len()
    }
    fn contains(&self, key: ItemKey) -> bool {
        self.base.contains(key)
    }
    fn keys(&self) -> Vec<ItemKey> {
        self.base.keys()
    }
    fn entries(&self) -> Vec<(ItemKey, f64)> {
        self.base.entries()
    }
    fn config(&self) -> SelectorConfig {
        SelectorConfig::uniform()
    }
}

/// Total order on finite f64 priorities.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Highest (max) or lowest (min) priority; ties broken by insertion order,
/// oldest first.
struct HeapSelector {
    max: bool,
    base: OrderedKeys,
    // Ordered by (priority, tie): min-heap reads the first element, max-heap
    // the last. The tie component is inverted for max so that equal
    // priorities resolve to the oldest seq at both ends.
    ordered: BTreeSet<(OrdF64, u64, ItemKey)>,
}

impl HeapSelector {
    fn new(max: bool) -> Self {
        HeapSelector {
            max,
            base: OrderedKeys::default(),
            ordered: BTreeSet::new(),
        }
    }

    fn tie(&self, seq: u64) -> u64 {
        if self.max {
            u64::MAX - seq
        } else {
            seq
        }
    }
}

impl Selector for HeapSelector {
    fn observe(&mut self, event: &SelectorEvent) -> Result<(), SelectorError> {
        match *event {
            SelectorEvent::Inserted { key, priority } => {
                let seq = self.base.insert(key, priority)?;
                self.ordered.insert((OrdF64(priority), self.tie(seq), key));
                Ok(())
            }
            SelectorEvent::Updated { key, priority } => {
                let old = self.base.update(key, priority)?;
                self.ordered
                    .remove(&(OrdF64(old.priority), self.tie(old.seq), key));
                self.ordered.insert((OrdF64(priority), self.tie(old.seq), key));
                Ok(())
            }
            SelectorEvent::Deleted { key } => {
                let old = self.base.remove(key)?;
                self.ordered
                    .remove(&(OrdF64(old.priority), self.tie(old.seq), key));
                Ok(())
            }
        }
    }

    fn select(&self, _rng_draw: f64) -> Result<SelectionResult, SelectorError> {
        let entry = if self.max {
            self.ordered.iter().next_back()
        } else {
            self.ordered.iter().next()
        }
        .ok_or(SelectorError::Empty)?;
        Ok(SelectionResult {
            key: entry.2,
            probability: 1.0,
        })
    }

    fn len(&self) -> usize {
        self.base.len()
    }
    fn contains(&self, key: ItemKey) -> bool {
        self.base.contains(key)
    }
    fn keys(&self) -> Vec<ItemKey> {
        self.base.keys()
    }
    fn entries(&self) -> Vec<(ItemKey, f64)> {
        self.base.entries()
    }
    fn config(&self) -> SelectorConfig {
        SelectorConfig::plain(if self.max {
            SelectorKind::MaxHeap
        } else {
            SelectorKind::MinHeap
        })
    }
}

/// Segment tree over per-slot weights. Internal nodes hold exact sums of
/// their children, recomputed bottom-up on every point update.
struct SumTree {
    cap: usize,
    nodes: Vec<f64>,
    key_at: Vec<Option<ItemKey>>,
    free: Vec<usize>,
}

impl SumTree {
    fn new() -> SumTree {
        let cap = 8;
        SumTree {
            cap,
            nodes: vec![0.0; 2 * cap],
            key_at: vec![None; cap],
            free: (0..cap).rev().collect(),
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn weight(&self, slot: usize) -> f64 {
        self.nodes[self.cap + slot]
    }

    fn set(&mut self, slot: usize, weight: f64) {
        let mut i = self.cap + slot;
        self.nodes[i] = weight;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    fn alloc(&mut self, key: ItemKey) -> usize {
        if self.free.is_empty() {
            self.grow();
        }
        let slot = self.free.pop().expect("grown");
        self.key_at[slot] = Some(key);
        slot
    }

    fn release(&mut self, slot: usize) {
        self.set(slot, 0.0);
        self.key_at[slot] = None;
        self.free.push(slot);
    }

    fn grow(&mut self) {
        let new_cap = self.cap * 2;
        let mut nodes = vec![0.0; 2 * new_cap];
        for slot in 0..self.cap {
            nodes[new_cap + slot] = self.nodes[self.cap + slot];
        }
        for i in (1..new_cap).rev() {
            nodes[i] = nodes[2 * i] + nodes[2 * i + 1];
        }
        self.key_at.resize(new_cap, None);
        self.free.extend((self.cap..new_cap).rev());
        self.cap = new_cap;
        self.nodes = nodes;
    }

    /// Finds the slot owning prefix mass `target` in [0, total).
    fn find(&self, mut target: f64) -> Option<usize> {
        if self.total() <= 0.0 {
            return None;
        }
        let mut i = 1;
        while i < self.cap {
            let left = self.nodes[2 * i];
            if target < left {
                i = 2 * i;
            } else {
                target -= left;
                i = 2 * i + 1;
            }
        }
        let mut slot = i - self.cap;
        // Floating-point edges can land on an empty or zero-weight leaf;
        // walk forward to the next weighted slot.
        if self.nodes[self.cap + slot] <= 0.0 || self.key_at[slot].is_none() {
            slot = (0..self.cap)
                .find(|s| self.nodes[self.cap + s] > 0.0 && self.key_at[*s].is_some())?;
        }
        Some(slot)
    }
}

/// Samples key i with probability p_i^C / sum_k p_k^C. Zero-priority keys
/// are unselectable while any positive weight exists; if every priority is
/// zero the distribution falls back to uniform.
struct PrioritizedSelector {
    exponent: f64,
    base: OrderedKeys,
    tree: SumTree,
    slot_of: HashMap<ItemKey, usize>,
}

impl PrioritizedSelector {
    fn new(exponent: f64) -> Self {
        PrioritizedSelector {
            exponent,
            base: OrderedKeys::default(),
            tree: SumTree::new(),
            slot_of: HashMap::new(),
        }
    }

    fn weight(&self, priority: f64) -> f64 {
        // Zero stays zero regardless of exponent (0^0 would be 1).
        if priority == 0.0 {
            0.0
        } else {
            priority.powf(self.exponent)
        }
    }
}

impl Selector for PrioritizedSelector {
    fn observe(&mut self, event: &SelectorEvent) -> Result<(), SelectorError> {
        match *event {
            SelectorEvent::Inserted { key, priority } => {
                self.base.insert(key, priority)?;
                let slot = self.tree.alloc(key);
                self.tree.set(slot, self.weight(priority));
                self.slot_of.insert(key, slot);
                Ok(())
            }
            SelectorEvent::Updated { key, priority } => {
                self.base.update(key, priority)?;
                let slot = self.slot_of[&key];
                self.tree.set(slot, self.weight(priority));
                Ok(())
            }
            SelectorEvent::Deleted { key } => {
                self.base.remove(key)?;
                let slot = self.slot_of.remove(&key).expect("slot tracks base");
                self.tree.release(slot);
                Ok(())
            }
        }
    }

    fn select(&self, rng_draw: f64) -> Result<SelectionResult, SelectorError> {
        let n = self.base.len();
        if n == 0 {
            return Err(SelectorError::Empty);
        }
        let total = self.tree.total();
        if total > 0.0 {
            let slot = self
                .tree
                .find(rng_draw * total)
                .expect("positive total has a weighted slot");
            let key = self.tree.key_at[slot].expect("weighted slot is occupied");
            Ok(SelectionResult {
                key,
                probability: self.tree.weight(slot) / total,
            })
        } else {
            let idx = ((rng_draw * n as f64) as usize).min(n - 1);
            Ok(SelectionResult {
                key: self.base.nth(idx).expect("idx < n"),
                probability: 1.0 / n as f64,
            })
        }
    }

    fn len(&self) -> usize {
        self.base.len()
    }
    fn contains(&self, key: ItemKey) -> bool {
        self.base.contains(key)
    }
    fn keys(&self) -> Vec<ItemKey> {
        self.base.keys()
    }
    fn entries(&self) -> Vec<(ItemKey, f64)> {
        self.base.entries()
    }
    fn config(&self) -> SelectorConfig {
        SelectorConfig::prioritized(self.exponent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn k(v: u64) -> ItemKey {
        ItemKey(v)
    }

    fn insert(sel: &mut dyn Selector, key: u64, priority: f64) {
        sel.observe(&SelectorEvent::Inserted {
            key: k(key),
            priority,
        })
        .unwrap();
    }

    #[test]
    fn insert_then_delete_leaves_empty() {
        for config in [
            SelectorConfig::fifo(),
            SelectorConfig::lifo(),
            SelectorConfig::uniform(),
            SelectorConfig::min_heap(),
            SelectorConfig::max_heap(),
            SelectorConfig::prioritized(1.0),
        ] {
            let mut sel = build_selector(&config);
            insert(sel.as_mut(), 1, 2.0);
            sel.observe(&SelectorEvent::Deleted { key: k(1) }).unwrap();
            assert_eq!(sel.len(), 0);
            assert_eq!(sel.select(0.5), Err(SelectorError::Empty));
        }
    }

    #[test]
    fn prioritized_update_stores_new_priority() {
        let mut sel = build_selector(&SelectorConfig::prioritized(1.0));
        insert(sel.as_mut(), 1, 2.0);
        sel.observe(&SelectorEvent::Updated {
            key: k(1),
            priority: 5.0,
        })
        .unwrap();
        assert_eq!(sel.entries(), vec![(k(1), 5.0)]);
    }

    #[test]
    fn max_heap_top_is_highest_priority() {
        let mut sel = build_selector(&SelectorConfig::max_heap());
        insert(sel.as_mut(), 1, 1.0);
        insert(sel.as_mut(), 2, 3.0);
        insert(sel.as_mut(), 3, 2.0);
        assert_eq!(sel.select(0.0).unwrap().key, k(2));
    }

    #[test]
    fn heap_ties_break_oldest_first() {
        let mut max = build_selector(&SelectorConfig::max_heap());
        let mut min = build_selector(&SelectorConfig::min_heap());
        for (key, p) in [(1, 2.0), (2, 2.0), (3, 2.0)] {
            insert(max.as_mut(), key, p);
            insert(min.as_mut(), key, p);
        }
        assert_eq!(max.select(0.0).unwrap().key, k(1));
        assert_eq!(min.select(0.0).unwrap().key, k(1));
    }

    #[test]
    fn fifo_and_lifo_order() {
        let mut fifo = build_selector(&SelectorConfig::fifo());
        let mut lifo = build_selector(&SelectorConfig::lifo());
        for key in [1, 2, 3] {
            insert(fifo.as_mut(), key, 1.0);
            insert(lifo.as_mut(), key, 1.0);
        }
        assert_eq!(fifo.select(0.9).unwrap().key, k(1));
        assert_eq!(lifo.select(0.9).unwrap().key, k(3));
    }

    #[test]
    fn uniform_probability_is_exact() {
        let mut sel = build_selector(&SelectorConfig::uniform());
        for key in 0..4 {
            insert(sel.as_mut(), key, 1.0);
        }
        let mut seen = HashSet::new();
        for i in 0..4 {
            let r = sel.select((i as f64 + 0.5) / 4.0).unwrap();
            assert_eq!(r.probability, 0.25);
            seen.insert(r.key);
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn prioritized_two_key_probability() {
        // P(b) = 3 / (1 + 3) = 0.75 at C=1, cross-checked by Monte Carlo.
        let mut sel = build_selector(&SelectorConfig::prioritized(1.0));
        insert(sel.as_mut(), 1, 1.0);
        insert(sel.as_mut(), 2, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let mut hits_b = 0u64;
        for _ in 0..draws {
            let r = sel.select(rng.random::<f64>()).unwrap();
            if r.key == k(2) {
                assert!((r.probability - 0.75).abs() < 1e-12);
                hits_b += 1;
            } else {
                assert!((r.probability - 0.25).abs() < 1e-12);
            }
        }
        // 3 sigma of a Bernoulli(0.75) over 1e5 draws.
        let sigma = (0.75f64 * 0.25 / draws as f64).sqrt();
        let freq = hits_b as f64 / draws as f64;
        assert!((freq - 0.75).abs() < 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn prioritized_exponent_zero_is_uniform_over_positive() {
        let mut sel = build_selector(&SelectorConfig::prioritized(0.0));
        insert(sel.as_mut(), 1, 0.5);
        insert(sel.as_mut(), 2, 100.0);
        let r = sel.select(0.1).unwrap();
        assert!((r.probability - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prioritized_zero_priorities_fall_back_to_uniform() {
        let mut sel = build_selector(&SelectorConfig::prioritized(1.0));
        insert(sel.as_mut(), 1, 0.0);
        insert(sel.as_mut(), 2, 0.0);
        let r = sel.select(0.6).unwrap();
        assert_eq!(r.probability, 0.5);
        // With one positive priority, zero-priority keys are unselectable.
        insert(sel.as_mut(), 3, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1_000 {
            assert_eq!(sel.select(rng.random::<f64>()).unwrap().key, k(3));
        }
    }

    #[test]
    fn prioritized_distribution_matches_formula() {
        // Empirical frequencies vs p_i^C / sum within 3 sigma, C = 0.7.
        let c = 0.7;
        let priorities = [1.0, 2.0, 3.5, 8.0];
        let mut sel = build_selector(&SelectorConfig::prioritized(c));
        for (i, p) in priorities.iter().enumerate() {
            insert(sel.as_mut(), i as u64, *p);
        }
        let total: f64 = priorities.iter().map(|p| p.powf(c)).sum();
        let draws = 100_000;
        let mut counts = [0u64; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..draws {
            counts[sel.select(rng.random::<f64>()).unwrap().key.0 as usize] += 1;
        }
        for (i, p) in priorities.iter().enumerate() {
            let expect = p.powf(c) / total;
            let sigma = (expect * (1.0 - expect) / draws as f64).sqrt();
            let freq = counts[i] as f64 / draws as f64;
            assert!(
                (freq - expect).abs() < 3.0 * sigma,
                "key {i}: freq {freq} expect {expect}"
            );
        }
    }

    #[test]
    fn duplicate_insert_and_unknown_key_error() {
        let mut sel = build_selector(&SelectorConfig::prioritized(1.0));
        insert(sel.as_mut(), 1, 1.0);
        assert!(matches!(
            sel.observe(&SelectorEvent::Inserted {
                key: k(1),
                priority: 1.0
            }),
            Err(SelectorError::DuplicateKey(_))
        ));
        assert!(matches!(
            sel.observe(&SelectorEvent::Deleted { key: k(9) }),
            Err(SelectorError::UnknownKey(_))
        ));
    }

    /// Random event stream: every selector's key set must track the model,
    /// and identical event + draw sequences must produce identical
    /// selections.
    #[test]
    fn key_set_consistency_and_determinism() {
        let configs = [
            SelectorConfig::fifo(),
            SelectorConfig::lifo(),
            SelectorConfig::uniform(),
            SelectorConfig::min_heap(),
            SelectorConfig::max_heap(),
            SelectorConfig::prioritized(0.8),
        ];
        for config in configs {
            let mut events = Vec::new();
            let mut model: HashSet<u64> = HashSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut next = 0u64;
            for _ in 0..5_000 {
                let op = rng.random_range(0..4);
                if op == 0 || model.is_empty() {
                    events.push(SelectorEvent::Inserted {
                        key: k(next),
                        priority: rng.random_range(0.0..10.0),
                    });
                    model.insert(next);
                    next += 1;
                } else {
                    let key = *model.iter().next().unwrap();
                    if op == 1 {
                        events.push(SelectorEvent::Deleted { key: k(key) });
                        model.remove(&key);
                    } else {
                        events.push(SelectorEvent::Updated {
                            key: k(key),
                            priority: rng.random_range(0.0..10.0),
                        });
                    }
                }
            }
            let run = |events: &[SelectorEvent]| {
                let mut sel = build_selector(&config);
                let mut draws = ChaCha8Rng::seed_from_u64(7);
                let mut picks = Vec::new();
                for e in events {
                    sel.observe(e).unwrap();
                    if sel.len() > 0 {
                        picks.push(sel.select(draws.random::<f64>()).unwrap().key);
                    }
                }
                let keys: HashSet<u64> = sel.keys().into_iter().map(|x| x.0).collect();
                (picks, keys)
            };
            let (picks_a, keys_a) = run(&events);
            let (picks_b, keys_b) = run(&events);
            assert_eq!(picks_a, picks_b, "{config:?} not deterministic");
            assert_eq!(keys_a, model, "{config:?} key set diverged");
            assert_eq!(keys_b, model);
        }
    }
}
