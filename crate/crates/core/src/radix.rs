//! Radix-tree prefix cache over mixed text/audio key sequences.
//!
//! Audio frames are indexed by their full joint id tuple, so two frames that
//! agree on the semantic token but differ in any acoustic token never share a
//! prefix. Every node records the KV blocks that hold its edge; a block that
//! straddles a node boundary is referenced by both nodes, and the tree holds
//! one pager reference per (node, block) occurrence. Pager refcounting is
//! left to the caller: `insert` reports the blocks the tree newly retains and
//! `evict` reports the blocks it drops.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::StableHasher;
use crate::pager::BlockId;
use crate::token::{PromptSegment, TokenFrame};
use crate::transcript::label_hash;

/// One cache indexing unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyUnit {
    Text(u32),
    /// Full `N`-tuple, semantic id first.
    Frame(Box<[u32]>),
    Speaker(u32),
    Vocal(u64),
}

impl KeyUnit {
    pub fn frame(frame: &TokenFrame) -> Self {
        KeyUnit::Frame(frame.ids().collect())
    }

    pub fn from_segments(segments: &[PromptSegment]) -> Vec<KeyUnit> {
        let mut out = Vec::with_capacity(crate::token::prompt_units(segments));
        for seg in segments {
            match seg {
                PromptSegment::TextTokens(ids) => out.extend(ids.iter().map(|&id| KeyUnit::Text(id))),
                PromptSegment::AudioFrames(frames) => out.extend(frames.iter().map(KeyUnit::frame)),
                PromptSegment::SpeakerTag(k) => out.push(KeyUnit::Speaker(*k)),
                PromptSegment::VocalTag(label) => out.push(KeyUnit::Vocal(label_hash(label))),
            }
        }
        out
    }

    fn hash_into(&self, h: &mut StableHasher) {
        match self {
            KeyUnit::Text(id) => h.write_u8(0).write_u32(*id),
            KeyUnit::Frame(ids) => {
                h.write_u8(1).write_u32(ids.len() as u32);
                for &id in ids.iter() {
                    h.write_u32(id);
                }
                h
            }
            KeyUnit::Speaker(k) => h.write_u8(2).write_u32(*k),
            KeyUnit::Vocal(l) => h.write_u8(3).write_u64(*l),
        };
    }
}

/// Stable digest of a key-unit sequence.
pub fn prompt_digest(units: &[KeyUnit]) -> u64 {
    let mut h = StableHasher::with_domain("prompt");
    for u in units {
        u.hash_into(&mut h);
    }
    h.finish()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RadixError {
    #[error("{got} blocks supplied for {units} units, expected {expected}")]
    Coverage { units: usize, expected: usize, got: usize },
    #[error("unlock below zero at node {0}")]
    Unlock(usize),
    #[error("stale node handle {0}")]
    StaleHandle(usize),
}

/// Handle to a tree node. Node ids are stable while the node is resident;
/// splitting a node keeps its id on the lower half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeHandle(usize);

impl NodeHandle {
    pub fn is_root(self) -> bool {
        self.0 == ROOT
    }
}

const ROOT: usize = 0;

#[derive(Debug, Clone)]
struct Node {
    edge: Vec<KeyUnit>,
    children: HashMap<KeyUnit, usize>,
    parent: usize,
    /// Absolute position of the first unit of `edge`.
    start: usize,
    blocks: Vec<BlockId>,
    lock_count: u32,
    last_access: u64,
}

/// Counters behind the hit-rate metric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub matched_units: u64,
    pub total_prefill_units: u64,
    pub evicted_units: u64,
    pub peak_resident_units: u64,
}

/// `matched_units / total_prefill_units`, absent when nothing was prefetched.
pub fn hit_rate(stats: &CacheStats) -> Option<f64> {
    (stats.total_prefill_units > 0).then(|| stats.matched_units as f64 / stats.total_prefill_units as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixMatch {
    pub matched_len: usize,
    /// `ceil(matched_len / page_size)` blocks covering the matched units.
    pub blocks: Vec<BlockId>,
    pub node: NodeHandle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inserted {
    pub node: NodeHandle,
    /// Blocks the tree took a new reference on; the caller must `share` them.
    pub retained: Vec<BlockId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Eviction {
    pub freed_units: usize,
    /// Blocks the tree dropped a reference on; the caller must `release` them.
    pub freed_blocks: Vec<BlockId>,
    /// Full root paths of the removed leaves, in removal order.
    pub removed: Vec<Vec<KeyUnit>>,
}

#[derive(Debug, Clone)]
pub struct RadixCache {
    page_size: usize,
    capacity_units: usize,
    nodes: Vec<Option<Node>>,
    free_slots: Vec<usize>,
    tick: u64,
    resident_units: usize,
    stats: CacheStats,
}

fn common_prefix(a: &[KeyUnit], b: &[KeyUnit]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl RadixCache {
    pub fn new(page_size: usize, capacity_units: usize) -> Self {
        assert!(page_size >= 1, "page_size must be >= 1");
        let root = Node {
            edge: Vec::new(),
            children: HashMap::new(),
            parent: ROOT,
            start: 0,
            blocks: Vec::new(),
            lock_count: 0,
            last_access: 0,
        };
        Self {
            page_size,
            capacity_units,
            nodes: vec![Some(root)],
            free_slots: Vec::new(),
            tick: 0,
            resident_units: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn capacity_units(&self) -> usize {
        self.capacity_units
    }

    pub fn resident_units(&self) -> usize {
        self.resident_units
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn root(&self) -> NodeHandle {
        NodeHandle(ROOT)
    }

    /// Records one request's prompt lookup for the hit-rate metric.
    pub fn record_prefill(&mut self, matched_units: usize, prompt_units: usize) {
        debug_assert!(matched_units <= prompt_units);
        self.stats.matched_units += matched_units as u64;
        self.stats.total_prefill_units += prompt_units as u64;
    }

    fn node(&self, id: usize) -> &Node {
        self.nodes[id].as_ref().expect("live node")
    }

    fn node_mut(&mut self, id: usize) -> &mut Node {
        self.nodes[id].as_mut().expect("live node")
    }

    fn alloc_node(&mut self, node: Node) -> usize {
        match self.free_slots.pop() {
            Some(i) => {
                self.nodes[i] = Some(node);
                i
            }
            None => {
                self.nodes.push(Some(node));
                self.nodes.len() - 1
            }
        }
    }

    fn blocks_for(&self, start: usize, end: usize) -> std::ops::RangeInclusive<usize> {
        (start / self.page_size)..=((end - 1) / self.page_size)
    }

    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    /// Longest stored prefix of `key`. Only access timestamps change.
    pub fn match_prefix(&mut self, key: &[KeyUnit]) -> PrefixMatch {
        let now = self.next_tick();
        let mut cur = ROOT;
        let mut pos = 0;
        let mut path = Vec::new();
        while pos < key.len() {
            let Some(&child) = self.node(cur).children.get(&key[pos]) else { break };
            let c = common_prefix(&self.node(child).edge, &key[pos..]);
            self.node_mut(child).last_access = now;
            path.push(child);
            pos += c;
            cur = child;
            if c < self.node(child).edge.len() {
                break;
            }
        }
        let matched = pos;
        let n_blocks = matched.div_ceil(self.page_size);
        let mut blocks = vec![BlockId(u32::MAX); n_blocks];
        // Deeper nodes overwrite: the block holding the last matched unit of
        // each page comes from the node that contains that unit.
        for &id in &path {
            let node = self.node(id);
            let end = (node.start + node.edge.len()).min(matched);
            if end <= node.start {
                continue;
            }
            let first = node.start / self.page_size;
            for b in self.blocks_for(node.start, end) {
                blocks[b] = node.blocks[b - first];
            }
        }
        PrefixMatch { matched_len: matched, blocks, node: NodeHandle(cur) }
    }

    /// Stores `key`, whose KV lives in `blocks` (`ceil(len / page_size)` of
    /// them). Existing prefixes keep their original blocks.
    pub fn insert(&mut self, key: &[KeyUnit], blocks: &[BlockId]) -> Result<Inserted, RadixError> {
        let expected = key.len().div_ceil(self.page_size);
        if blocks.len() != expected {
            return Err(RadixError::Coverage { units: key.len(), expected, got: blocks.len() });
        }
        let now = self.next_tick();
        let mut retained = Vec::new();
        let mut cur = ROOT;
        let mut pos = 0;
        loop {
            if pos == key.len() {
                return Ok(Inserted { node: NodeHandle(cur), retained });
            }
            let Some(&child) = self.node(cur).children.get(&key[pos]) else {
                let range = self.blocks_for(pos, key.len());
                let own: Vec<BlockId> = blocks[range].to_vec();
                retained.extend_from_slice(&own);
                let leaf = self.alloc_node(Node {
                    edge: key[pos..].to_vec(),
                    children: HashMap::new(),
                    parent: cur,
                    start: pos,
                    blocks: own,
                    lock_count: 0,
                    last_access: now,
                });
                self.node_mut(cur).children.insert(key[pos].clone(), leaf);
                self.resident_units += key.len() - pos;
                self.stats.peak_resident_units = self.stats.peak_resident_units.max(self.resident_units as u64);
                return Ok(Inserted { node: NodeHandle(leaf), retained });
            };
            let c = common_prefix(&self.node(child).edge, &key[pos..]);
            self.node_mut(child).last_access = now;
            if c == self.node(child).edge.len() {
                pos += c;
                cur = child;
                continue;
            }
            let upper = self.split(child, c, &mut retained);
            pos += c;
            cur = upper;
        }
    }

    /// Splits `id` after `at` edge units. The upper half gets a new id; `id`
    /// keeps the lower half so outstanding handles stay valid.
    fn split(&mut self, id: usize, at: usize, retained: &mut Vec<BlockId>) -> usize {
        let ps = self.page_size;
        let (parent, start, lock_count, last_access, upper_edge, upper_blocks) = {
            let n = self.node(id);
            let first = n.start / ps;
            let upper_last = (n.start + at - 1) / ps;
            (
                n.parent,
                n.start,
                n.lock_count,
                n.last_access,
                n.edge[..at].to_vec(),
                n.blocks[..=upper_last - first].to_vec(),
            )
        };
        let cut = start + at;
        if !cut.is_multiple_of(ps) {
            // The page holding the cut now belongs to both halves.
            retained.push(upper_blocks[upper_blocks.len() - 1]);
        }
        let first_key = upper_edge[0].clone();
        let upper = self.alloc_node(Node {
            edge: upper_edge,
            children: HashMap::new(),
            parent,
            start,
            blocks: upper_blocks,
            lock_count,
            last_access,
        });
        {
            let n = self.node_mut(id);
            n.edge.drain(..at);
            let drop_blocks = cut / ps - start / ps;
            n.blocks.drain(..drop_blocks);
            n.start = cut;
            n.parent = upper;
        }
        let lower_key = self.node(id).edge[0].clone();
        self.node_mut(upper).children.insert(lower_key, id);
        self.node_mut(parent).children.insert(first_key, upper);
        upper
    }

    fn check_handle(&self, h: NodeHandle) -> Result<(), RadixError> {
        match self.nodes.get(h.0) {
            Some(Some(_)) => Ok(()),
            _ => Err(RadixError::StaleHandle(h.0)),
        }
    }

    /// Pins the path from `h` to the root against eviction.
    pub fn lock(&mut self, h: NodeHandle) -> Result<(), RadixError> {
        self.check_handle(h)?;
        let mut cur = h.0;
        while cur != ROOT {
            self.node_mut(cur).lock_count += 1;
            cur = self.node(cur).parent;
        }
        Ok(())
    }

    pub fn unlock(&mut self, h: NodeHandle) -> Result<(), RadixError> {
        self.check_handle(h)?;
        let mut cur = h.0;
        while cur != ROOT {
            if self.node(cur).lock_count == 0 {
                return Err(RadixError::Unlock(cur));
            }
            cur = self.node(cur).parent;
        }
        let mut cur = h.0;
        while cur != ROOT {
            self.node_mut(cur).lock_count -= 1;
            cur = self.node(cur).parent;
        }
        Ok(())
    }

    pub fn lock_count(&self, h: NodeHandle) -> u32 {
        self.nodes.get(h.0).and_then(|n| n.as_ref()).map_or(0, |n| n.lock_count)
    }

    fn path_of(&self, id: usize) -> Vec<KeyUnit> {
        let mut chain = Vec::new();
        let mut cur = id;
        while cur != ROOT {
            chain.push(cur);
            cur = self.node(cur).parent;
        }
        chain.iter().rev().flat_map(|&n| self.node(n).edge.iter().cloned()).collect()
    }

    fn is_evictable_leaf(&self, id: usize) -> bool {
        id != ROOT && self.nodes[id].as_ref().is_some_and(|n| n.children.is_empty() && n.lock_count == 0)
    }

    /// Removes least-recently-used unlocked leaves until at least
    /// `target_units` have been freed or nothing evictable remains.
    pub fn evict(&mut self, target_units: usize) -> Eviction {
        let mut out = Eviction::default();
        if target_units == 0 {
            return out;
        }
        let mut heap: BinaryHeap<Reverse<(u64, usize)>> = (0..self.nodes.len())
            .filter(|&i| self.is_evictable_leaf(i))
            .map(|i| Reverse((self.node(i).last_access, i)))
            .collect();
        while out.freed_units < target_units {
            let Some(Reverse((_, id))) = heap.pop() else { break };
            if !self.is_evictable_leaf(id) {
                continue;
            }
            out.removed.push(self.path_of(id));
            let node = self.nodes[id].take().expect("live node");
            self.free_slots.push(id);
            self.node_mut(node.parent).children.remove(&node.edge[0]);
            out.freed_units += node.edge.len();
            out.freed_blocks.extend(node.blocks);
            if self.is_evictable_leaf(node.parent) {
                heap.push(Reverse((self.node(node.parent).last_access, node.parent)));
            }
        }
        self.resident_units -= out.freed_units;
        self.stats.evicted_units += out.freed_units as u64;
        out
    }

    /// Evicts down to the configured capacity.
    pub fn evict_to_fit(&mut self) -> Eviction {
        self.evict(self.resident_units.saturating_sub(self.capacity_units))
    }

    /// Every block reference the tree holds, with multiplicity.
    pub fn held_blocks(&self) -> Vec<BlockId> {
        self.nodes.iter().flatten().flat_map(|n| n.blocks.iter().copied()).collect()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().flatten().count()
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut units = 0;
        for (id, node) in self.nodes.iter().enumerate() {
            let Some(node) = node else { continue };
            if id != ROOT {
                if node.edge.is_empty() {
                    return Err(format!("node {id} has an empty edge"));
                }
                let expected = self.blocks_for(node.start, node.start + node.edge.len()).count();
                if node.blocks.len() != expected {
                    return Err(format!("node {id} covers {} blocks, expected {expected}", node.blocks.len()));
                }
                let parent = self.node(node.parent);
                if parent.start + parent.edge.len() != node.start {
                    return Err(format!("node {id} start {} not contiguous with parent", node.start));
                }
                if parent.children.get(&node.edge[0]) != Some(&id) {
                    return Err(format!("node {id} not registered under its first unit"));
                }
                units += node.edge.len();
            }
            let mut child_locks = 0;
            for (k, &c) in &node.children {
                let child = self.nodes.get(c).and_then(|n| n.as_ref()).ok_or(format!("dangling child {c}"))?;
                if &child.edge[0] != k {
                    return Err(format!("child {c} of {id} keyed by a unit that does not begin its edge"));
                }
                if child.parent != id {
                    return Err(format!("child {c} has wrong parent"));
                }
                child_locks += child.lock_count;
            }
            if id != ROOT && child_locks > node.lock_count {
                return Err(format!("node {id} lock_count below its children's"));
            }
        }
        if units != self.resident_units {
            return Err(format!("resident count {} != edge total {units}", self.resident_units));
        }
        Ok(())
    }
}
