//! Fixed-size KV block pool with reference-counted sharing.
//!
//! Blocks carry no payload, only refcounts. A block with refcount > 1 is
//! read-only; appending into one first copies it to a private block.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId(pub u32);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PagerError {
    #[error("out of blocks: need {needed}, {free} free")]
    OutOfBlocks { needed: usize, free: usize },
    #[error("block {0:?} is not allocated")]
    NotAllocated(BlockId),
    #[error("block {0:?} released more times than referenced")]
    DoubleRelease(BlockId),
    #[error("block {0:?} outside the pool")]
    Unknown(BlockId),
}

impl PagerError {
    pub fn is_oom(&self) -> bool {
        matches!(self, PagerError::OutOfBlocks { .. })
    }
}

fn default_page_size() -> usize {
    16
}
fn default_total_blocks() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    #[serde(default = "default_page_size")]
    pub page_size: usize,
    #[serde(default = "default_total_blocks")]
    pub total_blocks: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { page_size: default_page_size(), total_blocks: default_total_blocks() }
    }
}

/// Owner of a page table.
pub type RequestId = u64;

/// Per-request mapping from key-unit positions to blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageTable {
    pub owner: RequestId,
    pub blocks: Vec<BlockId>,
    pub filled_units: usize,
}

impl PageTable {
    pub fn new(owner: RequestId) -> Self {
        Self { owner, blocks: Vec::new(), filled_units: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct BlockPool {
    page_size: usize,
    refcounts: Vec<u32>,
    free: Vec<BlockId>,
}

impl BlockPool {
    pub fn new(cfg: &PoolConfig) -> Self {
        assert!(cfg.page_size >= 1 && cfg.total_blocks >= 1, "invalid pool geometry");
        // Pop from the back, so hand out low ids first.
        let free = (0..cfg.total_blocks as u32).rev().map(BlockId).collect();
        Self { page_size: cfg.page_size, refcounts: vec![0; cfg.total_blocks], free }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn total_blocks(&self) -> usize {
        self.refcounts.len()
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    pub fn used_blocks(&self) -> usize {
        self.total_blocks() - self.free_blocks()
    }

    pub fn refcount(&self, b: BlockId) -> u32 {
        self.refcounts.get(b.0 as usize).copied().unwrap_or(0)
    }

    pub fn blocks_for(&self, units: usize) -> usize {
        units.div_ceil(self.page_size)
    }

    fn check(&self, b: BlockId) -> Result<(), PagerError> {
        if (b.0 as usize) < self.refcounts.len() {
            Ok(())
        } else {
            Err(PagerError::Unknown(b))
        }
    }

    /// `ceil(units / page_size)` fresh blocks, or nothing at all.
    pub fn alloc(&mut self, units: usize) -> Result<Vec<BlockId>, PagerError> {
        self.alloc_blocks(self.blocks_for(units))
    }

    pub fn alloc_blocks(&mut self, n: usize) -> Result<Vec<BlockId>, PagerError> {
        if n > self.free.len() {
            return Err(PagerError::OutOfBlocks { needed: n, free: self.free.len() });
        }
        let out: Vec<BlockId> = self.free.split_off(self.free.len() - n).into_iter().rev().collect();
        for b in &out {
            self.refcounts[b.0 as usize] = 1;
        }
        Ok(out)
    }

    pub fn share(&mut self, blocks: &[BlockId]) -> Result<(), PagerError> {
        for &b in blocks {
            self.check(b)?;
            if self.refcounts[b.0 as usize] == 0 {
                return Err(PagerError::NotAllocated(b));
            }
        }
        for &b in blocks {
            self.refcounts[b.0 as usize] += 1;
        }
        Ok(())
    }

    /// Drops one reference per listed occurrence; returns how many blocks
    /// went back to the free list. Validates everything before mutating.
    pub fn release(&mut self, blocks: &[BlockId]) -> Result<usize, PagerError> {
        let mut want: HashMap<BlockId, u32> = HashMap::new();
        for &b in blocks {
            self.check(b)?;
            *want.entry(b).or_default() += 1;
        }
        for &b in blocks {
            let rc = self.refcounts[b.0 as usize];
            if rc == 0 {
                return Err(PagerError::NotAllocated(b));
            }
            if want[&b] > rc {
                return Err(PagerError::DoubleRelease(b));
            }
        }
        let mut freed = 0;
        for &b in blocks {
            let rc = &mut self.refcounts[b.0 as usize];
            *rc -= 1;
            if *rc == 0 {
                self.free.push(b);
                freed += 1;
            }
        }
        Ok(freed)
    }

    /// Releases every block of `table` and empties it.
    pub fn release_table(&mut self, table: &mut PageTable) -> Result<usize, PagerError> {
        let freed = self.release(&table.blocks)?;
        table.blocks.clear();
        table.filled_units = 0;
        Ok(freed)
    }

    /// Makes the last block of `table` private if it is shared and not full,
    /// so it can be written. Leaves the table untouched on OOM.
    pub fn make_tail_private(&mut self, table: &mut PageTable) -> Result<(), PagerError> {
        let Some(&last) = table.blocks.last() else { return Ok(()) };
        let full = table.filled_units >= table.blocks.len() * self.page_size;
        if full || self.refcount(last) <= 1 {
            return Ok(());
        }
        let copy = self.alloc_blocks(1)?[0];
        self.release(&[last])?;
        *table.blocks.last_mut().expect("non-empty") = copy;
        Ok(())
    }

    /// Reserves one more unit at the end of `table`, allocating a block at a
    /// page boundary. Returns the block and the slot inside it.
    pub fn append_slot(&mut self, table: &mut PageTable) -> Result<(BlockId, usize), PagerError> {
        let slot = table.filled_units % self.page_size;
        if table.filled_units == table.blocks.len() * self.page_size {
            let b = self.alloc_blocks(1)?[0];
            table.blocks.push(b);
        } else {
            self.make_tail_private(table)?;
        }
        table.filled_units += 1;
        Ok((*table.blocks.last().expect("non-empty"), slot))
    }
}
