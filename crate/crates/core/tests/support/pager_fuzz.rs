//! Randomized pager operations checked against an independent refcount
//! model.

use std::collections::HashMap;

use dualar_core::pager::{BlockId, BlockPool, PageTable, PagerError, PoolConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default, Clone, Copy)]
pub struct FuzzStats {
    pub steps: usize,
    pub ooms: usize,
    pub double_frees_caught: usize,
    pub cow_copies: usize,
}

struct Model {
    refs: HashMap<BlockId, u32>,
    total: usize,
}

impl Model {
    fn check(&self, pool: &BlockPool, step: usize) -> Result<(), String> {
        let resident = self.refs.values().filter(|&&r| r > 0).count();
        if pool.free_blocks() + resident != self.total {
            return Err(format!(
                "step {step}: free {} + resident {resident} != total {}",
                pool.free_blocks(),
                self.total
            ));
        }
        if pool.used_blocks() != resident {
            return Err(format!("step {step}: pool reports {} used, model {resident}", pool.used_blocks()));
        }
        for (&b, &r) in &self.refs {
            if pool.refcount(b) != r {
                return Err(format!("step {step}: block {b:?} refcount {} vs model {r}", pool.refcount(b)));
            }
        }
        Ok(())
    }

    fn add(&mut self, blocks: &[BlockId]) {
        for &b in blocks {
            *self.refs.entry(b).or_default() += 1;
        }
    }

    fn drop_refs(&mut self, blocks: &[BlockId]) {
        for &b in blocks {
            *self.refs.get_mut(&b).expect("tracked block") -= 1;
        }
    }
}

pub fn run_fuzz(steps: usize, seed: u64) -> Result<FuzzStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let page_size = 4;
    let total = 48;
    let mut pool = BlockPool::new(&PoolConfig { page_size, total_blocks: total });
    let mut model = Model { refs: HashMap::new(), total };
    let mut tables: Vec<PageTable> = Vec::new();
    let mut stats = FuzzStats::default();
    let mut next_owner = 0;

    for step in 0..steps {
        let free_before = pool.free_blocks();
        match rng.random_range(0..100) {
            0..=24 => {
                let units = rng.random_range(1..=40);
                match pool.alloc(units) {
                    Ok(blocks) => {
                        if blocks.len() != units.div_ceil(page_size) {
                            return Err(format!("step {step}: alloc size"));
                        }
                        if blocks.iter().any(|b| model.refs.get(b).copied().unwrap_or(0) != 0) {
                            return Err(format!("step {step}: alloc handed out a live block"));
                        }
                        model.add(&blocks);
                        next_owner += 1;
                        tables.push(PageTable { owner: next_owner, blocks, filled_units: units });
                    }
                    Err(e) if e.is_oom() => {
                        if pool.free_blocks() != free_before || units.div_ceil(page_size) <= free_before {
                            return Err(format!("step {step}: OOM was not all-or-nothing"));
                        }
                        stats.ooms += 1;
                    }
                    Err(e) => return Err(format!("step {step}: {e}")),
                }
            }
            25..=44 if !tables.is_empty() => {
                // Fork a table: the child shares every block.
                let src = tables[rng.random_range(0..tables.len())].clone();
                pool.share(&src.blocks).map_err(|e| format!("step {step}: {e}"))?;
                model.add(&src.blocks);
                next_owner += 1;
                tables.push(PageTable { owner: next_owner, ..src });
            }
            45..=69 if !tables.is_empty() => {
                let i = rng.random_range(0..tables.len());
                let before = tables[i].clone();
                match pool.append_slot(&mut tables[i]) {
                    Ok(_) => {
                        let after = &tables[i];
                        if after.blocks.len() > before.blocks.len() {
                            model.add(&after.blocks[before.blocks.len()..]);
                        } else if after.blocks.last() != before.blocks.last() {
                            model.drop_refs(&before.blocks[before.blocks.len() - 1..]);
                            model.add(&after.blocks[after.blocks.len() - 1..]);
                            stats.cow_copies += 1;
                        }
                        if after.filled_units != before.filled_units + 1 {
                            return Err(format!("step {step}: append did not advance"));
                        }
                    }
                    Err(e) if e.is_oom() => {
                        if tables[i] != before || pool.free_blocks() != free_before {
                            return Err(format!("step {step}: failed append mutated state"));
                        }
                        stats.ooms += 1;
                    }
                    Err(e) => return Err(format!("step {step}: {e}")),
                }
            }
            70..=89 if !tables.is_empty() => {
                let mut t = tables.swap_remove(rng.random_range(0..tables.len()));
                let blocks = t.blocks.clone();
                pool.release_table(&mut t).map_err(|e| format!("step {step}: {e}"))?;
                model.drop_refs(&blocks);
            }
            90..=99 if !tables.is_empty() => {
                // Release one reference too many: must be refused untouched.
                let t = &tables[rng.random_range(0..tables.len())];
                let Some(&b) = t.blocks.first() else { continue };
                let rc = pool.refcount(b) as usize;
                let over = vec![b; rc + 1];
                match pool.release(&over) {
                    Err(PagerError::DoubleRelease(x)) if x == b => stats.double_frees_caught += 1,
                    other => return Err(format!("step {step}: over-release returned {other:?}")),
                }
                if pool.free_blocks() != free_before {
                    return Err(format!("step {step}: refused release mutated the pool"));
                }
            }
            _ => {
                // A block nobody references cannot be released.
                if let Some(b) = (0..total as u32).map(BlockId).find(|b| pool.refcount(*b) == 0) {
                    match pool.release(&[b]) {
                        Err(PagerError::NotAllocated(_)) => stats.double_frees_caught += 1,
                        other => return Err(format!("step {step}: free-block release returned {other:?}")),
                    }
                }
            }
        }
        model.check(&pool, step)?;
        stats.steps += 1;
    }
    for mut t in tables {
        pool.release_table(&mut t).map_err(|e| format!("teardown: {e}"))?;
    }
    if pool.free_blocks() != total {
        return Err(format!("teardown: {} blocks leaked", total - pool.free_blocks()));
    }
    Ok(stats)
}
