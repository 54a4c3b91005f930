//! Randomized insert/match/evict/lock scripts checked against a naive list
//! of stored sequences.

use dualar_core::pager::BlockId;
use dualar_core::radix::{KeyUnit, NodeHandle, RadixCache};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lcp(a: &[KeyUnit], b: &[KeyUnit]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn random_unit(rng: &mut ChaCha8Rng) -> KeyUnit {
    match rng.random_range(0..10) {
        0..=5 => KeyUnit::Text(rng.random_range(0..3)),
        6 | 7 => {
            // Frames that often agree on the semantic id but not the rest.
            let sem = rng.random_range(0..2);
            KeyUnit::Frame(vec![sem, rng.random_range(0..2), 7].into_boxed_slice())
        }
        8 => KeyUnit::Speaker(rng.random_range(0..2)),
        _ => KeyUnit::Vocal(rng.random_range(0..2)),
    }
}

fn random_seq(rng: &mut ChaCha8Rng, stored: &[Vec<KeyUnit>]) -> Vec<KeyUnit> {
    let mut seq = if !stored.is_empty() && rng.random_bool(0.6) {
        let base = &stored[rng.random_range(0..stored.len())];
        base[..rng.random_range(0..=base.len())].to_vec()
    } else {
        Vec::new()
    };
    let extra = rng.random_range(usize::from(seq.is_empty())..6);
    seq.extend((0..extra).map(|_| random_unit(rng)));
    seq
}

struct Oracle {
    stored: Vec<Vec<KeyUnit>>,
}

impl Oracle {
    fn longest(&self, q: &[KeyUnit]) -> usize {
        self.stored.iter().map(|s| lcp(s, q)).max().unwrap_or(0)
    }

    fn insert(&mut self, s: &[KeyUnit]) {
        if !self.stored.iter().any(|x| x == s) {
            self.stored.push(s.to_vec());
        }
    }

    /// Removes an evicted leaf path; the deepest surviving boundary on it
    /// stays resident. Returns the number of units freed.
    fn remove_leaf(&mut self, leaf: &[KeyUnit]) -> Result<usize, String> {
        let Some(i) = self.stored.iter().position(|s| s == leaf) else {
            return Err(format!("evicted path of length {} was never stored", leaf.len()));
        };
        if self.stored.iter().any(|s| s.len() > leaf.len() && s.starts_with(leaf)) {
            return Err("evicted a non-leaf path".into());
        }
        self.stored.swap_remove(i);
        let keep = self.stored.iter().map(|s| lcp(s, leaf)).max().unwrap_or(0);
        if keep > 0 {
            self.insert(&leaf[..keep]);
        }
        Ok(leaf.len() - keep)
    }

    fn leaves(&self) -> impl Iterator<Item = &Vec<KeyUnit>> {
        self.stored
            .iter()
            .filter(|s| !self.stored.iter().any(|t| t.len() > s.len() && t.starts_with(s)))
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ScriptStats {
    pub scripts: usize,
    pub matches_checked: usize,
    pub mutations: usize,
    pub evictions: usize,
}

fn fake_blocks(n_units: usize, page: usize, next: &mut u32) -> Vec<BlockId> {
    (0..n_units.div_ceil(page))
        .map(|_| {
            *next += 1;
            BlockId(*next)
        })
        .collect()
}

pub fn run_script(seed: u64, ops: usize, stats: &mut ScriptStats) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let page = rng.random_range(1..=4);
    let mut tree = RadixCache::new(page, usize::MAX);
    let mut oracle = Oracle { stored: Vec::new() };
    let mut locks: Vec<(NodeHandle, Vec<KeyUnit>)> = Vec::new();
    let mut next_block = 0u32;
    let ctx = |op: usize, what: &str| format!("seed {seed} op {op}: {what}");

    if tree.match_prefix(&[random_unit(&mut rng)]).matched_len != 0 {
        return Err(ctx(0, "empty tree matched"));
    }
    for op in 0..ops {
        match rng.random_range(0..100) {
            0..=39 => {
                let s = random_seq(&mut rng, &oracle.stored);
                let blocks = fake_blocks(s.len(), page, &mut next_block);
                let ins = tree.insert(&s, &blocks).map_err(|e| ctx(op, &e.to_string()))?;
                oracle.insert(&s);
                if rng.random_bool(0.3) {
                    tree.lock(ins.node).map_err(|e| ctx(op, &e.to_string()))?;
                    locks.push((ins.node, s));
                }
                stats.mutations += 1;
            }
            40..=74 => {
                let q = random_seq(&mut rng, &oracle.stored);
                let m = tree.match_prefix(&q);
                let want = oracle.longest(&q);
                if m.matched_len != want {
                    return Err(ctx(op, &format!("match {} vs oracle {want}", m.matched_len)));
                }
                if m.blocks.len() != want.div_ceil(page) {
                    return Err(ctx(op, "match block coverage"));
                }
                stats.matches_checked += 1;
            }
            75..=89 => {
                let target = rng.random_range(1..12);
                let ev = tree.evict(target);
                let mut freed = 0;
                for path in &ev.removed {
                    if locks.iter().any(|(_, l)| l.starts_with(path)) {
                        return Err(ctx(op, "evicted a locked path"));
                    }
                    freed += oracle.remove_leaf(path).map_err(|e| ctx(op, &e))?;
                }
                if freed != ev.freed_units {
                    return Err(ctx(op, &format!("freed {} vs oracle {freed}", ev.freed_units)));
                }
                if ev.freed_units < target {
                    // Everything left must be pinned.
                    if let Some(l) = oracle.leaves().find(|l| !locks.iter().any(|(_, k)| k.starts_with(l))) {
                        return Err(ctx(op, &format!("unlocked leaf of length {} survived", l.len())));
                    }
                }
                stats.evictions += 1;
                stats.mutations += 1;
            }
            _ => {
                if !locks.is_empty() {
                    let (h, _) = locks.swap_remove(rng.random_range(0..locks.len()));
                    tree.unlock(h).map_err(|e| ctx(op, &e.to_string()))?;
                    stats.mutations += 1;
                }
            }
        }
        tree.check_invariants().map_err(|e| ctx(op, &e))?;
    }
    for (h, _) in locks.drain(..) {
        tree.unlock(h).map_err(|e| ctx(ops, &e.to_string()))?;
    }
    tree.evict(usize::MAX);
    if tree.resident_units() != 0 {
        return Err(ctx(ops, "units left after unlocking and evicting everything"));
    }
    tree.check_invariants().map_err(|e| ctx(ops, &e))?;
    stats.scripts += 1;
    Ok(())
}

pub fn run_scripts(n: usize, base_seed: u64) -> Result<ScriptStats, String> {
    let mut stats = ScriptStats::default();
    for i in 0..n as u64 {
        run_script(base_seed.wrapping_add(i), 80, &mut stats)?;
    }
    Ok(stats)
}
