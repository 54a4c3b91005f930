mod support;

use support::{pager_fuzz, radix_oracle};

#[test]
fn radix_matches_naive_oracle_over_1000_scripts() {
    let s = radix_oracle::run_scripts(1000, 0).unwrap();
    assert_eq!(s.scripts, 1000);
    assert!(s.matches_checked > 20_000 && s.evictions > 5_000, "{s:?}");
}

#[test]
fn pager_fuzz_conserves_blocks() {
    let s = pager_fuzz::run_fuzz(10_000, 0).unwrap();
    assert_eq!(s.steps, 10_000);
    assert!(s.ooms > 0 && s.double_frees_caught > 0 && s.cow_copies > 0, "{s:?}");
}

#[test]
fn pager_fuzz_other_seeds() {
    for seed in 1..6 {
        pager_fuzz::run_fuzz(2_000, seed).unwrap();
    }
}

mod props {
    use dualar_core::pager::BlockId;
    use dualar_core::radix::{KeyUnit, RadixCache};
    use proptest::prelude::*;

    fn unit() -> impl Strategy<Value = KeyUnit> {
        prop_oneof![
            (0u32..3).prop_map(KeyUnit::Text),
            (0u32..2, 0u32..2).prop_map(|(s, a)| KeyUnit::Frame(vec![s, a].into_boxed_slice())),
            (0u32..2).prop_map(KeyUnit::Speaker),
        ]
    }

    proptest! {
        #[test]
        fn match_is_longest_stored_prefix(
            page in 1usize..5,
            seqs in prop::collection::vec(prop::collection::vec(unit(), 1..8), 1..10),
            query in prop::collection::vec(unit(), 1..10),
        ) {
            let mut tree = RadixCache::new(page, usize::MAX);
            for s in &seqs {
                let blocks: Vec<BlockId> = (0..s.len().div_ceil(page) as u32).map(BlockId).collect();
                tree.insert(s, &blocks).unwrap();
                tree.check_invariants().unwrap();
            }
            let want = seqs
                .iter()
                .map(|s| s.iter().zip(&query).take_while(|(a, b)| a == b).count())
                .max()
                .unwrap();
            let m = tree.match_prefix(&query);
            prop_assert_eq!(m.matched_len, want);
            prop_assert_eq!(m.blocks.len(), want.div_ceil(page));
            // Re-inserting is idempotent.
            let units = tree.resident_units();
            let nodes = tree.node_count();
            for s in &seqs {
                let blocks: Vec<BlockId> = (0..s.len().div_ceil(page) as u32).map(BlockId).collect();
                prop_assert!(tree.insert(s, &blocks).unwrap().retained.is_empty());
            }
            prop_assert_eq!((tree.resident_units(), tree.node_count()), (units, nodes));
        }
    }
}
