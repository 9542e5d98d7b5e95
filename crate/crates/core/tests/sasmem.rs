mod common;

use std::collections::BTreeMap;

use meshwa_core::sasmem::{AllocError, BucketCensus, TranslationError, MIN_REGION_SIZE};
use meshwa_core::{simulate_translation, BuddyAllocator, Region, TranslationMode};
use proptest::prelude::*;

use common::buddy::BuddyModel;
use common::lru::naive_lru;

const MIB: u64 = 1 << 20;

/// Census derived from the model's free list and allocations.
fn model_census(m: &BuddyModel) -> BTreeMap<u32, BucketCensus> {
    let mut out: BTreeMap<u32, BucketCensus> = BTreeMap::new();
    for &(class, _) in &m.free {
        out.entry(class).or_default().free_blocks += 1;
    }
    for (_, _, class) in &m.used {
        out.entry(*class).or_default().allocated_blocks += 1;
    }
    out
}

#[test]
fn region_length_rounds_up() {
    let mut a = BuddyAllocator::new(16 * MIB).unwrap();
    let r = a.allocate("svc", 5 * MIB).unwrap();
    assert_eq!(r.length, 8 * MIB);
    assert_eq!(r.bucket_class, 23);
    assert_eq!(a.allocate("tiny", 1).unwrap().length, MIN_REGION_SIZE);
    assert_eq!(a.allocate("zero", 0), Err(AllocError::ZeroSize));
    assert!(matches!(a.allocate("svc", 1), Err(AllocError::DuplicateOwner(_))));
}

#[test]
fn arena_exhaustion() {
    let mut a = BuddyAllocator::new(16 * MIB).unwrap();
    let mut m = BuddyModel::new(16 * MIB);
    for name in ["a", "b"] {
        let r = a.allocate(name, 8 * MIB).unwrap();
        assert_eq!(Some((r.base, r.length)), m.allocate(name, 8 * MIB));
    }
    assert_eq!(m.allocate("c", 1), None);
    assert_eq!(a.allocate("c", 1), Err(AllocError::OutOfArena { requested: 1 }));
}

#[test]
fn free_restores_the_initial_state() {
    let mut a = BuddyAllocator::new(16 * MIB).unwrap();
    let initial = a.clone();
    a.allocate("a", 65536).unwrap();
    a.free("a").unwrap();
    assert_eq!(a, initial);
    assert_eq!(a.free("ghost"), Err(AllocError::UnknownOwner("ghost".into())));
}

#[test]
fn sibling_buddies_merge() {
    let mut a = BuddyAllocator::new(16 * MIB).unwrap();
    let mut m = BuddyModel::new(16 * MIB);
    let x = a.allocate("x", 65536).unwrap();
    let y = a.allocate("y", 65536).unwrap();
    m.allocate("x", 65536);
    m.allocate("y", 65536);
    assert_eq!(x.base ^ y.base, 65536, "lowest-address allocation yields siblings");
    a.free("x").unwrap();
    m.free("x");
    let mut free: Vec<_> = a.free_blocks().collect();
    free.sort();
    assert_eq!(free, m.sorted_free());
    a.free("y").unwrap();
    m.free("y");
    let free: Vec<_> = a.free_blocks().collect();
    assert_eq!(free, vec![(24, 0)]);
    assert_eq!(m.sorted_free(), free);
}

#[test]
fn fragmentation_report() {
    let mut a = BuddyAllocator::new(16 * MIB).unwrap();
    let fresh = BTreeMap::from([(24, BucketCensus { free_blocks: 1, allocated_blocks: 0 })]);
    assert_eq!(a.fragmentation_report(), fresh);

    let mut m = BuddyModel::new(16 * MIB);
    a.allocate("a", 65536).unwrap();
    m.allocate("a", 65536);
    let report = a.fragmentation_report();
    assert_eq!(report, model_census(&m));
    assert_eq!(report[&16], BucketCensus { free_blocks: 1, allocated_blocks: 1 });
    for class in 17..24 {
        assert_eq!(report[&class], BucketCensus { free_blocks: 1, allocated_blocks: 0 });
    }
    assert!(!report.contains_key(&24));

    a.free("a").unwrap();
    assert_eq!(a.fragmentation_report(), fresh);
}

#[test]
fn arena_must_be_a_power_of_two() {
    assert_eq!(BuddyAllocator::new(3 * MIB), Err(AllocError::InvalidArena(3 * MIB)));
    assert_eq!(BuddyAllocator::new(4096), Err(AllocError::InvalidArena(4096)));
}

#[test]
fn one_page_trace() {
    let region = Region::new(0, 16 * MIB, "t");
    let trace: Vec<u64> = (0..100).map(|i| 8192 + i * 40).collect();
    let s = simulate_translation(&trace, &region, &TranslationMode::PagedTlb { page_size: 4096, tlb_entries: 64 }).unwrap();
    assert_eq!((s.accesses, s.page_walks, s.tlb_hits, s.distinct_pages), (100, 1, 99, 1));
}

#[test]
fn one_entry_tlb_thrashes_on_alternation() {
    let region = Region::new(0, 16 * MIB, "t");
    let trace: Vec<u64> = (0..100).map(|i| if i % 2 == 0 { 0 } else { 4096 }).collect();
    let s = simulate_translation(&trace, &region, &TranslationMode::PagedTlb { page_size: 4096, tlb_entries: 1 }).unwrap();
    assert_eq!((s.page_walks, s.tlb_hits, s.distinct_pages), (100, 0, 2));
    let s = simulate_translation(&trace, &region, &TranslationMode::StaticSegment).unwrap();
    assert_eq!((s.page_walks, s.tlb_hits, s.distinct_pages), (0, 100, 1));
}

#[test]
fn trace_must_stay_in_the_region() {
    let region = Region::new(0, 65536, "t");
    let e = simulate_translation(&[0, 65536], &region, &TranslationMode::StaticSegment).unwrap_err();
    assert_eq!(e, TranslationError::OffsetOutOfRegion { index: 1, offset: 65536, length: 65536 });
    let bad = TranslationMode::PagedTlb { page_size: 3000, tlb_entries: 4 };
    assert!(matches!(simulate_translation(&[0], &region, &bad), Err(TranslationError::InvalidMode(_))));
}

#[derive(Clone, Debug)]
enum Op {
    Alloc(u64),
    Free(usize),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            3 => (1u64..=4 * MIB).prop_map(Op::Alloc),
            2 => any::<usize>().prop_map(Op::Free),
        ],
        0..200,
    )
}

proptest! {
    #[test]
    fn allocator_matches_the_model(ops in ops()) {
        let arena = 16 * MIB;
        let mut a = BuddyAllocator::new(arena).unwrap();
        let mut m = BuddyModel::new(arena);
        let mut live: Vec<String> = Vec::new();
        for (i, op) in ops.into_iter().enumerate() {
            match op {
                Op::Alloc(size) => {
                    let owner = format!("s{i}");
                    let got = a.allocate(&owner, size).ok().map(|r| (r.base, r.length));
                    prop_assert_eq!(got, m.allocate(&owner, size));
                    if got.is_some() {
                        live.push(owner);
                    }
                }
                Op::Free(k) if !live.is_empty() => {
                    let owner = live.swap_remove(k % live.len());
                    prop_assert!(a.free(&owner).is_ok());
                    prop_assert!(m.free(&owner));
                }
                Op::Free(_) => {}
            }
            let mut free: Vec<_> = a.free_blocks().collect();
            free.sort();
            prop_assert_eq!(free, m.sorted_free());
            prop_assert_eq!(a.allocated_bytes() + a.free_bytes(), arena);
            prop_assert_eq!(a.fragmentation_report(), model_census(&m));
        }
    }

    #[test]
    fn static_segment_never_walks(trace in prop::collection::vec(0u64..MIB, 0..500)) {
        let s = simulate_translation(&trace, &Region::new(0, MIB, "t"), &TranslationMode::StaticSegment).unwrap();
        prop_assert_eq!(s.page_walks, 0);
        prop_assert_eq!(s.tlb_hits, trace.len() as u64);
    }

    #[test]
    fn paged_tlb_matches_the_lru_oracle(
        trace in prop::collection::vec(0u64..MIB, 0..500),
        page_shift in 12u32..17,
        entries in 1usize..16,
    ) {
        let mode = TranslationMode::PagedTlb { page_size: 1 << page_shift, tlb_entries: entries };
        let s = simulate_translation(&trace, &Region::new(0, MIB, "t"), &mode).unwrap();
        let (hits, walks, distinct) = naive_lru(&trace, 1 << page_shift, entries);
        prop_assert_eq!((s.tlb_hits, s.page_walks, s.distinct_pages), (hits, walks, distinct));
        prop_assert_eq!(s.tlb_hits + s.page_walks, s.accesses);
    }
}
