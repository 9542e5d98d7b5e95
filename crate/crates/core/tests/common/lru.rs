//! List-based LRU TLB.

use std::collections::HashSet;

/// `(hits, walks, distinct_pages)` for `trace` under a fully associative
/// LRU TLB of `entries` slots. The most recently used page is at the front.
pub fn naive_lru(trace: &[u64], page_size: u64, entries: usize) -> (u64, u64, u64) {
    let mut list: Vec<u64> = Vec::new();
    let mut seen = HashSet::new();
    let (mut hits, mut walks) = (0, 0);
    for &off in trace {
        let page = off / page_size;
        seen.insert(page);
        match list.iter().position(|&p| p == page) {
            Some(i) => {
                hits += 1;
                list.remove(i);
            }
            None => {
                walks += 1;
                if list.len() == entries {
                    list.pop();
                }
            }
        }
        list.insert(0, page);
    }
    (hits, walks, seen.len() as u64)
}
