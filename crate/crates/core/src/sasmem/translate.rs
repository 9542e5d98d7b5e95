//! Address-translation cost model.
//!
//! `PagedTlb` replays a trace through a fully associative LRU TLB and counts
//! a page walk on every miss. `StaticSegment` models a region whose mapping
//! is fixed at deployment: one base-plus-offset translation, never a walk.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use super::Region;

pub const TRANSLATION_CSV_HEADER: &str = "mode,accesses,tlb_hits,page_walks,distinct_pages";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TranslationMode {
    PagedTlb { page_size: u64, tlb_entries: usize },
    StaticSegment,
}

impl fmt::Display for TranslationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TranslationMode::PagedTlb {
                page_size,
                tlb_entries,
            } => write!(f, "paged_tlb:{page_size}:{tlb_entries}"),
            TranslationMode::StaticSegment => f.write_str("static_segment"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TranslationStats {
    pub accesses: u64,
    pub tlb_hits: u64,
    pub page_walks: u64,
    /// Distinct translation units touched: pages for `PagedTlb`, the single
    /// segment for `StaticSegment`.
    pub distinct_pages: u64,
}

impl TranslationStats {
    pub fn csv_row(&self, mode: &TranslationMode) -> String {
        format!(
            "{mode},{},{},{},{}",
            self.accesses, self.tlb_hits, self.page_walks, self.distinct_pages
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TranslationError {
    #[error("trace entry {index} offset {offset} outside region of {length} bytes")]
    OffsetOutOfRegion { index: usize, offset: u64, length: u64 },
    #[error("invalid translation mode: {0}")]
    InvalidMode(String),
}

/// Fully associative LRU set keyed by page number.
struct LruTlb {
    capacity: usize,
    stamp_of: HashMap<u64, u64>,
    by_stamp: BTreeMap<u64, u64>,
    clock: u64,
}

impl LruTlb {
    fn new(capacity: usize) -> Self {
        LruTlb {
            capacity,
            stamp_of: HashMap::with_capacity(capacity + 1),
            by_stamp: BTreeMap::new(),
            clock: 0,
        }
    }

    /// Touches `page`; returns true on a hit.
    fn access(&mut self, page: u64) -> bool {
        self.clock += 1;
        let hit = match self.stamp_of.insert(page, self.clock) {
            Some(old) => {
                self.by_stamp.remove(&old);
                true
            }
            None => false,
        };
        self.by_stamp.insert(self.clock, page);
        if self.stamp_of.len() > self.capacity {
            let (_, victim) = self.by_stamp.pop_first().expect("non-empty");
            self.stamp_of.remove(&victim);
        }
        hit
    }
}

pub fn simulate_translation(
    trace: &[u64],
    region: &Region,
    mode: &TranslationMode,
) -> Result<TranslationStats, TranslationError> {
    if let Some((index, &offset)) = trace.iter().enumerate().find(|(_, o)| **o >= region.length) {
        return Err(TranslationError::OffsetOutOfRegion {
            index,
            offset,
            length: region.length,
        });
    }
    let accesses = trace.len() as u64;
    match *mode {
        TranslationMode::StaticSegment => Ok(TranslationStats {
            accesses,
            tlb_hits: accesses,
            page_walks: 0,
            distinct_pages: u64::from(accesses > 0),
        }),
        TranslationMode::PagedTlb {
            page_size,
            tlb_entries,
        } => {
            if !page_size.is_power_of_two() {
                return Err(TranslationError::InvalidMode(format!(
                    "page size {page_size} is not a power of two"
                )));
            }
            if !region.length.is_multiple_of(page_size) {
                return Err(TranslationError::InvalidMode(format!(
                    "page size {page_size} does not divide region length {}",
                    region.length
                )));
            }
            if tlb_entries == 0 {
                return Err(TranslationError::InvalidMode("TLB needs at least one entry".into()));
            }
            let shift = page_size.trailing_zeros();
            let mut tlb = LruTlb::new(tlb_entries);
            let mut distinct = HashSet::new();
            let mut hits = 0u64;
            for &offset in trace {
                let page = offset >> shift;
                distinct.insert(page);
                if tlb.access(page) {
                    hits += 1;
                }
            }
            Ok(TranslationStats {
                accesses,
                tlb_hits: hits,
                page_walks: accesses - hits,
                distinct_pages: distinct.len() as u64,
            })
        }
    }
}
