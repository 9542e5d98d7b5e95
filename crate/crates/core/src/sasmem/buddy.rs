//! Binary-buddy allocation of service regions.
//!
//! Every region is a power of two of at least 64 KiB and is aligned to its own
//! length, so a region is described completely by `(base, bucket_class)`.
//! Freed blocks merge with their buddy whenever the buddy is free too.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

pub const MIN_REGION_CLASS: u32 = 16;
pub const MIN_REGION_SIZE: u64 = 1 << MIN_REGION_CLASS;

/// A contiguous, length-aligned slice of the arena owned by one service.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Region {
    pub base: u64,
    pub length: u64,
    pub owner: String,
    pub bucket_class: u32,
}

impl Region {
    pub fn new(base: u64, length: u64, owner: &str) -> Self {
        Region {
            base,
            length,
            owner: owner.to_string(),
            bucket_class: length.trailing_zeros(),
        }
    }

    pub fn end(&self) -> u64 {
        self.base + self.length
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.base < other.end() && other.base < self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("requested size is zero")]
    ZeroSize,
    #[error("no free block can hold {requested} bytes")]
    OutOfArena { requested: u64 },
    #[error("no region owned by {0:?}")]
    UnknownOwner(String),
    #[error("{0:?} already owns a region")]
    DuplicateOwner(String),
    #[error("arena size {0} is not a power of two of at least 64 KiB")]
    InvalidArena(u64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BucketCensus {
    pub free_blocks: usize,
    pub allocated_blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuddyAllocator {
    arena_size: u64,
    arena_class: u32,
    /// Free block bases per class; classes with no free blocks are absent.
    free: BTreeMap<u32, BTreeSet<u64>>,
    allocated: BTreeMap<String, Region>,
}

fn class_for(size: u64) -> u32 {
    let len = size.max(MIN_REGION_SIZE).checked_next_power_of_two().unwrap_or(0);
    if len == 0 {
        64
    } else {
        len.trailing_zeros()
    }
}

impl BuddyAllocator {
    pub fn new(arena_size: u64) -> Result<Self, AllocError> {
        if !arena_size.is_power_of_two() || arena_size < MIN_REGION_SIZE {
            return Err(AllocError::InvalidArena(arena_size));
        }
        let arena_class = arena_size.trailing_zeros();
        let mut free = BTreeMap::new();
        free.insert(arena_class, BTreeSet::from([0]));
        Ok(BuddyAllocator {
            arena_size,
            arena_class,
            free,
            allocated: BTreeMap::new(),
        })
    }

    pub fn arena_size(&self) -> u64 {
        self.arena_size
    }

    /// Allocates `next_pow2(max(size, 64 KiB))` bytes, splitting the smallest
    /// sufficient free block.
    pub fn allocate(&mut self, owner: &str, size: u64) -> Result<Region, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        if self.allocated.contains_key(owner) {
            return Err(AllocError::DuplicateOwner(owner.to_string()));
        }
        let want = class_for(size);
        let oom = AllocError::OutOfArena { requested: size };
        if want > self.arena_class {
            return Err(oom);
        }
        let (mut class, base) = self
            .free
            .range(want..)
            .find_map(|(c, set)| set.first().map(|b| (*c, *b)))
            .ok_or(oom)?;
        self.take_free(class, base);
        while class > want {
            class -= 1;
            self.free.entry(class).or_default().insert(base + (1 << class));
        }
        let region = Region::new(base, 1 << want, owner);
        self.allocated.insert(owner.to_string(), region.clone());
        Ok(region)
    }

    /// Returns the owner's block and merges it upward with free buddies.
    pub fn free(&mut self, owner: &str) -> Result<(), AllocError> {
        let region = self
            .allocated
            .remove(owner)
            .ok_or_else(|| AllocError::UnknownOwner(owner.to_string()))?;
        let mut base = region.base;
        let mut class = region.bucket_class;
        while class < self.arena_class {
            let buddy = base ^ (1 << class);
            if !self.take_free(class, buddy) {
                break;
            }
            base = base.min(buddy);
            class += 1;
        }
        self.free.entry(class).or_default().insert(base);
        Ok(())
    }

    fn take_free(&mut self, class: u32, base: u64) -> bool {
        let Some(set) = self.free.get_mut(&class) else {
            return false;
        };
        let removed = set.remove(&base);
        if set.is_empty() {
            self.free.remove(&class);
        }
        removed
    }

    pub fn region(&self, owner: &str) -> Option<&Region> {
        self.allocated.get(owner)
    }

    pub fn regions(&self) -> impl Iterator<Item = &Region> {
        self.allocated.values()
    }

    pub fn free_blocks(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.free
            .iter()
            .flat_map(|(c, set)| set.iter().map(move |b| (*c, *b)))
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated.values().map(|r| r.length).sum()
    }

    pub fn free_bytes(&self) -> u64 {
        self.free_blocks().map(|(c, _)| 1u64 << c).sum()
    }

    /// Exact census of free and allocated blocks per bucket class.
    pub fn fragmentation_report(&self) -> BTreeMap<u32, BucketCensus> {
        let mut out: BTreeMap<u32, BucketCensus> = BTreeMap::new();
        for (class, set) in &self.free {
            out.entry(*class).or_default().free_blocks += set.len();
        }
        for r in self.allocated.values() {
            out.entry(r.bucket_class).or_default().allocated_blocks += 1;
        }
        out
    }
}
