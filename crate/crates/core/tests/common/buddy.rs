//! Buddy allocation modelled as a flat list of free blocks.

pub const MIN_CLASS: u32 = 16;

#[derive(Clone, Debug, Default)]
pub struct BuddyModel {
    pub arena_class: u32,
    /// `(class, base)` of every free block, unordered.
    pub free: Vec<(u32, u64)>,
    /// `(owner, base, class)` of every allocation.
    pub used: Vec<(String, u64, u32)>,
}

pub fn class_of(size: u64) -> u32 {
    let mut c = MIN_CLASS;
    while (1u128 << c) < size as u128 {
        c += 1;
    }
    c
}

impl BuddyModel {
    pub fn new(arena: u64) -> Self {
        let arena_class = arena.trailing_zeros();
        BuddyModel {
            arena_class,
            free: vec![(arena_class, 0)],
            used: Vec::new(),
        }
    }

    /// Smallest sufficient free block, lowest base on ties, split down.
    pub fn allocate(&mut self, owner: &str, size: u64) -> Option<(u64, u64)> {
        if size == 0 || self.used.iter().any(|u| u.0 == owner) {
            return None;
        }
        let want = class_of(size);
        let pick = self
            .free
            .iter()
            .enumerate()
            .filter(|(_, b)| b.0 >= want)
            .min_by_key(|(_, b)| (b.0, b.1))
            .map(|(i, _)| i)?;
        let (mut class, base) = self.free.swap_remove(pick);
        while class > want {
            class -= 1;
            self.free.push((class, base + (1 << class)));
        }
        self.used.push((owner.to_string(), base, want));
        Some((base, 1 << want))
    }

    pub fn free(&mut self, owner: &str) -> bool {
        let Some(i) = self.used.iter().position(|u| u.0 == owner) else {
            return false;
        };
        let (_, mut base, mut class) = self.used.swap_remove(i);
        while class < self.arena_class {
            let buddy = base ^ (1 << class);
            match self.free.iter().position(|b| *b == (class, buddy)) {
                Some(j) => {
                    self.free.swap_remove(j);
                    base = base.min(buddy);
                    class += 1;
                }
                None => break,
            }
        }
        self.free.push((class, base));
        true
    }

    pub fn sorted_free(&self) -> Vec<(u32, u64)> {
        let mut v = self.free.clone();
        v.sort();
        v
    }
}
