use crate::sasmem::Region;

use super::{TrapKind, PAGE_SIZE};

/// An access observed outside the memory size in force at the time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShadowViolation {
    pub offset: u64,
    pub len: u64,
    pub limit: u64,
}

/// Byte-granular record of every linear-memory offset an instance touched.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShadowMap {
    bits: Vec<u64>,
    violations: Vec<ShadowViolation>,
}

impl ShadowMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `[offset, offset + len)`; `limit` is the memory size the
    /// access was allowed against.
    pub fn record(&mut self, offset: u64, len: u64, limit: u64) {
        match offset.checked_add(len) {
            Some(end) if end <= limit => {}
            _ => {
                self.violations.push(ShadowViolation { offset, len, limit });
                return;
            }
        }
        for byte in offset..offset + len {
            let word = (byte / 64) as usize;
            if word >= self.bits.len() {
                self.bits.resize(word + 1, 0);
            }
            self.bits[word] |= 1 << (byte % 64);
        }
    }

    pub fn violations(&self) -> &[ShadowViolation] {
        &self.violations
    }

    pub fn is_touched(&self, offset: u64) -> bool {
        self.bits
            .get((offset / 64) as usize)
            .is_some_and(|w| w & (1 << (offset % 64)) != 0)
    }

    /// Highest touched offset plus one, or 0 when nothing was touched.
    pub fn touched_end(&self) -> u64 {
        for (i, w) in self.bits.iter().enumerate().rev() {
            if *w != 0 {
                return i as u64 * 64 + 64 - w.leading_zeros() as u64;
            }
        }
        0
    }

    pub fn touched_count(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Touched-offset set in canonical form, for equality checks.
    pub fn touched_words(&self) -> Vec<u64> {
        let mut bits = self.bits.clone();
        while bits.last() == Some(&0) {
            bits.pop();
        }
        bits
    }
}

/// A service's linear memory, backed by its arena region.
///
/// Only `[0, cur_pages * PAGE_SIZE)` is addressable; every accessor checks
/// that range before touching storage.
#[derive(Debug)]
pub struct LinearMemory {
    region: Region,
    bytes: Vec<u8>,
    max_pages: u32,
    shadow: Option<ShadowMap>,
}

impl LinearMemory {
    pub(crate) fn new(region: Region, mem_pages: u32, max_pages: u32) -> Self {
        LinearMemory {
            region,
            bytes: vec![0; (mem_pages as u64 * PAGE_SIZE) as usize],
            max_pages,
            shadow: None,
        }
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn cur_pages(&self) -> u32 {
        (self.bytes.len() as u64 / PAGE_SIZE) as u32
    }

    pub fn max_pages(&self) -> u32 {
        self.max_pages
    }

    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn enable_shadow(&mut self) {
        self.shadow = Some(ShadowMap::new());
    }

    pub fn shadow(&self) -> Option<&ShadowMap> {
        self.shadow.as_ref()
    }

    pub fn take_shadow(&mut self) -> Option<ShadowMap> {
        self.shadow.take()
    }

    /// Validates `[addr, addr + len)` against the current size.
    fn check(&self, addr: i64, len: u64) -> Result<usize, TrapKind> {
        if addr < 0 {
            return Err(TrapKind::OutOfBounds);
        }
        match (addr as u64).checked_add(len) {
            Some(end) if end <= self.size() => Ok(addr as usize),
            _ => Err(TrapKind::OutOfBounds),
        }
    }

    fn touch(&mut self, start: usize, len: usize) {
        let limit = self.size();
        if let Some(shadow) = self.shadow.as_mut() {
            shadow.record(start as u64, len as u64, limit);
        }
    }

    pub fn load_i64(&mut self, addr: i64) -> Result<i64, TrapKind> {
        let at = self.check(addr, 8)?;
        self.touch(at, 8);
        Ok(i64::from_le_bytes(self.bytes[at..at + 8].try_into().unwrap()))
    }

    pub fn store_i64(&mut self, addr: i64, value: i64) -> Result<(), TrapKind> {
        let at = self.check(addr, 8)?;
        self.touch(at, 8);
        self.bytes[at..at + 8].copy_from_slice(&value.to_le_bytes());
        Ok(())
    }

    pub fn read(&mut self, offset: u64, out: &mut [u8]) -> Result<(), TrapKind> {
        let at = self.check(i64::try_from(offset).map_err(|_| TrapKind::OutOfBounds)?, out.len() as u64)?;
        self.touch(at, out.len());
        out.copy_from_slice(&self.bytes[at..at + out.len()]);
        Ok(())
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) -> Result<(), TrapKind> {
        let at = self.check(i64::try_from(offset).map_err(|_| TrapKind::OutOfBounds)?, data.len() as u64)?;
        self.touch(at, data.len());
        self.bytes[at..at + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// Copies `len` bytes from `src` to `dst` inside this memory.
    pub fn copy_within(&mut self, src: u64, dst: u64, len: u64) -> Result<(), TrapKind> {
        let s = self.check(i64::try_from(src).map_err(|_| TrapKind::OutOfBounds)?, len)?;
        let d = self.check(i64::try_from(dst).map_err(|_| TrapKind::OutOfBounds)?, len)?;
        self.touch(s, len as usize);
        self.touch(d, len as usize);
        self.bytes.copy_within(s..s + len as usize, d);
        Ok(())
    }

    /// Grows by `delta` zeroed pages. Returns the previous page count, or -1
    /// if the result would exceed `max_pages` or the region.
    pub fn grow(&mut self, delta: i64) -> i64 {
        let cur = self.cur_pages() as i64;
        if delta < 0 {
            return -1;
        }
        let Some(new) = cur.checked_add(delta) else {
            return -1;
        };
        if new > self.max_pages as i64 || new as u64 * PAGE_SIZE > self.region.length {
            return -1;
        }
        self.bytes.resize((new as u64 * PAGE_SIZE) as usize, 0);
        cur
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.bytes.clone()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}
