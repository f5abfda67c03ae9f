//! Byte-addressed memories and the per-CPE write-back cache.
//!
//! Main memory is shared; each CPE owns a scratchpad (LDM) addressable only
//! by itself at unit cost, and by others solely through the RMA/mailbox
//! paths. An optional slice of the LDM acts as a direct-mapped write-back
//! cache over main memory with 64-byte lines and no coherence: dirty lines
//! are invisible to other cores until flushed.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Main,
    Ldm(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Addr {
    pub space: Space,
    pub off: u64,
}

impl Addr {
    pub fn main(off: u64) -> Addr {
        Addr { space: Space::Main, off }
    }

    pub fn ldm(core: u8, off: u64) -> Addr {
        Addr { space: Space::Ldm(core), off }
    }

    pub fn add(self, delta: u64) -> Addr {
        Addr { space: self.space, off: self.off + delta }
    }
}

pub const CACHE_LINE: u64 = 64;

#[derive(Debug, Clone)]
struct Line {
    tag: u64,
    valid: bool,
    dirty: bool,
    data: [u8; CACHE_LINE as usize],
}

/// Direct-mapped write-back cache over main memory.
#[derive(Debug, Clone)]
pub struct Cache {
    lines: Vec<Line>,
}

pub enum Hit {
    Disabled,
    Hit,
    Miss { writeback: bool },
}

impl Cache {
    pub fn new(bytes: u64) -> Cache {
        let n = (bytes / CACHE_LINE) as usize;
        Cache {
            lines: vec![
                Line { tag: 0, valid: false, dirty: false, data: [0; CACHE_LINE as usize] };
                n
            ],
        }
    }

    pub fn enabled(&self) -> bool {
        !self.lines.is_empty()
    }

    fn index(&self, line_addr: u64) -> usize {
        (line_addr % self.lines.len() as u64) as usize
    }

    /// Access `len <= 8` bytes at main-memory `off` through the cache,
    /// filling or writing back lines against `main` as needed.
    pub fn access(
        &mut self,
        main: &mut [u8],
        off: u64,
        buf: &mut [u8],
        write: bool,
    ) -> Hit {
        if !self.enabled() {
            if write {
                main[off as usize..off as usize + buf.len()].copy_from_slice(buf);
            } else {
                buf.copy_from_slice(&main[off as usize..off as usize + buf.len()]);
            }
            return Hit::Disabled;
        }
        debug_assert!(buf.len() <= 8);
        let line_addr = off / CACHE_LINE;
        // accesses crossing a line boundary take the slow path on both lines;
        // 8-aligned scalar accesses never cross
        debug_assert_eq!((off + buf.len() as u64 - 1) / CACHE_LINE, line_addr);
        let idx = self.index(line_addr);
        let hit = self.lines[idx].valid && self.lines[idx].tag == line_addr;
        let mut wb = false;
        if !hit {
            let line = &mut self.lines[idx];
            if line.valid && line.dirty {
                let base = line.tag * CACHE_LINE;
                main[base as usize..(base + CACHE_LINE) as usize].copy_from_slice(&line.data);
                wb = true;
            }
            let base = line_addr * CACHE_LINE;
            line.data.copy_from_slice(&main[base as usize..(base + CACHE_LINE) as usize]);
            line.tag = line_addr;
            line.valid = true;
            line.dirty = false;
        }
        let line = &mut self.lines[idx];
        let in_line = (off % CACHE_LINE) as usize;
        if write {
            line.data[in_line..in_line + buf.len()].copy_from_slice(buf);
            line.dirty = true;
        } else {
            buf.copy_from_slice(&line.data[in_line..in_line + buf.len()]);
        }
        if hit {
            Hit::Hit
        } else {
            Hit::Miss { writeback: wb }
        }
    }

    /// Write back all dirty lines and invalidate; returns the number of
    /// lines written back.
    pub fn flush(&mut self, main: &mut [u8]) -> u64 {
        let mut written = 0;
        for line in &mut self.lines {
            if line.valid && line.dirty {
                let base = line.tag * CACHE_LINE;
                main[base as usize..(base + CACHE_LINE) as usize].copy_from_slice(&line.data);
                written += 1;
            }
            line.valid = false;
            line.dirty = false;
        }
        written
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writeback_invisible_until_flush() {
        let mut main = vec![0u8; 4096];
        let mut cache = Cache::new(256);
        let mut buf = 7u64.to_le_bytes();
        cache.access(&mut main, 128, &mut buf, true);
        // dirty line: main memory still zero
        assert_eq!(&main[128..136], &[0; 8]);
        let wb = cache.flush(&mut main);
        assert_eq!(wb, 1);
        assert_eq!(u64::from_le_bytes(main[128..136].try_into().unwrap()), 7);
        // clean flush writes nothing
        assert_eq!(cache.flush(&mut main), 0);
    }

    #[test]
    fn read_after_write_hits() {
        let mut main = vec![0u8; 4096];
        let mut cache = Cache::new(128);
        let mut buf = 3u64.to_le_bytes();
        assert!(matches!(cache.access(&mut main, 0, &mut buf, true), Hit::Miss { .. }));
        let mut out = [0u8; 8];
        assert!(matches!(cache.access(&mut main, 0, &mut out, false), Hit::Hit));
        assert_eq!(u64::from_le_bytes(out), 3);
    }

    #[test]
    fn conflicting_lines_evict_with_writeback() {
        let mut main = vec![0u8; 4096];
        let mut cache = Cache::new(64); // one line
        let mut a = 1u64.to_le_bytes();
        cache.access(&mut main, 0, &mut a, true);
        let mut b = 2u64.to_le_bytes();
        // maps to the same single line: evicts and writes back line 0
        match cache.access(&mut main, 64, &mut b, true) {
            Hit::Miss { writeback } => assert!(writeback),
            _ => panic!("expected miss"),
        }
        assert_eq!(u64::from_le_bytes(main[0..8].try_into().unwrap()), 1);
    }
}
