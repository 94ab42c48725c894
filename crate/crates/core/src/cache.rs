//! Set-associative LRU tag array shared by the L1D and the L2 slices.
//!
//! Only presence is tracked, never data. Callers address the cache by a
//! *key*: the line index for an L1, or the line index divided by the number
//! of sub-partitions for an L2 slice (so that consecutive resident lines
//! spread over all sets). `set = key % num_sets`, `tag = key / num_sets`.

#[derive(Debug, Clone, Copy, Default)]
struct Line {
    valid: bool,
    dirty: bool,
    tag: u64,
    last_used: u64,
}

#[derive(Debug, Clone)]
pub struct SetAssocCache {
    lines: Vec<Line>,
    num_sets: usize,
    assoc: usize,
    stamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Install {
    pub evicted_dirty: bool,
}

impl SetAssocCache {
    pub fn new(size_bytes: u64, line_bytes: u64, assoc: usize) -> Self {
        let num_lines = (size_bytes / line_bytes) as usize;
        assert!(assoc >= 1 && num_lines.is_multiple_of(assoc));
        let num_sets = num_lines / assoc;
        Self {
            lines: vec![Line::default(); num_lines],
            num_sets,
            assoc,
            stamp: 0,
        }
    }

    pub fn num_sets(&self) -> usize {
        self.num_sets
    }

    pub fn assoc(&self) -> usize {
        self.assoc
    }

    fn set_range(&self, key: u64) -> std::ops::Range<usize> {
        let set = (key % self.num_sets as u64) as usize;
        set * self.assoc..(set + 1) * self.assoc
    }

    /// Probes for a line; a hit refreshes LRU state and optionally marks the
    /// line dirty. A miss leaves the set untouched.
    pub fn probe(&mut self, key: u64, mark_dirty: bool) -> bool {
        let tag = key / self.num_sets as u64;
        self.stamp += 1;
        let stamp = self.stamp;
        let range = self.set_range(key);
        for line in &mut self.lines[range] {
            if line.valid && line.tag == tag {
                line.last_used = stamp;
                line.dirty |= mark_dirty;
                return true;
            }
        }
        false
    }

    pub fn contains(&self, key: u64) -> bool {
        let tag = key / self.num_sets as u64;
        self.lines[self.set_range(key)]
            .iter()
            .any(|l| l.valid && l.tag == tag)
    }

    /// Installs a line, evicting the LRU way if the set is full. Installing
    /// a line that is already present just refreshes it.
    pub fn install(&mut self, key: u64, dirty: bool) -> Install {
        let tag = key / self.num_sets as u64;
        self.stamp += 1;
        let stamp = self.stamp;
        let range = self.set_range(key);
        let set = &mut self.lines[range];
        let mut victim = 0;
        let mut victim_stamp = u64::MAX;
        for (i, line) in set.iter_mut().enumerate() {
            if line.valid && line.tag == tag {
                line.last_used = stamp;
                line.dirty |= dirty;
                return Install {
                    evicted_dirty: false,
                };
            }
            if !line.valid {
                victim = i;
                victim_stamp = 0;
            } else if line.last_used < victim_stamp {
                victim = i;
                victim_stamp = line.last_used;
            }
        }
        let evicted_dirty = set[victim].valid && set[victim].dirty;
        set[victim] = Line {
            valid: true,
            dirty,
            tag,
            last_used: stamp,
        };
        Install { evicted_dirty }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_then_install_then_hit() {
        let mut c = SetAssocCache::new(1024, 128, 2);
        assert!(!c.probe(3, false));
        c.install(3, false);
        assert!(c.probe(3, false));
    }

    #[test]
    fn lru_eviction_order() {
        // One set: 4 lines, 128 B each, 4-way.
        let mut c = SetAssocCache::new(512, 128, 4);
        for key in 0..4 {
            c.install(key, false);
        }
        assert!(c.probe(0, false)); // 0 becomes most recent
        c.install(4, false); // evicts key 1, the LRU
        assert!(c.contains(0));
        assert!(!c.contains(1));
        assert!(c.contains(4));
    }

    #[test]
    fn dirty_eviction_reported() {
        let mut c = SetAssocCache::new(256, 128, 2);
        c.install(0, true);
        c.install(2, false);
        let out = c.install(4, false); // evicts dirty key 0
        assert!(out.evicted_dirty);
    }
}
