//! Adaptive frequency tables keyed by (level, parent occupancy byte).

use std::collections::HashMap;

/// Amount added to a symbol's count after it is coded.
pub const COUNT_INCREMENT: u32 = 32;
/// Table totals never exceed this; on overflow every count is halved (floor 1).
pub const COUNT_LIMIT: u32 = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextId(u32);

impl ContextId {
    pub fn new(level: u32, parent: u8) -> Self {
        ContextId(level << 8 | u32::from(parent))
    }

    pub fn level(self) -> u32 {
        self.0 >> 8
    }

    pub fn parent(self) -> u8 {
        (self.0 & 0xFF) as u8
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: [u32; 256],
    total: u32,
}

impl Default for FrequencyTable {
    fn default() -> Self {
        FrequencyTable {
            counts: [1; 256],
            total: 256,
        }
    }
}

impl FrequencyTable {
    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn count(&self, symbol: u8) -> u32 {
        self.counts[usize::from(symbol)]
    }

    /// Cumulative count below `symbol` and the symbol's own count.
    pub fn interval(&self, symbol: u8) -> (u32, u32) {
        let s = usize::from(symbol);
        (self.counts[..s].iter().sum(), self.counts[s])
    }

    /// Symbol whose interval contains `target`, with its interval.
    pub fn find(&self, target: u32) -> (u8, u32, u32) {
        debug_assert!(target < self.total);
        let mut cum = 0;
        for (s, &c) in self.counts.iter().enumerate() {
            if target < cum + c {
                return (s as u8, cum, c);
            }
            cum += c;
        }
        unreachable!("target beyond table total")
    }

    pub fn update(&mut self, symbol: u8) {
        self.counts[usize::from(symbol)] += COUNT_INCREMENT;
        self.total += COUNT_INCREMENT;
        if self.total > COUNT_LIMIT {
            self.total = 0;
            for c in &mut self.counts {
                *c = (*c >> 1).max(1);
                self.total += *c;
            }
        }
    }
}

/// Lazily populated set of frequency tables. Encoder and decoder must start
/// from equal models and see the same context sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContextModel {
    tables: HashMap<ContextId, FrequencyTable>,
}

impl ContextModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn table(&mut self, ctx: ContextId) -> &mut FrequencyTable {
        self.tables.entry(ctx).or_default()
    }

    pub fn context_count(&self) -> usize {
        self.tables.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplace_start_and_rescale() {
        let mut t = FrequencyTable::default();
        assert_eq!(t.total(), 256);
        assert_eq!(t.interval(3), (3, 1));
        for _ in 0..5000 {
            t.update(7);
            assert!(t.total() <= COUNT_LIMIT);
            assert_eq!(t.total(), (0..=255u8).map(|s| t.count(s)).sum::<u32>());
        }
        assert!((0..=255u8).all(|s| t.count(s) >= 1));
        assert!(t.count(7) > COUNT_LIMIT / 2);
    }

    #[test]
    fn find_inverts_interval() {
        let mut t = FrequencyTable::default();
        for s in [0u8, 0, 5, 255, 255, 255] {
            t.update(s);
        }
        for s in 0..=255u8 {
            let (lo, f) = t.interval(s);
            assert_eq!(t.find(lo), (s, lo, f));
            assert_eq!(t.find(lo + f - 1), (s, lo, f));
        }
    }

    #[test]
    fn context_id_fields() {
        let c = ContextId::new(7, 0xA5);
        assert_eq!((c.level(), c.parent()), (7, 0xA5));
    }
}
