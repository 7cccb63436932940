//! Multiply-accumulate counter.
//!
//! Tracks the MAC-dominant kernels (matmul and conv); elementwise,
//! normalization and data-movement ops contribute nothing. This is the
//! instrument behind the windowed-vs-global attention complexity check:
//! counts are exact functions of shapes, not timings.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Default)]
pub struct FlopCounter {
    total: u64,
    by_op: BTreeMap<&'static str, u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, key: &'static str, macs: u64) {
        self.total += macs;
        *self.by_op.entry(key).or_insert(0) += macs;
    }

    /// Cumulative MAC count across all recorded operations.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// MACs attributed to one breakdown key, 0 if never recorded.
    pub fn for_key(&self, key: &str) -> u64 {
        self.by_op.get(key).copied().unwrap_or(0)
    }

    pub fn breakdown(&self) -> &BTreeMap<&'static str, u64> {
        &self.by_op
    }

    pub fn reset(&mut self) {
        self.total = 0;
        self.by_op.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn additive_and_resettable() {
        let mut c = FlopCounter::new();
        c.add("matmul", 10);
        c.add("conv", 5);
        c.add("matmul", 7);
        assert_eq!(c.total(), 22);
        assert_eq!(c.for_key("matmul"), 17);
        assert_eq!(c.for_key("conv"), 5);
        assert_eq!(c.for_key("nope"), 0);
        c.reset();
        assert_eq!(c.total(), 0);
        assert!(c.breakdown().is_empty());
    }
}
