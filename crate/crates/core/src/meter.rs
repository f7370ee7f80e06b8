use std::sync::atomic::{AtomicI64, Ordering};

/// Thread-safe byte counter with a monotonic high-water mark.
#[derive(Debug, Default)]
pub struct MemoryMeter {
    current: AtomicI64,
    peak: AtomicI64,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, bytes: usize) {
        let now = self.current.fetch_add(bytes as i64, Ordering::SeqCst) + bytes as i64;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    pub fn sub(&self, bytes: usize) {
        self.current.fetch_sub(bytes as i64, Ordering::SeqCst);
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst).max(0) as usize
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst).max(0) as usize
    }

    /// Restarts the high-water mark from the current level.
    pub fn reset_peak(&self) {
        self.peak.store(self.current.load(Ordering::SeqCst), Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_is_monotone() {
        let m = MemoryMeter::new();
        m.add(100);
        m.add(50);
        m.sub(120);
        m.add(10);
        assert_eq!(m.current(), 40);
        assert_eq!(m.peak(), 150);
        m.reset_peak();
        assert_eq!(m.peak(), 40);
    }
}
