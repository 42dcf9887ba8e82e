use std::collections::BTreeMap;

/// Tally of scalar multiply-accumulates, keyed by operation label.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    total: u64,
    per_label: BTreeMap<String, u64>,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, label: &str, macs: u64) {
        self.total += macs;
        *self.per_label.entry(label.to_string()).or_insert(0) += macs;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, label: &str) -> u64 {
        self.per_label.get(label).copied().unwrap_or(0)
    }

    pub fn per_label(&self) -> &BTreeMap<String, u64> {
        &self.per_label
    }

    pub fn merge(&mut self, other: &MacCounter) {
        for (label, &n) in &other.per_label {
            self.add(label, n);
        }
    }
}
