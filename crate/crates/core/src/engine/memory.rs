use std::collections::VecDeque;

/// Capacity of a `naive-store` memory that declares none.
pub const DEFAULT_STORE_CAPACITY: usize = 32;

/// Keeps the most recent entries up to a fixed capacity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecencyStore {
    capacity: usize,
    items: VecDeque<String>,
}

impl RecencyStore {
    pub fn new(capacity: Option<u32>) -> Self {
        RecencyStore {
            capacity: capacity.map_or(DEFAULT_STORE_CAPACITY, |c| c as usize),
            items: VecDeque::new(),
        }
    }

    pub fn remember(&mut self, item: impl Into<String>) {
        if self.capacity == 0 {
            return;
        }
        self.items.push_back(item.into());
        while self.items.len() > self.capacity {
            self.items.pop_front();
        }
    }

    /// Oldest first.
    pub fn recall(&self) -> Vec<String> {
        self.items.iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
