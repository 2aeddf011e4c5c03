//! Where the classification token sits in a fine-tuning sequence.

use std::fmt::Debug;

use crate::registry::Named;

pub trait ClassTokenPolicy: Named + Debug + Send + Sync {
    /// Insertion index among `n` image tokens; the result has `n + 1`.
    fn insert_index(&self, n: usize) -> usize;
}

/// After every image token.
#[derive(Debug, Clone, Copy)]
pub struct Tail;

/// At `⌊n/2⌋`.
#[derive(Debug, Clone, Copy)]
pub struct Middle;

impl Named for Tail {
    fn name(&self) -> &'static str {
        "tail"
    }
}

impl Named for Middle {
    fn name(&self) -> &'static str {
        "middle"
    }
}

impl ClassTokenPolicy for Tail {
    fn insert_index(&self, n: usize) -> usize {
        n
    }
}

impl ClassTokenPolicy for Middle {
    fn insert_index(&self, n: usize) -> usize {
        n / 2
    }
}
