//! Token traversal orders used by the encoder's token mixer.

use std::fmt::Debug;

use crate::error::{Result, StarError};
use crate::registry::Named;

use super::encoder::EncoderInput;

/// A scan mode decides in which orders the token mixer visits the sequence.
/// Each returned path is a permutation of sequence positions.
pub trait ScanMode: Named + Debug + Send + Sync {
    /// Whether position `t` only ever sees positions `<= t`.
    fn is_causal(&self) -> bool;

    fn paths(&self, input: &EncoderInput) -> Result<Vec<Vec<usize>>>;
}

/// One left-to-right pass over the packed order.
#[derive(Debug, Clone, Copy)]
pub struct OneScan;

/// Four passes over the patch grid of a single image: row-major with columns
/// left-to-right and right-to-left, and column-major (bottom-to-top inside a
/// column) with columns left-to-right and right-to-left. Tokens without a
/// grid position (the class token) keep their sequence slot in every path.
#[derive(Debug, Clone, Copy)]
pub struct FourScan;

impl Named for OneScan {
    fn name(&self) -> &'static str {
        "one-scan"
    }
}

impl Named for FourScan {
    fn name(&self) -> &'static str {
        "four-scan"
    }
}

impl ScanMode for OneScan {
    fn is_causal(&self) -> bool {
        true
    }

    fn paths(&self, input: &EncoderInput) -> Result<Vec<Vec<usize>>> {
        Ok(vec![(0..input.len()).collect()])
    }
}

impl ScanMode for FourScan {
    fn is_causal(&self) -> bool {
        false
    }

    fn paths(&self, input: &EncoderInput) -> Result<Vec<Vec<usize>>> {
        if input.images != 1 || input.has_separators() {
            return Err(StarError::FourScanPacked);
        }
        let (h, w) = input.grid_shape;
        let grid_slots: Vec<usize> = (0..input.len())
            .filter(|&k| input.grid[k].is_some())
            .collect();
        let keys: [&dyn Fn(usize, usize) -> (usize, usize); 4] = [
            &|r, c| (r, c),
            &|r, c| (r, w - 1 - c),
            &|r, c| (c, h - 1 - r),
            &|r, c| (w - 1 - c, h - 1 - r),
        ];
        Ok(keys
            .iter()
            .map(|key| {
                let mut visit = grid_slots.clone();
                visit.sort_by_key(|&k| {
                    let (r, c) = input.grid[k].expect("grid slot");
                    key(r, c)
                });
                let mut path: Vec<usize> = (0..input.len()).collect();
                for (slot, k) in grid_slots.iter().zip(visit) {
                    path[*slot] = k;
                }
                path
            })
            .collect())
    }
}

/// `inv[path[i]] = i`.
pub fn invert(path: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; path.len()];
    for (i, &p) in path.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
