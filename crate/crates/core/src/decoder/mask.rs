//! Block-causal attention permissions derived from cluster ids.

use crate::error::{Result, StarError};
use crate::separator::PackedSequence;

/// `allow[q][k]` is true iff key `k` sits in the same or an earlier cluster
/// than query `q`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCausalMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

/// Signature shared by the real rule and test fixtures.
pub type MaskBuilder = fn(&[usize]) -> Result<BlockCausalMask>;

impl BlockCausalMask {
    pub fn build(cluster_ids: &[usize]) -> Result<Self> {
        if let Some(p) = cluster_ids.windows(2).position(|w| w[1] < w[0]) {
            return Err(StarError::DecreasingClusterIds {
                position: p + 1,
                prev: cluster_ids[p],
                next: cluster_ids[p + 1],
            });
        }
        let n = cluster_ids.len();
        let mut allow = vec![false; n * n];
        // ids are sorted, so each row is a prefix of trues
        let mut end = 0;
        for q in 0..n {
            while end < n && cluster_ids[end] <= cluster_ids[q] {
                end += 1;
            }
            allow[q * n..q * n + end].fill(true);
        }
        Ok(Self {
            rows: n,
            cols: n,
            allow,
        })
    }

    /// Wraps an explicit permission matrix (row-major).
    pub fn from_allow(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(StarError::ShapeMismatch(format!(
                "{} mask entries for {rows}x{cols}",
                allow.len()
            )));
        }
        Ok(Self { rows, cols, allow })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.cols..(q + 1) * self.cols]
    }

    /// `#` for allowed, `·` for blocked, one line per query.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols * 2 + 1));
        for q in 0..self.rows {
            for &a in self.row(q) {
                s.push(if a { '#' } else { '·' });
            }
            s.push('\n');
        }
        s
    }
}

pub fn build_mask(cluster_ids: &[usize]) -> Result<BlockCausalMask> {
    BlockCausalMask::build(cluster_ids)
}

pub fn mask_for(packed: &PackedSequence) -> Result<BlockCausalMask> {
    build_mask(&packed.cluster_ids())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_blocks() {
        let m = build_mask(&[0, 0, 1, 1]).unwrap();
        assert_eq!(m.render(), "##··\n##··\n####\n####\n");
    }

    #[test]
    fn single_cluster_is_all_true() {
        let m = build_mask(&[3; 5]).unwrap();
        assert!((0..5).all(|q| m.row(q).iter().all(|&a| a)));
    }

    #[test]
    fn decreasing_ids_are_rejected() {
        let err = build_mask(&[0, 1, 0]).unwrap_err();
        assert!(matches!(
            err,
            StarError::DecreasingClusterIds { position: 2, .. }
        ));
    }

    #[test]
    fn matches_double_loop_on_ragged_ids() {
        let ids = [0, 0, 0, 2, 2, 5, 6, 6, 6, 6];
        let m = build_mask(&ids).unwrap();
        for q in 0..ids.len() {
            for k in 0..ids.len() {
                assert_eq!(m.allowed(q, k), ids[k] <= ids[q]);
            }
        }
    }

    #[test]
    fn empty_sequence() {
        let m = build_mask(&[]).unwrap();
        assert_eq!(m.render(), "");
    }
}
