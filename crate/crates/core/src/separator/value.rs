//! Separator value variants.

use std::fmt::Debug;

use crate::error::{Result, StarError};
use crate::registry::Named;

/// How the tokens of a separator cluster are valued. Vectors live in the
/// encoder's embedding space and bypass patch embedding.
pub trait SeparatorValue: Named + Debug + Send + Sync {
    /// Stable id used in binary dumps.
    fn code(&self) -> u8;

    /// True when the value is a trained parameter.
    fn learnable(&self) -> bool {
        false
    }

    /// Scalar value broadcast over token `(r, c)` of a `rows x cols` cluster.
    /// Learnable variants report `0.0`; their prediction target is the zero
    /// pattern.
    fn pattern(&self, rows: usize, cols: usize) -> Result<Vec<f32>>;

    /// The separator tokens, each of length `embed_dim`.
    fn tokens(
        &self,
        rows: usize,
        cols: usize,
        embed_dim: usize,
        _embedding: Option<&[f32]>,
    ) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .pattern(rows, cols)?
            .into_iter()
            .map(|v| vec![v; embed_dim])
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Zeros;

#[derive(Debug, Clone, Copy)]
pub struct Ones;

/// One learned vector shared by every separator token.
#[derive(Debug, Clone, Copy)]
pub struct Embeddings;

/// Ones on the cluster diagonal, zeros elsewhere.
#[derive(Debug, Clone, Copy)]
pub struct Identity;

impl Named for Zeros {
    fn name(&self) -> &'static str {
        "zeros"
    }
}

impl Named for Ones {
    fn name(&self) -> &'static str {
        "ones"
    }
}

impl Named for Embeddings {
    fn name(&self) -> &'static str {
        "embeddings"
    }
}

impl Named for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }
}

impl SeparatorValue for Zeros {
    fn code(&self) -> u8 {
        0
    }

    fn pattern(&self, rows: usize, cols: usize) -> Result<Vec<f32>> {
        Ok(vec![0.0; rows * cols])
    }
}

impl SeparatorValue for Ones {
    fn code(&self) -> u8 {
        1
    }

    fn pattern(&self, rows: usize, cols: usize) -> Result<Vec<f32>> {
        Ok(vec![1.0; rows * cols])
    }
}

impl SeparatorValue for Embeddings {
    fn code(&self) -> u8 {
        2
    }

    fn learnable(&self) -> bool {
        true
    }

    fn pattern(&self, rows: usize, cols: usize) -> Result<Vec<f32>> {
        Ok(vec![0.0; rows * cols])
    }

    fn tokens(
        &self,
        rows: usize,
        cols: usize,
        embed_dim: usize,
        embedding: Option<&[f32]>,
    ) -> Result<Vec<Vec<f32>>> {
        let e = embedding.ok_or_else(|| {
            StarError::InvalidArgument("embeddings separator needs its learned vector".into())
        })?;
        if e.len() != embed_dim {
            return Err(StarError::ShapeMismatch(format!(
                "separator embedding has {} entries, model width is {embed_dim}",
                e.len()
            )));
        }
        Ok(vec![e.to_vec(); rows * cols])
    }
}

impl SeparatorValue for Identity {
    fn code(&self) -> u8 {
        3
    }

    fn pattern(&self, rows: usize, cols: usize) -> Result<Vec<f32>> {
        if rows != cols {
            return Err(StarError::NonSquareCluster { rows, cols });
        }
        Ok((0..rows * cols)
            .map(|k| if k / cols == k % cols { 1.0 } else { 0.0 })
            .collect())
    }
}
