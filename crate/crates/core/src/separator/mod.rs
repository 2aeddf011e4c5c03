//! Separator clusters, layouts and multi-image packing.

pub mod dump;
pub mod layout;
pub mod pack;
pub mod value;

use std::sync::Arc;

use crate::error::Result;

pub use layout::{LayoutStrategy, Slot};
pub use pack::{
    pack, position_ids, PackOptions, PackedSequence, PackedToken, TokenMeta, TokenPayload,
};
pub use value::SeparatorValue;

#[derive(Clone, Debug)]
pub struct SeparatorSpec {
    pub value: Arc<dyn SeparatorValue>,
    pub cluster_rows: usize,
    pub cluster_cols: usize,
    pub embed_dim: usize,
    /// The learned vector, for value kinds that have one.
    pub embedding: Option<Vec<f32>>,
}

impl SeparatorSpec {
    pub fn square(value: Arc<dyn SeparatorValue>, cluster_side: usize, embed_dim: usize) -> Self {
        Self {
            value,
            cluster_rows: cluster_side,
            cluster_cols: cluster_side,
            embed_dim,
            embedding: None,
        }
    }

    pub fn with_embedding(mut self, embedding: Vec<f32>) -> Self {
        self.embedding = Some(embedding);
        self
    }

    pub fn tokens_per_cluster(&self) -> usize {
        self.cluster_rows * self.cluster_cols
    }
}

/// The separator's `cluster_rows * cluster_cols` embedding-space tokens.
pub fn make_separator(spec: &SeparatorSpec) -> Result<Vec<Vec<f32>>> {
    if spec.embed_dim == 0 {
        return Err(crate::error::StarError::InvalidArgument(
            "separator embedding width must be positive".into(),
        ));
    }
    spec.value.tokens(
        spec.cluster_rows,
        spec.cluster_cols,
        spec.embed_dim,
        spec.embedding.as_deref(),
    )
}

#[cfg(test)]
mod tests {
    use super::value::*;
    use super::*;
    use crate::error::StarError;

    #[test]
    fn identity_side_four_has_diagonal_ones() {
        let toks = make_separator(&SeparatorSpec::square(Arc::new(Identity), 4, 8)).unwrap();
        assert_eq!(toks.len(), 16);
        for (k, t) in toks.iter().enumerate() {
            let expect = if [0, 5, 10, 15].contains(&k) {
                1.0
            } else {
                0.0
            };
            assert!(t.iter().all(|&v| v == expect), "token {k}");
        }
    }

    #[test]
    fn zeros_degenerate_cluster() {
        let toks = make_separator(&SeparatorSpec::square(Arc::new(Zeros), 1, 4)).unwrap();
        assert_eq!(toks, vec![vec![0.0; 4]]);
    }

    #[test]
    fn ones_sum() {
        let toks = make_separator(&SeparatorSpec::square(Arc::new(Ones), 2, 3)).unwrap();
        assert_eq!(toks.len(), 4);
        assert_eq!(toks.iter().flatten().sum::<f32>(), 12.0);
    }

    #[test]
    fn embeddings_repeat_the_learned_vector() {
        let spec =
            SeparatorSpec::square(Arc::new(Embeddings), 2, 3).with_embedding(vec![0.1, -0.2, 0.3]);
        let toks = make_separator(&spec).unwrap();
        assert!(toks.iter().all(|t| t == &vec![0.1, -0.2, 0.3]));
        assert!(make_separator(&SeparatorSpec::square(Arc::new(Embeddings), 2, 3)).is_err());
    }

    #[test]
    fn identity_rejects_rectangles() {
        let mut spec = SeparatorSpec::square(Arc::new(Identity), 2, 3);
        spec.cluster_cols = 3;
        assert!(matches!(
            make_separator(&spec),
            Err(StarError::NonSquareCluster { rows: 2, cols: 3 })
        ));
        spec.value = Arc::new(Zeros);
        assert_eq!(make_separator(&spec).unwrap().len(), 6);
    }

    #[test]
    fn constant_kinds_only_emit_zero_or_one() {
        for v in [
            Arc::new(Zeros) as Arc<dyn SeparatorValue>,
            Arc::new(Ones),
            Arc::new(Identity),
        ] {
            for side in 1..5 {
                let a = make_separator(&SeparatorSpec::square(v.clone(), side, 5)).unwrap();
                let b = make_separator(&SeparatorSpec::square(v.clone(), side, 5)).unwrap();
                assert_eq!(a, b);
                assert!(a.iter().flatten().all(|&x| x == 0.0 || x == 1.0));
            }
        }
    }
}
