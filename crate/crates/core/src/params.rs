//! Named parameter storage shared by the encoder, decoder and heads.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Result, StarError};
use crate::tensor::{Matrix, Real};

pub type Rng = rand_chacha::ChaCha8Rng;

/// Depth bucket used by layer-wise learning-rate decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerGroup {
    /// Patch / positional / separator embeddings and the class token.
    Embedding,
    /// Encoder block, 1-based.
    Block(usize),
    /// Everything after the last encoder block.
    Head,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
    /// Receives weight decay.
    pub decay: bool,
    pub group: LayerGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Matrix<T>,
        decay: bool,
        group: LayerGroup,
    ) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            decay,
            group,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn value(&self, i: usize) -> &Matrix<T> {
        &self.params[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Matrix<T> {
        &mut self.params[i].value
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on the tape; the returned vars are indexed like
    /// the store.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.value.clone()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                    group: p.group,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every same-named, same-shaped parameter from `other`.
    /// Returns the names that were copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Vec<String> {
        let mut copied = Vec::new();
        for p in &mut self.params {
            if let Some(&j) = other.index.get(&p.name) {
                let src = &other.params[j].value;
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied.push(p.name.clone());
                }
            }
        }
        copied
    }

    /// Replaces values from `(name, matrix)` pairs; every name must exist
    /// with a matching shape.
    pub fn assign(&mut self, values: Vec<(String, Matrix<T>)>) -> Result<()> {
        for (name, m) in values {
            let i = self
                .find(&name)
                .ok_or_else(|| StarError::Checkpoint(format!("unknown parameter {name}")))?;
            if self.params[i].value.shape() != m.shape() {
                return Err(StarError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, stored {:?}",
                    self.params[i].value.shape(),
                    m.shape()
                )));
            }
            self.params[i].value = m;
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

pub fn xavier<T: Real>(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..bound)))
}

pub fn normal<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| T::lit(dist.sample(rng)))
}

pub fn ones<T: Real>(cols: usize) -> Matrix<T> {
    Matrix::filled(1, cols, T::one())
}

pub fn zeros<T: Real>(cols: usize) -> Matrix<T> {
    Matrix::zeros(1, cols)
}
