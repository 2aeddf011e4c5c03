//! MambaMLP encoder: patch embedding, positional table and a stack of
//! pre-norm residual blocks pairing a selective scan with an MLP.

use std::sync::Arc;

use rand::Rng as _;

use crate::autograd::{RowRef, Tape, Var};
use crate::error::{Result, StarError};
use crate::params::{normal, ones, xavier, zeros, LayerGroup, ParamStore, Rng};
use crate::patching::ClusterSequence;
use crate::separator::{PackedSequence, TokenPayload};
use crate::tensor::{Matrix, Real};
use crate::training::class_token::ClassTokenPolicy;

use super::paths::{invert, ScanMode};
use super::selective::SelectiveScanParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathReduce {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub state_dim: usize,
    pub mlp_ratio: usize,
    /// Length of a flattened patch vector.
    pub patch_dim: usize,
    /// Rows of the positional table.
    pub positions: usize,
    pub use_positional: bool,
    pub scan_mode: Arc<dyn ScanMode>,
    pub path_reduce: PathReduce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    /// Row of [`EncoderInput::patches`].
    Pixel(usize),
    /// Within-cluster index of a separator token.
    Separator(usize),
    ClassToken,
}

/// Everything the encoder needs about one sequence.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub patches: Matrix<f32>,
    /// Embedding-space separator tokens, one row per within-cluster index.
    pub separator_rows: Option<Matrix<f32>>,
    pub sources: Vec<TokenSource>,
    pub position_ids: Vec<Option<usize>>,
    pub grid: Vec<Option<(usize, usize)>>,
    pub grid_shape: (usize, usize),
    pub images: usize,
}

impl EncoderInput {
    pub fn from_packed(packed: &PackedSequence) -> Self {
        let mut patches = Vec::new();
        let mut sources = Vec::with_capacity(packed.len());
        let mut separator_rows: Vec<Vec<f32>> = Vec::new();
        let mut grid_shape = (0, 0);
        for t in &packed.tokens {
            match &t.payload {
                TokenPayload::Pixel(v) => {
                    sources.push(TokenSource::Pixel(patches.len()));
                    patches.push(v.clone());
                }
                TokenPayload::Separator(v) => {
                    let j = t.meta.within_cluster_index;
                    if separator_rows.len() <= j {
                        separator_rows.resize(j + 1, Vec::new());
                    }
                    if separator_rows[j].is_empty() {
                        separator_rows[j] = v.clone();
                    }
                    sources.push(TokenSource::Separator(j));
                }
            }
            if let Some((r, c)) = t.meta.grid {
                grid_shape = (grid_shape.0.max(r + 1), grid_shape.1.max(c + 1));
            }
        }
        let patches = if patches.is_empty() {
            Matrix::zeros(0, packed.patch_dim)
        } else {
            Matrix::from_rows(&patches).expect("uniform patch width")
        };
        Self {
            patches,
            separator_rows: (!separator_rows.is_empty())
                .then(|| Matrix::from_rows(&separator_rows).expect("uniform separator width")),
            sources,
            position_ids: packed
                .tokens
                .iter()
                .map(|t| Some(t.meta.position_id))
                .collect(),
            grid: packed.tokens.iter().map(|t| t.meta.grid).collect(),
            grid_shape,
            images: packed.images,
        }
    }

    /// One image without separators, optionally with a class token placed
    /// by `policy`. `pixel_positions` are the positional ids of the pixel
    /// tokens in cluster-priority order.
    pub fn single_image(
        image: &ClusterSequence,
        pixel_positions: &[usize],
        policy: Option<&dyn ClassTokenPolicy>,
    ) -> Self {
        let n = image.order.len();
        let mut sources: Vec<TokenSource> = (0..n).map(TokenSource::Pixel).collect();
        let mut position_ids: Vec<Option<usize>> =
            pixel_positions.iter().map(|&p| Some(p)).collect();
        let mut grid: Vec<Option<(usize, usize)>> =
            (0..n).map(|k| Some(image.grid_position(k))).collect();
        if let Some(policy) = policy {
            let at = policy.insert_index(n);
            sources.insert(at, TokenSource::ClassToken);
            position_ids.insert(at, None);
            grid.insert(at, None);
        }
        Self {
            patches: image.tokens.clone(),
            separator_rows: None,
            sources,
            position_ids,
            grid,
            grid_shape: (image.grid_h, image.grid_w),
            images: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn has_separators(&self) -> bool {
        self.sources
            .iter()
            .any(|s| matches!(s, TokenSource::Separator(_)))
    }

    pub fn class_token_index(&self) -> Option<usize> {
        self.sources
            .iter()
            .position(|s| *s == TokenSource::ClassToken)
    }
}

/// Graph-level overrides for tokens that come from trained parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExtraTokens {
    /// `1 x D` learned separator vector.
    pub separator: Option<Var>,
    /// `1 x D` class token.
    pub class_token: Option<Var>,
}

/// Stochastic depth: each residual branch is dropped with a per-block rate
/// rising linearly to `rate` at the last block.
pub struct DropPath<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

#[derive(Clone, Debug)]
struct BlockParams {
    norm1_g: usize,
    norm1_b: usize,
    mixer: SelectiveScanParams,
    w_out: usize,
    norm2_g: usize,
    norm2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    patch_w: usize,
    patch_b: usize,
    pos: Option<usize>,
    blocks: Vec<BlockParams>,
    norm_g: usize,
    norm_b: usize,
}

impl Encoder {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        config: EncoderConfig,
        rng: &mut Rng,
    ) -> Self {
        let d = config.width;
        let hidden = d * config.mlp_ratio;
        let patch_w = store.add(
            "encoder.patch_embed.w",
            xavier(config.patch_dim, d, rng),
            true,
            LayerGroup::Embedding,
        );
        let patch_b = store.add(
            "encoder.patch_embed.b",
            zeros(d),
            false,
            LayerGroup::Embedding,
        );
        let pos = config.use_positional.then(|| {
            store.add(
                "encoder.pos_embed",
                normal(config.positions, d, 0.02, rng),
                false,
                LayerGroup::Embedding,
            )
        });
        let blocks = (0..config.depth)
            .map(|i| {
                let g = LayerGroup::Block(i + 1);
                let p = format!("encoder.blocks.{i}");
                BlockParams {
                    norm1_g: store.add(format!("{p}.norm1.g"), ones(d), false, g),
                    norm1_b: store.add(format!("{p}.norm1.b"), zeros(d), false, g),
                    mixer: SelectiveScanParams::register(
                        store,
                        &format!("{p}.mixer"),
                        d,
                        config.state_dim,
                        g,
                        rng,
                    ),
                    w_out: store.add(format!("{p}.mixer.w_out"), xavier(d, d, rng), true, g),
                    norm2_g: store.add(format!("{p}.norm2.g"), ones(d), false, g),
                    norm2_b: store.add(format!("{p}.norm2.b"), zeros(d), false, g),
                    fc1_w: store.add(format!("{p}.mlp.fc1.w"), xavier(d, hidden, rng), true, g),
                    fc1_b: store.add(format!("{p}.mlp.fc1.b"), zeros(hidden), false, g),
                    fc2_w: store.add(format!("{p}.mlp.fc2.w"), xavier(hidden, d, rng), true, g),
                    fc2_b: store.add(format!("{p}.mlp.fc2.b"), zeros(d), false, g),
                }
            })
            .collect();
        let norm_g = store.add("encoder.norm.g", ones(d), false, LayerGroup::Head);
        let norm_b = store.add("encoder.norm.b", zeros(d), false, LayerGroup::Head);
        Self {
            config,
            patch_w,
            patch_b,
            pos,
            blocks,
            norm_g,
            norm_b,
        }
    }

    /// Embedded tokens plus positional encodings, before any block.
    pub fn embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        input: &EncoderInput,
        extra: ExtraTokens,
    ) -> Result<Var> {
        let d = self.config.width;
        if input.patches.cols() != self.config.patch_dim {
            return Err(StarError::ShapeMismatch(format!(
                "patch vectors have {} entries, encoder expects {}",
                input.patches.cols(),
                self.config.patch_dim
            )));
        }
        let zero = tape.input(Matrix::zeros(1, d));
        let mut sources = vec![zero];
        let pix = if input.patches.rows() > 0 {
            let p = tape.input(input.patches.cast());
            let e = tape.linear(p, vars[self.patch_w], Some(vars[self.patch_b]));
            sources.push(e);
            Some(sources.len() - 1)
        } else {
            None
        };
        let sep_learned = extra.separator.map(|v| {
            sources.push(v);
            sources.len() - 1
        });
        let sep_const = match (&input.separator_rows, sep_learned) {
            (Some(rows), None) => {
                if rows.cols() != d {
                    return Err(StarError::ShapeMismatch(format!(
                        "separator tokens have width {}, encoder width is {d}",
                        rows.cols()
                    )));
                }
                sources.push(tape.input(rows.cast()));
                Some(sources.len() - 1)
            }
            _ => None,
        };
        let cls = extra.class_token.map(|v| {
            sources.push(v);
            sources.len() - 1
        });
        let mut map: Vec<RowRef> = Vec::with_capacity(input.len());
        for src in &input.sources {
            map.push(match *src {
                TokenSource::Pixel(r) => Some((pix.expect("pixel rows"), r)),
                TokenSource::Separator(j) => match (sep_learned, sep_const) {
                    (Some(s), _) => Some((s, 0)),
                    (None, Some(s)) => Some((s, j)),
                    (None, None) => {
                        return Err(StarError::InvalidArgument(
                            "separator token without a value".into(),
                        ))
                    }
                },
                TokenSource::ClassToken => Some((
                    cls.ok_or_else(|| {
                        StarError::InvalidArgument("class token slot without a class token".into())
                    })?,
                    0,
                )),
            });
        }
        let mut x = tape.rows(&sources, map);
        if let Some(pos) = self.pos {
            let table = self.config.positions;
            let mut pmap = Vec::with_capacity(input.len());
            for id in &input.position_ids {
                pmap.push(match *id {
                    Some(i) if i < table => Some((1, i)),
                    Some(i) => {
                        return Err(StarError::ShapeMismatch(format!(
                            "position id {i} outside a table of {table}"
                        )))
                    }
                    None => None,
                });
            }
            let p = tape.rows(&[zero, vars[pos]], pmap);
            x = tape.add(x, p);
        }
        Ok(x)
    }

    /// One MambaMLP block over `x`, mixing along each of `paths`.
    pub fn block<T: Real>(
        &self,
        index: usize,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        paths: &[Vec<usize>],
        drop: Option<&mut DropPath<'_>>,
    ) -> Var {
        let b = &self.blocks[index];
        let n = tape.layer_norm(x, vars[b.norm1_g], vars[b.norm1_b]);
        let mut mixed: Option<Var> = None;
        for path in paths {
            let identity = path.iter().enumerate().all(|(i, &p)| i == p);
            let y = if identity {
                b.mixer.graph(tape, vars, n)
            } else {
                let np = tape.gather(n, path);
                let y = b.mixer.graph(tape, vars, np);
                tape.gather(y, &invert(path))
            };
            mixed = Some(match mixed {
                Some(acc) => tape.add(acc, y),
                None => y,
            });
        }
        let mut mixed = mixed.expect("at least one scan path");
        if self.config.path_reduce == PathReduce::Mean && paths.len() > 1 {
            mixed = tape.scale(mixed, T::one() / T::from_usize(paths.len()).unwrap());
        }
        let mut branch = tape.matmul(mixed, vars[b.w_out]);

        let (keep1, keep2) = match drop {
            Some(dp) => {
                let rate = if self.config.depth > 1 {
                    dp.rate * index as f64 / (self.config.depth - 1) as f64
                } else {
                    dp.rate
                };
                let mut keep = || {
                    if rate <= 0.0 || dp.rng.random::<f64>() >= rate {
                        T::lit(1.0 / (1.0 - rate))
                    } else {
                        T::zero()
                    }
                };
                (keep(), keep())
            }
            None => (T::one(), T::one()),
        };
        if keep1 != T::one() {
            branch = tape.scale(branch, keep1);
        }
        let x = tape.add(x, branch);

        let n2 = tape.layer_norm(x, vars[b.norm2_g], vars[b.norm2_b]);
        let h = tape.linear(n2, vars[b.fc1_w], Some(vars[b.fc1_b]));
        let h = tape.gelu(h);
        let mut m = tape.linear(h, vars[b.fc2_w], Some(vars[b.fc2_b]));
        if keep2 != T::one() {
            m = tape.scale(m, keep2);
        }
        tape.add(x, m)
    }

    /// Full encoder on the tape; returns `(tokens x D)` features after the
    /// final norm.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        input: &EncoderInput,
        extra: ExtraTokens,
        mut drop: Option<DropPath<'_>>,
    ) -> Result<Var> {
        let paths = self.config.scan_mode.paths(input)?;
        let mut x = self.embed(tape, vars, input, extra)?;
        for i in 0..self.config.depth {
            x = self.block(i, tape, vars, x, &paths, drop.as_mut());
        }
        Ok(tape.layer_norm(x, vars[self.norm_g], vars[self.norm_b]))
    }

    /// Runs only the embedding (no blocks, no final norm).
    pub fn embedded<T: Real>(
        &self,
        store: &ParamStore<T>,
        input: &EncoderInput,
    ) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x = self.embed(&mut tape, &vars, input, ExtraTokens::default())?;
        Ok(tape.value(x).clone())
    }
}

/// Forward-only MambaMLP block `index` applied to `tokens`.
pub fn mamba_mlp_block<T: Real>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    index: usize,
    tokens: &Matrix<T>,
    paths: &[Vec<usize>],
) -> Matrix<T> {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let x = tape.input(tokens.clone());
    let y = encoder.block(index, &mut tape, &vars, x, paths, None);
    tape.value(y).clone()
}

/// Encodes a packed sequence. Separator tokens use the vectors stored in
/// the pack.
pub fn encode<T: Real>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    packed: &PackedSequence,
) -> Result<Matrix<T>> {
    encode_input(
        encoder,
        store,
        &EncoderInput::from_packed(packed),
        ExtraTokensValue::default(),
    )
}

/// Values (not graph vars) for parameter-backed tokens.
#[derive(Clone, Debug, Default)]
pub struct ExtraTokensValue<T> {
    pub class_token: Option<Matrix<T>>,
}

pub fn encode_input<T: Real>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    input: &EncoderInput,
    extra: ExtraTokensValue<T>,
) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let class_token = extra.class_token.map(|m| tape.input(m));
    let y = encoder.forward(
        &mut tape,
        &vars,
        input,
        ExtraTokens {
            separator: None,
            class_token,
        },
        None,
    )?;
    Ok(tape.value(y).clone())
}
