//! Packing several clustered images into one token stream.

use std::sync::Arc;

use crate::error::{Result, StarError};
use crate::patching::ClusterSequence;

use super::layout::{LayoutStrategy, Slot};
use super::value::SeparatorValue;
use super::{make_separator, SeparatorSpec};

#[derive(Clone, Debug, PartialEq)]
pub enum TokenPayload {
    /// Raw patch vector; goes through the patch embedding.
    Pixel(Vec<f32>),
    /// Embedding-space vector injected as-is.
    Separator(Vec<f32>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMeta {
    pub image_index: usize,
    /// Global cluster index; separators and pixel clusters count alike.
    pub cluster_index: usize,
    pub within_cluster_index: usize,
    pub is_separator: bool,
    pub position_id: usize,
    /// Patch-grid coordinates of pixel tokens.
    pub grid: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedToken {
    pub payload: TokenPayload,
    pub meta: TokenMeta,
}

#[derive(Clone, Copy, Debug)]
pub struct PackOptions {
    /// Positional ids restart at every image (otherwise they run on).
    pub restart_positions: bool,
    pub max_images: usize,
}

impl Default for PackOptions {
    fn default() -> Self {
        Self {
            restart_positions: true,
            max_images: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PackedSequence {
    pub tokens: Vec<PackedToken>,
    pub images: usize,
    pub clusters_per_image: usize,
    pub cluster_side: usize,
    pub embed_dim: usize,
    pub patch_dim: usize,
    pub layout: Arc<dyn LayoutStrategy>,
    pub value: Arc<dyn SeparatorValue>,
    pub restart_positions: bool,
    pub slots_per_image: usize,
    pub positions_per_image: usize,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens_per_cluster(&self) -> usize {
        self.cluster_side * self.cluster_side
    }

    pub fn cluster_count(&self) -> usize {
        self.images * self.slots_per_image
    }

    pub fn cluster_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.meta.cluster_index).collect()
    }

    pub fn within_ids(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .map(|t| t.meta.within_cluster_index)
            .collect()
    }

    /// Whether global cluster `g` is a separator.
    pub fn is_separator_cluster(&self, g: usize) -> bool {
        self.tokens[g * self.tokens_per_cluster()].meta.is_separator
    }

    /// Token counts per image.
    pub fn tokens_per_image(&self) -> Vec<usize> {
        let mut counts = vec![0; self.images];
        for t in &self.tokens {
            counts[t.meta.image_index] += 1;
        }
        counts
    }

    /// Number of distinct positional ids the sequence can reference.
    pub fn position_table_len(&self) -> usize {
        if self.restart_positions {
            self.positions_per_image
        } else {
            self.positions_per_image * self.images
        }
    }
}

pub fn pack(
    images: &[ClusterSequence],
    spec: &SeparatorSpec,
    layout: Arc<dyn LayoutStrategy>,
    opts: PackOptions,
) -> Result<PackedSequence> {
    let first = images
        .first()
        .ok_or_else(|| StarError::InvalidArgument("cannot pack zero images".into()))?;
    if images.len() > opts.max_images {
        return Err(StarError::InvalidArgument(format!(
            "{} images exceed the configured maximum of {}",
            images.len(),
            opts.max_images
        )));
    }
    if let Some((i, _)) = images
        .iter()
        .enumerate()
        .find(|(_, im)| !im.same_geometry(first))
    {
        return Err(StarError::HeterogeneousGeometry(format!(
            "image {i} differs from image 0"
        )));
    }
    let side = first.cluster_side;
    if spec.cluster_rows != side || spec.cluster_cols != side {
        return Err(StarError::ShapeMismatch(format!(
            "separator is {}x{} but clusters are {side}x{side}",
            spec.cluster_rows, spec.cluster_cols
        )));
    }
    let sep_tokens = make_separator(spec)?;
    let clusters = first.cluster_count();
    let group = first.grid_w / side;
    let plan = layout.plan(clusters, group)?;
    let per_cluster = side * side;
    let separators = plan.iter().filter(|s| **s == Slot::Separator).count();
    let positions_per_image = separators + clusters * per_cluster;

    let mut tokens = Vec::with_capacity(images.len() * plan.len() * per_cluster);
    let mut global_cluster = 0;
    for (image_index, image) in images.iter().enumerate() {
        let mut pos = if opts.restart_positions {
            0
        } else {
            image_index * positions_per_image
        };
        for slot in &plan {
            match *slot {
                Slot::Separator => {
                    for (j, v) in sep_tokens.iter().enumerate() {
                        tokens.push(PackedToken {
                            payload: TokenPayload::Separator(v.clone()),
                            meta: TokenMeta {
                                image_index,
                                cluster_index: global_cluster,
                                within_cluster_index: j,
                                is_separator: true,
                                position_id: pos,
                                grid: None,
                            },
                        });
                    }
                    pos += 1;
                }
                Slot::Pixel(c) => {
                    for j in 0..per_cluster {
                        let k = c * per_cluster + j;
                        tokens.push(PackedToken {
                            payload: TokenPayload::Pixel(image.tokens.row(k).to_vec()),
                            meta: TokenMeta {
                                image_index,
                                cluster_index: global_cluster,
                                within_cluster_index: j,
                                is_separator: false,
                                position_id: pos,
                                grid: Some(image.grid_position(k)),
                            },
                        });
                        pos += 1;
                    }
                }
            }
            global_cluster += 1;
        }
    }
    Ok(PackedSequence {
        tokens,
        images: images.len(),
        clusters_per_image: clusters,
        cluster_side: side,
        embed_dim: spec.embed_dim,
        patch_dim: first.patch_dim(),
        layout,
        value: spec.value.clone(),
        restart_positions: opts.restart_positions,
        slots_per_image: plan.len(),
        positions_per_image,
    })
}

pub fn position_ids(packed: &PackedSequence) -> Vec<usize> {
    packed.tokens.iter().map(|t| t.meta.position_id).collect()
}

/// Positional ids of an image's pixel tokens under `layout`, in
/// cluster-priority order. Used when an image is encoded on its own.
pub fn pixel_position_ids(
    layout: &dyn LayoutStrategy,
    image: &ClusterSequence,
) -> Result<Vec<usize>> {
    let per_cluster = image.tokens_per_cluster();
    let plan = layout.plan(image.cluster_count(), image.grid_w / image.cluster_side)?;
    let mut ids = Vec::with_capacity(image.order.len());
    let mut pos = 0;
    for slot in plan {
        match slot {
            Slot::Separator => pos += 1,
            Slot::Pixel(_) => {
                ids.extend(pos..pos + per_cluster);
                pos += per_cluster;
            }
        }
    }
    Ok(ids)
}
