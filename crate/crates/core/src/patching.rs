//! Patch extraction and cluster-priority ordering.

use crate::error::{Result, StarError};
use crate::image::Image;
use crate::tensor::Matrix;

/// Non-overlapping patches in row-major order. Each patch vector is the
/// pixel block flattened as (row, col, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Matrix<f32>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }
}

/// One image as `L` clusters of `cluster_side²` tokens in cluster-priority
/// order. `order[k]` is the row-major patch index of sequence token `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSequence {
    pub tokens: Matrix<f32>,
    pub cluster_side: usize,
    pub order: Vec<usize>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl ClusterSequence {
    pub fn cluster_count(&self) -> usize {
        self.order.len() / self.tokens_per_cluster()
    }

    pub fn tokens_per_cluster(&self) -> usize {
        self.cluster_side * self.cluster_side
    }

    pub fn patch_dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Token `within` of cluster `cluster`.
    pub fn token(&self, cluster: usize, within: usize) -> &[f32] {
        self.tokens
            .row(cluster * self.tokens_per_cluster() + within)
    }

    /// Grid coordinates `(row, col)` of sequence token `k`.
    pub fn grid_position(&self, k: usize) -> (usize, usize) {
        let p = self.order[k];
        (p / self.grid_w, p % self.grid_w)
    }

    /// Same geometry (grid, cluster side, patch size and channels).
    pub fn same_geometry(&self, other: &Self) -> bool {
        self.grid_h == other.grid_h
            && self.grid_w == other.grid_w
            && self.cluster_side == other.cluster_side
            && self.patch_size == other.patch_size
            && self.channels == other.channels
    }

    /// Undoes the cluster-priority permutation.
    pub fn to_grid(&self) -> PatchGrid {
        let mut patches = Matrix::zeros(self.tokens.rows(), self.tokens.cols());
        for (k, &p) in self.order.iter().enumerate() {
            patches.row_mut(p).copy_from_slice(self.tokens.row(k));
        }
        PatchGrid {
            patches,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            patch_size: self.patch_size,
            channels: self.channels,
        }
    }
}

fn check_divisible(axis: &'static str, size: usize, divisor: usize) -> Result<()> {
    if divisor == 0 {
        return Err(StarError::InvalidArgument(format!(
            "{axis}: divisor must be positive"
        )));
    }
    if size == 0 || !size.is_multiple_of(divisor) {
        return Err(StarError::NotDivisible {
            axis,
            size,
            divisor,
        });
    }
    Ok(())
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    check_divisible("image height", image.height(), patch_size)?;
    check_divisible("image width", image.width(), patch_size)?;
    let grid_h = image.height() / patch_size;
    let grid_w = image.width() / patch_size;
    let ch = image.channels();
    let s = patch_size * patch_size * ch;
    let mut patches = Matrix::zeros(grid_h * grid_w, s);
    for gr in 0..grid_h {
        for gc in 0..grid_w {
            let out = patches.row_mut(gr * grid_w + gc);
            let mut i = 0;
            for r in 0..patch_size {
                let row = gr * patch_size + r;
                let start = (row * image.width() + gc * patch_size) * ch;
                let span = &image.pixels()[start..start + patch_size * ch];
                out[i..i + span.len()].copy_from_slice(span);
                i += span.len();
            }
        }
    }
    Ok(PatchGrid {
        patches,
        grid_h,
        grid_w,
        patch_size,
        channels: ch,
    })
}

/// Row-major patch indices visited cluster by cluster (clusters row-major
/// over the cluster grid, patches row-major inside each cluster).
pub fn cluster_priority_order(
    grid_h: usize,
    grid_w: usize,
    cluster_side: usize,
) -> Result<Vec<usize>> {
    check_divisible("patch grid height", grid_h, cluster_side)?;
    check_divisible("patch grid width", grid_w, cluster_side)?;
    let mut order = Vec::with_capacity(grid_h * grid_w);
    for cr in 0..grid_h / cluster_side {
        for cc in 0..grid_w / cluster_side {
            for ir in 0..cluster_side {
                let row = cr * cluster_side + ir;
                let first = row * grid_w + cc * cluster_side;
                order.extend(first..first + cluster_side);
            }
        }
    }
    Ok(order)
}

pub fn clusterize(grid: &PatchGrid, cluster_side: usize) -> Result<ClusterSequence> {
    let order = cluster_priority_order(grid.grid_h, grid.grid_w, cluster_side)?;
    let mut tokens = Matrix::zeros(order.len(), grid.patch_dim());
    for (k, &p) in order.iter().enumerate() {
        tokens.row_mut(k).copy_from_slice(grid.patches.row(p));
    }
    Ok(ClusterSequence {
        tokens,
        cluster_side,
        order,
        grid_h: grid.grid_h,
        grid_w: grid.grid_w,
        patch_size: grid.patch_size,
        channels: grid.channels,
    })
}

/// `patchify` followed by `clusterize`.
pub fn image_to_clusters(
    image: &Image,
    patch_size: usize,
    cluster_side: usize,
) -> Result<ClusterSequence> {
    clusterize(&patchify(image, patch_size)?, cluster_side)
}
