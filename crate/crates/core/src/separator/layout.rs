//! Where separators go relative to an image's clusters.

use std::fmt::Debug;

use crate::error::{Result, StarError};
use crate::registry::Named;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Separator,
    /// Zero-based pixel cluster index within the image.
    Pixel(usize),
}

pub trait LayoutStrategy: Named + Debug + Send + Sync {
    fn code(&self) -> u8;

    /// Slot sequence for one image of `clusters` pixel clusters. `group` is
    /// the number of clusters per row of the cluster grid; dense layouts put
    /// one separator per group.
    fn plan(&self, clusters: usize, group: usize) -> Result<Vec<Slot>>;
}

/// Separator before the image.
#[derive(Debug, Clone, Copy)]
pub struct Sc;

/// Separator after the image.
#[derive(Debug, Clone, Copy)]
pub struct Cs;

/// A separator before every row of clusters.
#[derive(Debug, Clone, Copy)]
pub struct Scs;

/// A separator after every row of clusters.
#[derive(Debug, Clone, Copy)]
pub struct Csc;

impl Named for Sc {
    fn name(&self) -> &'static str {
        "sc"
    }
}

impl Named for Cs {
    fn name(&self) -> &'static str {
        "cs"
    }
}

impl Named for Scs {
    fn name(&self) -> &'static str {
        "scs"
    }
}

impl Named for Csc {
    fn name(&self) -> &'static str {
        "csc"
    }
}

fn pixels(clusters: usize) -> impl Iterator<Item = Slot> {
    (0..clusters).map(Slot::Pixel)
}

fn grouped(
    name: &'static str,
    clusters: usize,
    group: usize,
    sep_first: bool,
) -> Result<Vec<Slot>> {
    if group == 0 || !clusters.is_multiple_of(group) {
        return Err(StarError::LayoutGrouping {
            layout: name,
            clusters,
            group,
        });
    }
    let mut out = Vec::with_capacity(clusters + clusters / group);
    for start in (0..clusters).step_by(group) {
        if sep_first {
            out.push(Slot::Separator);
        }
        out.extend((start..start + group).map(Slot::Pixel));
        if !sep_first {
            out.push(Slot::Separator);
        }
    }
    Ok(out)
}

impl LayoutStrategy for Sc {
    fn code(&self) -> u8 {
        0
    }

    fn plan(&self, clusters: usize, _group: usize) -> Result<Vec<Slot>> {
        Ok(std::iter::once(Slot::Separator)
            .chain(pixels(clusters))
            .collect())
    }
}

impl LayoutStrategy for Cs {
    fn code(&self) -> u8 {
        1
    }

    fn plan(&self, clusters: usize, _group: usize) -> Result<Vec<Slot>> {
        Ok(pixels(clusters)
            .chain(std::iter::once(Slot::Separator))
            .collect())
    }
}

impl LayoutStrategy for Scs {
    fn code(&self) -> u8 {
        2
    }

    fn plan(&self, clusters: usize, group: usize) -> Result<Vec<Slot>> {
        grouped("scs", clusters, group, true)
    }
}

impl LayoutStrategy for Csc {
    fn code(&self) -> u8 {
        3
    }

    fn plan(&self, clusters: usize, group: usize) -> Result<Vec<Slot>> {
        grouped("csc", clusters, group, false)
    }
}
