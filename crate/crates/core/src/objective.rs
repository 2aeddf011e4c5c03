//! Next-cluster targets and the pretraining loss.

use crate::autograd::{Tape, Var};
use crate::error::{Result, StarError};
use crate::separator::{PackedSequence, TokenPayload};
use crate::tensor::{Matrix, Real};

pub const NORM_EPS: f64 = 1e-6;

/// Per-patch standardization: `(p - mean) / sqrt(var + eps)`.
pub fn normalize_target(patch: &[f32]) -> Vec<f32> {
    normalize_target_with(patch, NORM_EPS).0
}

/// Normalized patch plus its `(mean, var)`. Statistics are accumulated in
/// `f64`.
pub fn normalize_target_with(patch: &[f32], eps: f64) -> (Vec<f32>, (f64, f64)) {
    if patch.is_empty() {
        return (Vec::new(), (0.0, 0.0));
    }
    let n = patch.len() as f64;
    let mean = patch.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = patch
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + eps).sqrt();
    (
        patch
            .iter()
            .map(|&v| ((v as f64 - mean) * inv) as f32)
            .collect(),
        (mean, var),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSource {
    /// Global cluster index of the successor.
    Cluster(usize),
    /// The trailing separator after the last cluster.
    VirtualSeparator,
}

#[derive(Clone, Debug)]
pub struct TargetPlan {
    /// One row per packed token.
    pub targets: Matrix<f32>,
    /// Whether each row's target is a separator token.
    pub separator_target: Vec<bool>,
    /// Successor of each predicting cluster.
    pub successors: Vec<TargetSource>,
    /// `(mean, var)` of each pixel target before normalization.
    pub stats: Vec<Option<(f64, f64)>>,
}

impl TargetPlan {
    pub fn len(&self) -> usize {
        self.separator_target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.separator_target.is_empty()
    }

    /// Rows entering the loss.
    pub fn include(&self, include_separators: bool) -> Vec<bool> {
        self.separator_target
            .iter()
            .map(|&s| include_separators || !s)
            .collect()
    }
}

/// Target of token `(cluster g, slot j)` is token `(g + 1, j)`; the final
/// cluster targets a virtual separator. Pixel targets are normalized when
/// `normalize` is set; separator targets are the raw 0/1 pattern repeated
/// over all `s` components.
pub fn build_targets(packed: &PackedSequence, normalize: bool) -> Result<TargetPlan> {
    let s = packed.patch_dim;
    let per = packed.tokens_per_cluster();
    let clusters = packed.cluster_count();
    if packed.len() != clusters * per {
        return Err(StarError::ShapeMismatch(format!(
            "{} tokens for {clusters} clusters of {per}",
            packed.len()
        )));
    }
    let pattern = packed
        .value
        .pattern(packed.cluster_side, packed.cluster_side)?;
    let mut targets = Matrix::zeros(packed.len(), s);
    let mut separator_target = Vec::with_capacity(packed.len());
    let mut stats = Vec::with_capacity(packed.len());
    let mut successors = Vec::with_capacity(clusters);
    for g in 0..clusters {
        let next = g + 1;
        successors.push(if next < clusters {
            TargetSource::Cluster(next)
        } else {
            TargetSource::VirtualSeparator
        });
        for j in 0..per {
            let row = targets.row_mut(g * per + j);
            let payload = (next < clusters).then(|| &packed.tokens[next * per + j].payload);
            match payload {
                Some(TokenPayload::Pixel(p)) => {
                    if normalize {
                        let (v, st) = normalize_target_with(p, NORM_EPS);
                        row.copy_from_slice(&v);
                        stats.push(Some(st));
                    } else {
                        row.copy_from_slice(p);
                        stats.push(None);
                    }
                    separator_target.push(false);
                }
                Some(TokenPayload::Separator(_)) | None => {
                    row.fill(pattern[j]);
                    stats.push(None);
                    separator_target.push(true);
                }
            }
        }
    }
    Ok(TargetPlan {
        targets,
        separator_target,
        successors,
        stats,
    })
}

/// Loss node on the tape: mean squared error over included rows and all
/// components.
pub fn star_loss_graph<T: Real>(
    tape: &mut Tape<T>,
    predictions: Var,
    plan: &TargetPlan,
    include_separators: bool,
) -> Result<Var> {
    let shape = tape.value(predictions).shape();
    if shape != plan.targets.shape() {
        return Err(StarError::ShapeMismatch(format!(
            "predictions {shape:?} vs targets {:?}",
            plan.targets.shape()
        )));
    }
    Ok(tape.mse(
        predictions,
        plan.targets.cast(),
        plan.include(include_separators),
    ))
}

pub fn star_loss<T: Real>(
    predictions: &Matrix<T>,
    plan: &TargetPlan,
    include_separators: bool,
) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.input(predictions.clone());
    let l = star_loss_graph(&mut tape, p, plan, include_separators)?;
    Ok(tape.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::image_to_clusters;
    use crate::registry;
    use crate::separator::{pack, PackOptions, SeparatorSpec};
    use crate::Image;
    use proptest::prelude::*;

    fn packed(n: usize, grid: usize, side: usize, layout: &str, value: &str) -> PackedSequence {
        let ps = 2;
        let size = grid * ps;
        let imgs: Vec<_> = (0..n)
            .map(|i| {
                let img = Image::from_fn(size, size, 1, |r, c, _| {
                    ((r * 7 + c * 3 + i * 5) % 11) as f32 / 10.0
                })
                .unwrap();
                image_to_clusters(&img, ps, side).unwrap()
            })
            .collect();
        let spec = SeparatorSpec::square(registry::separator_value(value).unwrap(), side, 8);
        pack(
            &imgs,
            &spec,
            registry::layout(layout).unwrap(),
            PackOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn two_values_patch() {
        let v = normalize_target(&[0.0, 1.0]);
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_patch_is_near_zero() {
        assert!(normalize_target(&[0.7; 16]).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn single_image_targets_run_to_virtual_separator() {
        let p = packed(1, 6, 2, "sc", "identity");
        let plan = build_targets(&p, true).unwrap();
        assert_eq!(plan.successors.len(), 10);
        assert_eq!(plan.successors[0], TargetSource::Cluster(1));
        assert_eq!(plan.successors[9], TargetSource::VirtualSeparator);
        assert!(plan.separator_target[36..].iter().all(|&s| s));
        assert!(plan.separator_target[..36].iter().all(|&s| !s));
    }

    #[test]
    fn two_images_single_cluster_sequence() {
        let p = packed(2, 1, 1, "sc", "ones");
        let plan = build_targets(&p, false).unwrap();
        assert_eq!(plan.separator_target, vec![false, true, false, true]);
        let pixel = |t: usize| match &p.tokens[t].payload {
            TokenPayload::Pixel(v) => v.clone(),
            TokenPayload::Separator(_) => panic!("token {t} is a separator"),
        };
        assert_eq!(plan.targets.row(0), pixel(1).as_slice());
        assert_eq!(plan.targets.row(1), &[1.0; 4]);
        assert_eq!(plan.targets.row(2), pixel(3).as_slice());
        assert_eq!(plan.targets.row(3), &[1.0; 4]);
        assert_eq!(
            plan.successors,
            vec![
                TargetSource::Cluster(1),
                TargetSource::Cluster(2),
                TargetSource::Cluster(3),
                TargetSource::VirtualSeparator
            ]
        );
    }

    #[test]
    fn identity_separator_target_broadcasts_pattern() {
        let p = packed(1, 2, 2, "cs", "identity");
        let plan = build_targets(&p, true).unwrap();
        // cluster 0 (pixels) targets the trailing separator
        assert_eq!(plan.targets.row(0), &[1.0; 4]);
        assert_eq!(plan.targets.row(1), &[0.0; 4]);
        assert_eq!(plan.targets.row(2), &[0.0; 4]);
        assert_eq!(plan.targets.row(3), &[1.0; 4]);
    }

    #[test]
    fn exact_predictions_give_zero_loss_and_offset_gives_one() {
        let p = packed(2, 2, 1, "sc", "identity");
        let plan = build_targets(&p, true).unwrap();
        assert_eq!(
            star_loss(&plan.targets.cast::<f64>(), &plan, true).unwrap(),
            0.0
        );
        let shifted = plan.targets.cast::<f64>().map(|v| v + 1.0);
        assert!((star_loss(&shifted, &plan, true).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn excluded_separators_drop_out_of_the_mean() {
        let p = packed(1, 2, 1, "sc", "ones");
        let plan = build_targets(&p, true).unwrap();
        let mut pred = plan.targets.cast::<f64>();
        let last = pred.rows() - 1;
        pred.row_mut(last).fill(5.0);
        assert_eq!(star_loss(&pred, &plan, false).unwrap(), 0.0);
        assert!(star_loss(&pred, &plan, true).unwrap() > 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = packed(1, 2, 1, "sc", "zeros");
        let plan = build_targets(&p, true).unwrap();
        assert!(star_loss(&Matrix::<f64>::zeros(1, 1), &plan, true).is_err());
    }

    #[test]
    fn brute_force_loss() {
        let p = packed(2, 1, 1, "sc", "identity");
        let plan = build_targets(&p, true).unwrap();
        let pred = Matrix::from_fn(plan.len(), 4, |r, c| ((r * 4 + c) as f64 * 0.9).sin());
        let mut total = 0.0;
        for r in 0..plan.len() {
            for c in 0..4 {
                total += (pred.get(r, c) - plan.targets.get(r, c) as f64).powi(2);
            }
        }
        let want = total / (plan.len() * 4) as f64;
        assert!((star_loss(&pred, &plan, true).unwrap() - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalization_is_shift_and_scale_invariant(
            patch in proptest::collection::vec(0.0f32..1.0, 4..32),
            a in 0.5f32..2.0,
            b in -1.0f32..1.0,
        ) {
            let spread = patch.iter().cloned().fold(f32::MIN, f32::max) - patch.iter().cloned().fold(f32::MAX, f32::min);
            prop_assume!(spread > 0.1);
            let base = normalize_target(&patch);
            let moved: Vec<f32> = patch.iter().map(|&v| a * v + b).collect();
            let (scaled, _) = normalize_target_with(&moved, NORM_EPS * (a as f64).powi(2));
            for (x, y) in base.iter().zip(scaled) {
                prop_assert!((x - y).abs() < 1e-5, "{} vs {}", x, y);
            }
        }

        #[test]
        fn successor_count_matches_slots(n in 1usize..4, layout in 0usize..4) {
            let name = ["sc", "cs", "scs", "csc"][layout];
            let p = packed(n, 4, 2, name, "identity");
            let plan = build_targets(&p, true).unwrap();
            prop_assert_eq!(plan.successors.len(), p.cluster_count());
            prop_assert_eq!(plan.len(), p.len());
        }
    }
}
