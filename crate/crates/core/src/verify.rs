//! Named self-checks run by `star verify`.
//!
//! Each check implements [`Check`] and is registered under its name; the
//! mask rule is injectable so a corrupted rule can serve as a negative
//! control.

use std::sync::Arc;

use rand::{Rng as _, SeedableRng};

use crate::decoder::{build_mask, MaskBuilder};
use crate::error::Result;
use crate::image::Image;
use crate::model::StarModel;
use crate::objective::{normalize_target, normalize_target_with, NORM_EPS};
use crate::params::{ParamStore, Rng};
use crate::patching::image_to_clusters;
use crate::registry::{self, Named};
use crate::separator::{make_separator, pack, PackOptions, SeparatorSpec};
use crate::ssm::{kernel_conv, scan_recurrent, ScanParams, SsmParams};
use crate::training::gradcheck::{micro_config, pretraining_grad_check};

/// Central-difference step. Truncation error grows as the step squared and
/// already reaches 1e-4 relative at a step of 1e-4.
pub const GRADCHECK_STEP: f64 = 1e-5;

pub struct VerifyContext {
    pub seed: u64,
    pub mask_builder: MaskBuilder,
}

impl VerifyContext {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            mask_builder: build_mask,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub trait Check: Named + Send + Sync {
    fn run(&self, ctx: &VerifyContext) -> Result<String>;
}

fn fail(msg: String) -> Result<String> {
    Err(crate::error::StarError::CheckFailed(msg))
}

pub struct ScanKernelEquivalence;
pub struct Causality;
pub struct MaskOracle;
pub struct PackingArithmetic;
pub struct GradientCheck;
pub struct Normalization;
pub struct SeparatorStructure;

impl Named for ScanKernelEquivalence {
    fn name(&self) -> &'static str {
        "scan-kernel-equivalence"
    }
}
impl Named for Causality {
    fn name(&self) -> &'static str {
        "causality"
    }
}
impl Named for MaskOracle {
    fn name(&self) -> &'static str {
        "mask-oracle"
    }
}
impl Named for PackingArithmetic {
    fn name(&self) -> &'static str {
        "packing-arithmetic"
    }
}
impl Named for GradientCheck {
    fn name(&self) -> &'static str {
        "gradient-check"
    }
}
impl Named for Normalization {
    fn name(&self) -> &'static str {
        "normalization"
    }
}
impl Named for SeparatorStructure {
    fn name(&self) -> &'static str {
        "separator-structure"
    }
}

/// Elementwise `|a - b| / max(|a|, |b|, 1e-8)`, maximized.
pub fn max_relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// A random stable LTI system with `d <= 8` and input of length `<= 64`.
pub fn random_lti(rng: &mut Rng) -> (ScanParams<f64>, Vec<f64>) {
    let d = rng.random_range(1..=8);
    let len = rng.random_range(1..=64);
    let p = SsmParams {
        a: (0..d).map(|_| -rng.random_range(0.05..4.0)).collect(),
        b: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        c: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        delta: rng.random_range(1e-3..1.0),
    };
    let x = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    (
        ScanParams::Invariant(p.discretize().expect("stable parameters")),
        x,
    )
}

impl Check for ScanKernelEquivalence {
    fn run(&self, ctx: &VerifyContext) -> Result<String> {
        let mut rng = Rng::seed_from_u64(ctx.seed);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let (p, x) = random_lti(&mut rng);
            worst = worst.max(max_relative_deviation(
                &scan_recurrent(&p, &x)?,
                &kernel_conv(&p, &x)?,
            ));
        }
        if worst < 1e-5 {
            Ok(format!("100 instances, max relative deviation {worst:.2e}"))
        } else {
            fail(format!(
                "max relative deviation {worst:.2e} (seed {})",
                ctx.seed
            ))
        }
    }
}

fn random_image(rng: &mut Rng, size: usize, channels: usize) -> Image {
    let px = (0..size * size * channels)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    Image::new(size, size, channels, px).expect("values in range")
}

impl Check for Causality {
    fn run(&self, ctx: &VerifyContext) -> Result<String> {
        let cfg = micro_config();
        let mut rng = Rng::seed_from_u64(ctx.seed);
        let mut store = ParamStore::<f64>::new();
        let model = StarModel::build(&cfg, &mut store, &mut rng)?;
        let a = random_image(&mut rng, cfg.image_size, cfg.channels);
        let b = random_image(&mut rng, cfg.image_size, cfg.channels);
        let c = random_image(&mut rng, cfg.image_size, cfg.channels);
        let feats = |imgs: &[Image]| -> Result<crate::tensor::Matrix<f64>> {
            let packed = model.pack(imgs)?;
            let mut tape = crate::autograd::Tape::new();
            let vars = store.bind(&mut tape);
            let f = model.encode_graph(&mut tape, &vars, &packed, None)?;
            Ok(tape.value(f).clone())
        };
        let base = feats(&[a.clone(), b])?;
        let other = feats(&[a, c])?;
        let first = base.rows() / 2;
        if (0..first).any(|r| base.row(r) != other.row(r)) {
            return fail("image-1 features changed when image 2 changed".into());
        }
        Ok(format!(
            "{first} image-1 tokens bit-identical under image-2 perturbation"
        ))
    }
}

/// Brute-force permission rule.
pub fn oracle_allows(ids: &[usize], q: usize, k: usize) -> bool {
    ids[k] <= ids[q]
}

impl Check for MaskOracle {
    fn run(&self, ctx: &VerifyContext) -> Result<String> {
        let mut cases = 0;
        for n in [1, 2] {
            for l in [1usize, 9] {
                for side in [1, 4] {
                    for layout in ["sc", "cs", "scs", "csc"] {
                        let per_row = (l as f64).sqrt() as usize;
                        let grid = per_row * side;
                        let seqs = (0..n)
                            .map(|_| {
                                let img = Image::new(grid, grid, 1, vec![0.5; grid * grid])?;
                                image_to_clusters(&img, 1, side)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let spec =
                            SeparatorSpec::square(registry::separator_value("identity")?, side, 4);
                        let Ok(packed) = pack(
                            &seqs,
                            &spec,
                            registry::layout(layout)?,
                            PackOptions::default(),
                        ) else {
                            continue;
                        };
                        let ids = packed.cluster_ids();
                        let mask = (ctx.mask_builder)(&ids)?;
                        for q in 0..ids.len() {
                            for k in 0..ids.len() {
                                if mask.allowed(q, k) != oracle_allows(&ids, q, k) {
                                    return fail(format!(
                                        "N={n} L={l} side={side} {layout}: entry ({q},{k}) disagrees with the oracle"
                                    ));
                                }
                            }
                        }
                        cases += 1;
                    }
                }
            }
        }
        Ok(format!("{cases} layouts match the brute-force rule"))
    }
}

impl Check for PackingArithmetic {
    fn run(&self, _: &VerifyContext) -> Result<String> {
        let img = Image::new(192, 192, 3, vec![0.0; 192 * 192 * 3])?;
        let seq = image_to_clusters(&img, 16, 4)?;
        let spec = SeparatorSpec::square(registry::separator_value("identity")?, 4, 8);
        let mut totals = Vec::new();
        for n in [1usize, 2, 4, 8, 16] {
            let packed = pack(
                &vec![seq.clone(); n],
                &spec,
                registry::layout("sc")?,
                PackOptions::default(),
            )?;
            if packed.len() != 160 * n {
                return fail(format!(
                    "N={n}: {} tokens, expected {}",
                    packed.len(),
                    160 * n
                ));
            }
            totals.push(packed.len().to_string());
        }
        Ok(format!("totals {}", totals.join(", ")))
    }
}

impl Check for GradientCheck {
    fn run(&self, ctx: &VerifyContext) -> Result<String> {
        let report = pretraining_grad_check(&micro_config(), ctx.seed, GRADCHECK_STEP)?;
        if report.passes(1e-4) {
            Ok(format!(
                "max relative error {:.2e} over {} tensors",
                report.max_rel,
                report.entries.len()
            ))
        } else {
            let worst = report.worst().map(|w| w.name.clone()).unwrap_or_default();
            fail(format!(
                "max relative error {:.2e} at {worst} (seed {})",
                report.max_rel, ctx.seed
            ))
        }
    }
}

impl Check for Normalization {
    fn run(&self, ctx: &VerifyContext) -> Result<String> {
        let mut rng = Rng::seed_from_u64(ctx.seed);
        let mut worst = 0.0f32;
        for _ in 0..50 {
            let patch: Vec<f32> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = rng.random_range(0.5f32..2.0);
            let b = rng.random_range(-1.0f32..1.0);
            let moved: Vec<f32> = patch.iter().map(|&v| a * v + b).collect();
            // eps carries the units of a variance, so it scales with a²
            let base = normalize_target(&patch);
            let (scaled, _) = normalize_target_with(&moved, NORM_EPS * (a as f64).powi(2));
            for (x, y) in base.iter().zip(scaled) {
                worst = worst.max((x - y).abs());
            }
        }
        let flat = normalize_target(&[0.7; 48])
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()));
        if worst < 1e-5 && flat < 1e-2 {
            Ok(format!(
                "invariance error {worst:.1e}, constant patch {flat:.1e}"
            ))
        } else {
            fail(format!(
                "invariance error {worst:.1e}, constant patch {flat:.1e}"
            ))
        }
    }
}

impl Check for SeparatorStructure {
    fn run(&self, _: &VerifyContext) -> Result<String> {
        let ident = make_separator(&SeparatorSpec::square(
            registry::separator_value("identity")?,
            4,
            8,
        ))?;
        let ones: Vec<usize> = ident
            .iter()
            .enumerate()
            .filter(|(_, t)| t.iter().all(|&v| v == 1.0))
            .map(|(i, _)| i)
            .collect();
        let rest_zero = ident
            .iter()
            .enumerate()
            .all(|(i, t)| ones.contains(&i) || t.iter().all(|&v| v == 0.0));
        if ones != [0, 5, 10, 15] || !rest_zero {
            return fail(format!("identity ones-tokens at {ones:?}"));
        }
        for (name, v) in [("zeros", 0.0), ("ones", 1.0)] {
            let t = make_separator(&SeparatorSpec::square(
                registry::separator_value(name)?,
                4,
                8,
            ))?;
            if !t.iter().flatten().all(|&x| x == v) {
                return fail(format!("{name} separator is not constant {v}"));
            }
        }
        Ok("identity diagonal 0,5,10,15; zeros and ones constant".into())
    }
}

/// Every registered check, in report order.
pub fn checks() -> Vec<Arc<dyn Check>> {
    vec![
        Arc::new(ScanKernelEquivalence),
        Arc::new(Causality),
        Arc::new(MaskOracle),
        Arc::new(PackingArithmetic),
        Arc::new(GradientCheck),
        Arc::new(Normalization),
        Arc::new(SeparatorStructure),
    ]
}

pub fn run_checks(ctx: &VerifyContext, only: Option<&[String]>) -> Vec<CheckOutcome> {
    checks()
        .into_iter()
        .filter(|c| only.is_none_or(|o| o.iter().any(|n| n == c.name())))
        .map(|c| match c.run(ctx) {
            Ok(detail) => CheckOutcome {
                name: c.name(),
                passed: true,
                detail,
            },
            Err(e) => CheckOutcome {
                name: c.name(),
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

/// Mask rule that forgets the within-cluster block; used as a negative
/// control.
pub fn corrupted_mask(ids: &[usize]) -> Result<crate::decoder::BlockCausalMask> {
    let n = ids.len();
    let allow = (0..n * n)
        .map(|i| ids[i % n] < ids[i / n] || i % n == i / n)
        .collect();
    crate::decoder::BlockCausalMask::from_allow(n, n, allow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_rule_fails_the_mask_check() {
        let mut ctx = VerifyContext::new(0);
        ctx.mask_builder = corrupted_mask;
        assert!(MaskOracle.run(&ctx).is_err());
        assert!(MaskOracle.run(&VerifyContext::new(0)).is_ok());
    }

    #[test]
    fn cheap_checks_pass() {
        let ctx = VerifyContext::new(3);
        for c in [
            &ScanKernelEquivalence as &dyn Check,
            &PackingArithmetic,
            &Normalization,
            &SeparatorStructure,
            &Causality,
        ] {
            c.run(&ctx).unwrap();
        }
    }

    #[test]
    fn at_least_five_checks() {
        assert!(checks().len() >= 5);
    }
}
