//! State-space machinery: ZOH discretization, the reference recurrence and
//! its convolution-kernel form, the selective scan and the MambaMLP encoder.

pub mod encoder;
pub mod paths;
pub mod selective;

use crate::error::{Result, StarError};
use crate::tensor::Real;

pub use encoder::{encode, Encoder, EncoderConfig, EncoderInput, PathReduce, TokenSource};
pub use paths::ScanMode;
pub use selective::{selective_scan, SelectiveScanParams};

/// Below this `|ΔA|` the ZOH input factor is evaluated by its Taylor series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-4;

/// Continuous single-input single-output SSM with diagonal `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub delta: T,
}

/// Discretized parameters of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
}

/// Parameters driving a scan: fixed over time, or one set per step.
#[derive(Clone, Debug, PartialEq)]
pub enum ScanParams<T> {
    Invariant(DiscreteSsm<T>),
    Varying(Vec<DiscreteSsm<T>>),
}

/// `(e^z - 1) / z`, continuous at zero.
pub fn zoh_factor<T: Real>(z: T) -> T {
    if z.abs() < T::lit(ZOH_SERIES_THRESHOLD) {
        T::one() + z / T::lit(2.0) + z * z / T::lit(6.0)
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`zoh_factor`].
pub fn zoh_factor_grad<T: Real>(z: T) -> T {
    if z.abs() < T::lit(1e-2) {
        T::lit(0.5)
            + z / T::lit(3.0)
            + z * z / T::lit(8.0)
            + z * z * z / T::lit(30.0)
            + z * z * z * z / T::lit(144.0)
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Zero-order-hold discretization of diagonal `A`:
/// `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹ (exp(ΔA) − I) ΔB`.
pub fn discretize<T: Real>(a: &[T], b: &[T], delta: T) -> Result<(Vec<T>, Vec<T>)> {
    if a.len() != b.len() {
        return Err(StarError::ShapeMismatch(format!(
            "A has {} entries, B has {}",
            a.len(),
            b.len()
        )));
    }
    // Written so that NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(delta > T::zero()) {
        return Err(StarError::InvalidArgument(format!(
            "timescale must be positive, got {delta}"
        )));
    }
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (i, (&ai, &bi)) in a.iter().zip(b).enumerate() {
        let z = delta * ai;
        let ab = z.exp();
        let bb = zoh_factor(z) * delta * bi;
        if !ab.is_finite() || !bb.is_finite() {
            return Err(StarError::NonFiniteChannel { channel: i });
        }
        a_bar.push(ab);
        b_bar.push(bb);
    }
    Ok((a_bar, b_bar))
}

impl<T: Real> SsmParams<T> {
    pub fn discretize(&self) -> Result<DiscreteSsm<T>> {
        if self.c.len() != self.a.len() {
            return Err(StarError::ShapeMismatch(format!(
                "C has {} entries, A has {}",
                self.c.len(),
                self.a.len()
            )));
        }
        let (a_bar, b_bar) = discretize(&self.a, &self.b, self.delta)?;
        Ok(DiscreteSsm {
            a_bar,
            b_bar,
            c: self.c.clone(),
        })
    }
}

fn check_finite<T: Real>(y: &[T]) -> Result<()> {
    match y.iter().position(|v| !v.is_finite()) {
        Some(t) => Err(StarError::NonFinite {
            step: t as u64,
            what: "scan output".into(),
        }),
        None => Ok(()),
    }
}

/// Left-to-right recurrence `h_t = Ā h_{t−1} + B̄ x_t`, `y_t = C h_t`, `h_0 = 0`.
pub fn scan_recurrent<T: Real>(params: &ScanParams<T>, x: &[T]) -> Result<Vec<T>> {
    let step_params = |t: usize| -> &DiscreteSsm<T> {
        match params {
            ScanParams::Invariant(p) => p,
            ScanParams::Varying(ps) => &ps[t],
        }
    };
    if let ScanParams::Varying(ps) = params {
        if ps.len() != x.len() {
            return Err(StarError::ShapeMismatch(format!(
                "{} step parameter sets for {} inputs",
                ps.len(),
                x.len()
            )));
        }
    }
    let d = step_params(0).a_bar.len();
    let mut h = vec![T::zero(); d];
    let mut y = Vec::with_capacity(x.len());
    for (t, &xt) in x.iter().enumerate() {
        let p = step_params(t);
        let mut out = T::zero();
        for n in 0..d {
            h[n] = p.a_bar[n] * h[n] + p.b_bar[n] * xt;
            out += p.c[n] * h[n];
        }
        y.push(out);
    }
    check_finite(&y)?;
    Ok(y)
}

/// `K̄ = (C B̄, C Ā B̄, …, C Ā^{len−1} B̄)`.
pub fn kernel<T: Real>(p: &DiscreteSsm<T>, len: usize) -> Vec<T> {
    let mut power = p.b_bar.clone();
    let mut k = Vec::with_capacity(len);
    for _ in 0..len {
        k.push(power.iter().zip(&p.c).map(|(&v, &c)| v * c).sum());
        for (v, &a) in power.iter_mut().zip(&p.a_bar) {
            *v *= a;
        }
    }
    k
}

/// Causal convolution of `x` with [`kernel`]; only valid for time-invariant
/// parameters.
pub fn kernel_conv<T: Real>(params: &ScanParams<T>, x: &[T]) -> Result<Vec<T>> {
    let ScanParams::Invariant(p) = params else {
        return Err(StarError::NotTimeInvariant);
    };
    let k = kernel(p, x.len());
    let y: Vec<T> = (0..x.len())
        .map(|t| (0..=t).map(|j| k[j] * x[t - j]).sum())
        .collect();
    check_finite(&y)?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn lti(a_bar: f64, b_bar: f64, c: f64) -> ScanParams<f64> {
        ScanParams::Invariant(DiscreteSsm {
            a_bar: vec![a_bar],
            b_bar: vec![b_bar],
            c: vec![c],
        })
    }

    #[test]
    fn half_life_discretization() {
        let (a, b) = discretize(&[-1.0f64], &[1.0], std::f64::consts::LN_2).unwrap();
        assert_eq!(a[0], 0.5);
        // (−ln2)⁻¹ · (0.5 − 1) · ln2
        let expect = (1.0 / -std::f64::consts::LN_2) * (0.5 - 1.0) * std::f64::consts::LN_2;
        assert!((b[0] - expect).abs() < 1e-15 && (b[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn vanishing_timescale_limit() {
        let (a, b) = discretize(&[-1.0f64, -3.0, 0.0], &[1.0, 2.0, 1.0], 1e-8).unwrap();
        assert!(a.iter().all(|&v| (v - 1.0).abs() < 1e-7));
        assert!(b.iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn series_branch_is_continuous() {
        let t = ZOH_SERIES_THRESHOLD;
        for z in [t * 0.999_999, -t * 0.999_999, t * 0.5] {
            let exact = z.exp_m1() / z;
            assert!((zoh_factor(z) - exact).abs() < 1e-13, "z={z}");
        }
        for z in [-0.3f64, -1e-3, 2e-3, 0.5] {
            let fd = (zoh_factor(z + 1e-6) - zoh_factor(z - 1e-6)) / 2e-6;
            assert!((fd - zoh_factor_grad(z)).abs() < 1e-8, "z={z}");
        }
    }

    #[test]
    fn discretize_rejects_bad_timescale_and_overflow() {
        assert!(discretize(&[-1.0f64], &[1.0], 0.0).is_err());
        assert!(matches!(
            discretize(&[-1.0f64, 1e6], &[1.0, 1.0], 1.0),
            Err(StarError::NonFiniteChannel { channel: 1 })
        ));
    }

    #[test]
    fn memoryless_identity() {
        let x = [0.3, -1.0, 2.5];
        assert_eq!(scan_recurrent(&lti(0.0, 1.0, 1.0), &x).unwrap(), x.to_vec());
    }

    #[test]
    fn running_count() {
        let y = scan_recurrent(&lti(1.0, 1.0, 1.0), &[1.0; 6]).unwrap();
        assert_eq!(y, (1..=6).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn geometric_kernel() {
        let ScanParams::Invariant(p) = lti(0.5, 1.0, 1.0) else {
            unreachable!()
        };
        let k = kernel(&p, 4);
        // geometric series 0.5^j
        let oracle: Vec<f64> = (0..4).map(|j| 0.5f64.powi(j)).collect();
        assert_eq!(k, oracle);
    }

    #[test]
    fn zero_state_matrix_kernel() {
        let p = lti(0.0, 2.0, 1.5);
        let x = [1.0, -2.0, 0.5];
        let y = kernel_conv(&p, &x).unwrap();
        assert_eq!(y, x.iter().map(|v| 3.0 * v).collect::<Vec<_>>());
    }

    #[test]
    fn kernel_conv_rejects_varying_params() {
        let step = DiscreteSsm {
            a_bar: vec![0.5],
            b_bar: vec![1.0],
            c: vec![1.0],
        };
        let p = ScanParams::Varying(vec![step.clone(), step]);
        assert!(matches!(
            kernel_conv(&p, &[1.0, 2.0]),
            Err(StarError::NotTimeInvariant)
        ));
        assert_eq!(scan_recurrent(&p, &[1.0, 2.0]).unwrap(), vec![1.0, 2.5]);
    }

    #[test]
    fn recurrence_matches_convolution_on_random_systems() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let d = rng.random_range(1..=8);
            let len = rng.random_range(1..=32);
            let cont = SsmParams {
                a: (0..d).map(|_| -rng.random_range(0.1..3.0)).collect(),
                b: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                c: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                delta: rng.random_range(0.01..0.5),
            };
            let p = ScanParams::Invariant(cont.discretize().unwrap());
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = scan_recurrent(&p, &x).unwrap();
            let b = kernel_conv(&p, &x).unwrap();
            let scale = a.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() / scale < 1e-5);
            }
        }
    }
}
