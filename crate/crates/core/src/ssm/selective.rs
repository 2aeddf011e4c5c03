//! Input-dependent (selective) scan.
//!
//! Per step `t` and channel `c`, the timescale `Δ[t,c]` and the shared
//! projections `B[t,:]`, `C[t,:]` come from the input token. Each step is
//! discretized with the same zero-order hold as [`super::discretize`]:
//!
//! ```text
//! Ā = exp(Δ a),  B̄ = Δ φ(Δ a) B,  φ(z) = (e^z − 1) / z
//! h_t = Ā h_{t−1} + B̄ u_t,   y_t = C_t · h_t
//! ```

use crate::autograd::{Tape, Var};
use crate::error::{Result, StarError};
use crate::params::{xavier, LayerGroup, ParamStore, Rng};
use crate::tensor::{Matrix, Real};

use super::{zoh_factor, zoh_factor_grad};

/// Hidden states saved by the forward pass, `(T, D, N)` row-major.
pub struct ScanCache<T> {
    states: Vec<T>,
}

pub struct ScanGrads<T> {
    pub du: Matrix<T>,
    pub ddelta: Matrix<T>,
    pub da: Matrix<T>,
    pub db: Matrix<T>,
    pub dc: Matrix<T>,
}

pub fn scan_forward<T: Real>(
    u: &Matrix<T>,
    delta: &Matrix<T>,
    a: &Matrix<T>,
    b: &Matrix<T>,
    c: &Matrix<T>,
) -> (Matrix<T>, ScanCache<T>) {
    let (len, dim) = u.shape();
    let n_state = a.cols();
    assert_eq!(delta.shape(), (len, dim));
    assert_eq!(a.rows(), dim);
    assert_eq!(b.shape(), (len, n_state));
    assert_eq!(c.shape(), (len, n_state));

    let mut y = Matrix::zeros(len, dim);
    let mut states = vec![T::zero(); len * dim * n_state];
    let mut h = vec![T::zero(); dim * n_state];
    for t in 0..len {
        let bt = b.row(t);
        let ct = c.row(t);
        for ch in 0..dim {
            let dt = delta.get(t, ch);
            let ut = u.get(t, ch);
            let arow = a.row(ch);
            let hs = &mut h[ch * n_state..(ch + 1) * n_state];
            let mut out = T::zero();
            for n in 0..n_state {
                let z = dt * arow[n];
                let psi = dt * zoh_factor(z);
                hs[n] = z.exp() * hs[n] + psi * bt[n] * ut;
                out += ct[n] * hs[n];
            }
            y.set(t, ch, out);
        }
        states[t * dim * n_state..(t + 1) * dim * n_state].copy_from_slice(&h);
    }
    (y, ScanCache { states })
}

pub fn scan_backward<T: Real>(
    gy: &Matrix<T>,
    u: &Matrix<T>,
    delta: &Matrix<T>,
    a: &Matrix<T>,
    b: &Matrix<T>,
    c: &Matrix<T>,
    cache: &ScanCache<T>,
) -> ScanGrads<T> {
    let (len, dim) = u.shape();
    let n_state = a.cols();
    let mut du = Matrix::zeros(len, dim);
    let mut ddelta = Matrix::zeros(len, dim);
    let mut da = Matrix::zeros(dim, n_state);
    let mut db = Matrix::zeros(len, n_state);
    let mut dc = Matrix::zeros(len, n_state);
    // gradient flowing into h_t from later steps
    let mut gh = vec![T::zero(); dim * n_state];
    let zero_state = vec![T::zero(); dim * n_state];
    for t in (0..len).rev() {
        let h_t = &cache.states[t * dim * n_state..(t + 1) * dim * n_state];
        let h_prev = if t == 0 {
            &zero_state[..]
        } else {
            &cache.states[(t - 1) * dim * n_state..t * dim * n_state]
        };
        let bt = b.row(t).to_vec();
        let ct = c.row(t).to_vec();
        for ch in 0..dim {
            let dy = gy.get(t, ch);
            let dt = delta.get(t, ch);
            let ut = u.get(t, ch);
            let mut du_acc = T::zero();
            let mut ddt_acc = T::zero();
            for n in 0..n_state {
                let idx = ch * n_state + n;
                let an = a.get(ch, n);
                let z = dt * an;
                let ab = z.exp();
                let phi = zoh_factor(z);
                let phi_g = zoh_factor_grad(z);
                let psi = dt * phi;

                let g = gh[idx] + dy * ct[n];
                dc.row_mut(t)[n] += dy * h_t[idx];

                let d_ab = g * h_prev[idx];
                let d_psi = g * bt[n] * ut;
                db.row_mut(t)[n] += g * psi * ut;
                du_acc += g * psi * bt[n];

                ddt_acc += d_ab * ab * an + d_psi * (phi + z * phi_g);
                da.row_mut(ch)[n] += d_ab * ab * dt + d_psi * dt * dt * phi_g;

                gh[idx] = g * ab;
            }
            du.set(t, ch, du_acc);
            ddelta.set(t, ch, ddt_acc);
        }
    }
    ScanGrads {
        du,
        ddelta,
        da,
        db,
        dc,
    }
}

/// Parameter indices of the selection projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectiveScanParams {
    pub w_delta: usize,
    pub b_delta: usize,
    pub w_b: usize,
    pub b_b: usize,
    pub w_c: usize,
    pub b_c: usize,
    /// `A = -exp(a_log)`, shape `D x N`.
    pub a_log: usize,
}

impl SelectiveScanParams {
    /// Registers and initializes the projections: `A_n = −(n+1)` and
    /// `softplus(b_delta)` log-uniform in `[1e-3, 1e-1]`.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        state_dim: usize,
        group: LayerGroup,
        rng: &mut Rng,
    ) -> Self {
        use rand::Rng as _;
        let b_delta = Matrix::from_fn(1, width, |_, _| {
            let log_dt = rng.random_range((1e-3f64).ln()..(1e-1f64).ln());
            let dt = log_dt.exp();
            // inverse softplus
            T::lit(dt + (-(-dt).exp_m1()).ln())
        });
        let a_log = Matrix::from_fn(width, state_dim, |_, n| T::lit(((n + 1) as f64).ln()));
        Self {
            w_delta: store.add(
                format!("{prefix}.w_delta"),
                crate::params::normal(width, width, 0.02, rng),
                true,
                group,
            ),
            b_delta: store.add(format!("{prefix}.b_delta"), b_delta, false, group),
            w_b: store.add(
                format!("{prefix}.w_b"),
                xavier(width, state_dim, rng),
                true,
                group,
            ),
            b_b: store.add(
                format!("{prefix}.b_b"),
                Matrix::zeros(1, state_dim),
                false,
                group,
            ),
            w_c: store.add(
                format!("{prefix}.w_c"),
                xavier(width, state_dim, rng),
                true,
                group,
            ),
            b_c: store.add(
                format!("{prefix}.b_c"),
                Matrix::zeros(1, state_dim),
                false,
                group,
            ),
            a_log: store.add(format!("{prefix}.a_log"), a_log, false, group),
        }
    }

    /// Builds the scan of `x` (`T x D`) on the tape.
    pub fn graph<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Var {
        let pre = tape.linear(x, vars[self.w_delta], Some(vars[self.b_delta]));
        let delta = tape.softplus(pre);
        let b = tape.linear(x, vars[self.w_b], Some(vars[self.b_b]));
        let c = tape.linear(x, vars[self.w_c], Some(vars[self.b_c]));
        let a = tape.neg_exp(vars[self.a_log]);
        tape.selective_scan(x, delta, a, b, c)
    }
}

/// Forward-only selective scan of `x` using parameters from `store`.
pub fn selective_scan<T: Real>(
    x: &Matrix<T>,
    params: &SelectiveScanParams,
    store: &ParamStore<T>,
) -> Result<Matrix<T>> {
    if !x.is_finite() {
        return Err(StarError::NonFinite {
            step: 0,
            what: "selective scan input".into(),
        });
    }
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let xv = tape.input(x.clone());
    let y = params.graph(&mut tape, &vars, xv);
    let out = tape.value(y).clone();
    if let Some(r) = (0..out.rows()).find(|&r| out.row(r).iter().any(|v| !v.is_finite())) {
        return Err(StarError::NonFinite {
            step: r as u64,
            what: "selective scan output".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{discretize, scan_recurrent, DiscreteSsm, ScanParams};
    use rand::{Rng as _, SeedableRng};

    fn setup(width: usize, state: usize, seed: u64) -> (ParamStore<f64>, SelectiveScanParams, Rng) {
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = SelectiveScanParams::register(
            &mut store,
            "mix",
            width,
            state,
            LayerGroup::Block(1),
            &mut rng,
        );
        (store, p, rng)
    }

    fn random_input(len: usize, width: usize, rng: &mut Rng) -> Matrix<f64> {
        Matrix::from_fn(len, width, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_state_matrix_and_timescale() {
        let (store, p, _) = setup(3, 4, 0);
        let a = store.value(p.a_log).map(|v| -v.exp());
        assert!((a.get(2, 3) + 4.0).abs() < 1e-12);
        for &b in store.value(p.b_delta).data() {
            let dt = crate::autograd::softplus(b);
            assert!((1e-3..=1e-1).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn zero_projections_give_zero_output() {
        let (mut store, p, mut rng) = setup(4, 3, 1);
        for i in [p.w_delta, p.w_b, p.b_b, p.w_c, p.b_c] {
            let v = store.value_mut(i);
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let x = random_input(7, 4, &mut rng);
        let y = selective_scan(&x, &p, &store).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn future_inputs_do_not_change_the_past() {
        let (store, p, mut rng) = setup(5, 4, 2);
        let x = random_input(12, 5, &mut rng);
        let base = selective_scan(&x, &p, &store).unwrap();
        for t in 0..12 {
            let mut x2 = x.clone();
            for r in t + 1..12 {
                for v in x2.row_mut(r) {
                    *v += 3.0;
                }
            }
            let y = selective_scan(&x2, &p, &store).unwrap();
            for r in 0..=t {
                assert_eq!(y.row(r), base.row(r));
            }
        }
    }

    #[test]
    fn frozen_projections_reduce_to_lti_recurrence() {
        let (mut store, p, mut rng) = setup(3, 4, 3);
        for i in [p.w_delta, p.w_b, p.w_c] {
            store
                .value_mut(i)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        for i in [p.b_b, p.b_c] {
            store
                .value_mut(i)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
        let x = random_input(16, 3, &mut rng);
        let y = selective_scan(&x, &p, &store).unwrap();
        for ch in 0..3 {
            let a: Vec<f64> = store
                .value(p.a_log)
                .row(ch)
                .iter()
                .map(|v| -v.exp())
                .collect();
            let b = store.value(p.b_b).row(0).to_vec();
            let c = store.value(p.b_c).row(0).to_vec();
            let dt = crate::autograd::softplus(store.value(p.b_delta).get(0, ch));
            let (a_bar, b_bar) = discretize(&a, &b, dt).unwrap();
            let lti = ScanParams::Invariant(DiscreteSsm { a_bar, b_bar, c });
            let xs: Vec<f64> = (0..16).map(|t| x.get(t, ch)).collect();
            let expect = scan_recurrent(&lti, &xs).unwrap();
            for t in 0..16 {
                assert!((y.get(t, ch) - expect[t]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kernel_gradients_match_central_differences() {
        let mut rng = Rng::seed_from_u64(4);
        let (len, dim, ns) = (6, 3, 2);
        let u = random_input(len, dim, &mut rng);
        let delta = Matrix::from_fn(len, dim, |_, _| rng.random_range(0.05..0.8));
        let a = Matrix::from_fn(dim, ns, |_, _| -rng.random_range(0.2..2.0));
        let b = random_input(len, ns, &mut rng);
        let c = random_input(len, ns, &mut rng);
        let w = random_input(len, dim, &mut rng);
        let loss = |u: &Matrix<f64>,
                    d: &Matrix<f64>,
                    a: &Matrix<f64>,
                    b: &Matrix<f64>,
                    c: &Matrix<f64>| {
            let (y, _) = scan_forward(u, d, a, b, c);
            y.data()
                .iter()
                .zip(w.data())
                .map(|(p, q)| p * q)
                .sum::<f64>()
        };
        let (_, cache) = scan_forward(&u, &delta, &a, &b, &c);
        let g = scan_backward(&w, &u, &delta, &a, &b, &c, &cache);
        let inputs = [&u, &delta, &a, &b, &c];
        let grads = [&g.du, &g.ddelta, &g.da, &g.db, &g.dc];
        for (which, grad) in grads.iter().enumerate() {
            for e in 0..inputs[which].len() {
                let eval = |h: f64| {
                    let mut ms: Vec<Matrix<f64>> = inputs.iter().map(|m| (*m).clone()).collect();
                    ms[which].data_mut()[e] += h;
                    loss(&ms[0], &ms[1], &ms[2], &ms[3], &ms[4])
                };
                let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                let an = grad.data()[e];
                assert!(
                    (fd - an).abs() < 1e-7 * (1.0 + fd.abs()),
                    "input {which} entry {e}: {an} vs {fd}"
                );
            }
        }
    }
}
