//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation.

use std::sync::Arc;

use crate::decoder::attention::{self, AttentionCache};
use crate::decoder::mask::BlockCausalMask;
use crate::ssm::selective::{self, ScanCache};
use crate::tensor::{gemm_into, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where one output row of [`Tape::rows`] comes from. `None` yields zeros.
pub type RowRef = Option<(usize, usize)>;

const LN_EPS: f64 = 1e-5;

enum Op<T: Real> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softplus(Var),
    NegExp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Rows {
        sources: Vec<Var>,
        map: Vec<RowRef>,
    },
    SelectiveScan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        cache: ScanCache<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<BlockCausalMask>,
        cache: AttentionCache<T>,
    },
    Mse {
        pred: Var,
        target: Matrix<T>,
        include: Vec<bool>,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix<T>,
    },
}

struct Node<T: Real> {
    value: Matrix<T>,
    op: Op<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, delta: Matrix<T>) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

fn gelu<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// A leaf whose gradient is reported under parameter index `index`.
    pub fn param(&mut self, index: usize, value: Matrix<T>) -> Var {
        self.push(value, Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let mut out = self.value(a).clone();
        let bias = r.row(0).to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= x;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// `-exp(a)`, used to keep the state matrix diagonal strictly negative.
    pub fn neg_exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| -v.exp());
        self.push(out, Op::NegExp(a))
    }

    /// `x @ w + b` with `w` stored as `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Per-row layer normalization with affine `1 x cols` gamma / beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::from_usize(cols).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, &gi), &bi) in out.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gi + bi;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Assembles a new matrix row by row from rows of `sources`.
    pub fn rows(&mut self, sources: &[Var], map: Vec<RowRef>) -> Var {
        let cols = self.value(sources[0]).cols();
        let mut out = Matrix::zeros(map.len(), cols);
        for (i, entry) in map.iter().enumerate() {
            if let Some((s, r)) = *entry {
                let src = self.value(sources[s]);
                assert_eq!(src.cols(), cols, "row sources must share width");
                out.row_mut(i).copy_from_slice(src.row(r));
            }
        }
        self.push(
            out,
            Op::Rows {
                sources: sources.to_vec(),
                map,
            },
        )
    }

    /// Permutes / selects rows of a single source.
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Var {
        let map = rows.iter().map(|&r| Some((0, r))).collect();
        self.rows(&[x], map)
    }

    /// Selective scan over a `T x D` input with per-step `delta` (`T x D`),
    /// state matrix `a` (`D x N`), and input / output projections `b`, `c`
    /// (`T x N`).
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Var {
        let (y, cache) = selective::scan_forward(
            self.value(u),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
        );
        self.push(
            y,
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                cache,
            },
        )
    }

    /// Multi-head softmax attention with a boolean permission mask.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<BlockCausalMask>,
    ) -> Var {
        let (out, cache) =
            attention::attention_forward(self.value(q), self.value(k), self.value(v), heads, &mask);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                cache,
            },
        )
    }

    /// Mean squared error over the rows flagged in `include`, averaged over
    /// every included component.
    pub fn mse(&mut self, pred: Var, target: Matrix<T>, include: Vec<bool>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "prediction / target shape");
        assert_eq!(include.len(), p.rows());
        let count = include.iter().filter(|&&f| f).count() * p.cols();
        let mut total = T::zero();
        for r in (0..p.rows()).filter(|&r| include[r]) {
            for (&a, &b) in p.row(r).iter().zip(target.row(r)) {
                total += (a - b) * (a - b);
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        self.push(
            Matrix::filled(1, 1, loss),
            Op::Mse {
                pred,
                target,
                include,
                count,
            },
        )
    }

    /// Mean softmax cross-entropy of `logits` (`batch x classes`).
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), labels.len());
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            total += -(row[label] - max - z.ln());
        }
        let loss = total / T::from_usize(labels.len().max(1)).unwrap();
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
        )
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).get(0, 0)
    }

    /// Backpropagates from a `1 x 1` output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every parameter leaf, keyed by parameter index.
    pub fn param_grads(&self, grads: &Gradients<T>, count: usize) -> Vec<Option<Matrix<T>>> {
        let mut out: Vec<Option<Matrix<T>>> = (0..count).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                if let Some(g) = &grads.grads[i] {
                    accumulate(&mut out[p], g.clone());
                }
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                gemm_into(g, false, bv, true, &mut ga, T::one(), T::zero());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                gemm_into(av, true, g, false, &mut gb, T::one(), T::zero());
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::AddRow(a, row) => {
                let mut gr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[row.0], gr);
            }
            Op::Mul(a, b) => {
                let mut ga = g.clone();
                for (o, &x) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *o *= x;
                }
                let mut gb = g.clone();
                for (o, &x) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *o *= x;
                }
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(&mut grads[a.0], g.map(|v| v * s));
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                for (o, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *o *= gelu_grad(x);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Softplus(a) => {
                let mut ga = g.clone();
                for (o, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *o *= sigmoid(x);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::NegExp(a) => {
                let mut ga = g.clone();
                for (o, &y) in ga.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                    *o *= y;
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let n = T::from_usize(cols).unwrap();
                let gam = self.value(*gamma).row(0);
                let mut gx = Matrix::zeros(rows, cols);
                let mut gg = Matrix::zeros(1, cols);
                let mut gb = Matrix::zeros(1, cols);
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gam[c];
                        sum_d += dxhat[c];
                        sum_dx += dxhat[c] * xr[c];
                    }
                    let is = inv_std[r];
                    let out = gx.row_mut(r);
                    for c in 0..cols {
                        out[c] = is / n * (n * dxhat[c] - sum_d - xr[c] * sum_dx);
                    }
                    let ggr = gg.row_mut(0);
                    for c in 0..cols {
                        ggr[c] += gr[c] * xr[c];
                    }
                    let gbr = gb.row_mut(0);
                    for c in 0..cols {
                        gbr[c] += gr[c];
                    }
                }
                accumulate(&mut grads[x.0], gx);
                accumulate(&mut grads[gamma.0], gg);
                accumulate(&mut grads[beta.0], gb);
            }
            Op::Rows { sources, map } => {
                let mut per_source: Vec<Option<Matrix<T>>> = sources.iter().map(|_| None).collect();
                for (r, entry) in map.iter().enumerate() {
                    if let Some((s, row)) = *entry {
                        let slot = per_source[s].get_or_insert_with(|| {
                            let v = self.value(sources[s]);
                            Matrix::zeros(v.rows(), v.cols())
                        });
                        for (o, &v) in slot.row_mut(row).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                for (s, m) in per_source.into_iter().enumerate() {
                    if let Some(m) = m {
                        accumulate(&mut grads[sources[s].0], m);
                    }
                }
            }
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                cache,
            } => {
                let sg = selective::scan_backward(
                    g,
                    self.value(*u),
                    self.value(*delta),
                    self.value(*a),
                    self.value(*b),
                    self.value(*c),
                    cache,
                );
                accumulate(&mut grads[u.0], sg.du);
                accumulate(&mut grads[delta.0], sg.ddelta);
                accumulate(&mut grads[a.0], sg.da);
                accumulate(&mut grads[b.0], sg.db);
                accumulate(&mut grads[c.0], sg.dc);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                cache,
            } => {
                let ag = attention::attention_backward(
                    g,
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    mask,
                    cache,
                );
                accumulate(&mut grads[q.0], ag.dq);
                accumulate(&mut grads[k.0], ag.dk);
                accumulate(&mut grads[v.0], ag.dv);
            }
            Op::Mse {
                pred,
                target,
                include,
                count,
            } => {
                let p = self.value(*pred);
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                if *count > 0 {
                    let scale = g.get(0, 0) * T::lit(2.0) / T::from_usize(*count).unwrap();
                    for r in (0..p.rows()).filter(|&r| include[r]) {
                        let tr = target.row(r);
                        let pr = p.row(r);
                        for (c, o) in gp.row_mut(r).iter_mut().enumerate() {
                            *o = scale * (pr[c] - tr[c]);
                        }
                    }
                }
                accumulate(&mut grads[pred.0], gp);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.get(0, 0) / T::from_usize(labels.len().max(1)).unwrap();
                let mut gl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    let row = gl.row_mut(r);
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(&mut grads[logits.0], gl);
            }
        }
    }
}
