//! Masked multi-head softmax attention with an explicit backward pass.

use crate::tensor::{gemm_into, Matrix, Real};

use super::mask::BlockCausalMask;

/// Softmax probabilities per head, `heads` matrices of `queries x keys`.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    probs: Vec<Matrix<T>>,
}

pub struct AttentionGrads<T> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
}

fn head_slice<T: Real>(x: &Matrix<T>, h: usize, dh: usize) -> Matrix<T> {
    Matrix::from_fn(x.rows(), dh, |r, c| x.get(r, h * dh + c))
}

fn write_head<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>, h: usize, dh: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(src.row(r));
    }
}

fn check<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    mask: &BlockCausalMask,
) {
    assert!(
        heads > 0 && q.cols().is_multiple_of(heads),
        "width {} not divisible by {heads} heads",
        q.cols()
    );
    assert_eq!(q.cols(), k.cols(), "query / key width");
    assert_eq!(k.rows(), v.rows(), "key / value length");
    assert_eq!(
        (mask.rows(), mask.cols()),
        (q.rows(), k.rows()),
        "mask shape"
    );
}

/// `softmax(q kᵀ / √d_h + mask) v` per head. Rows with no permitted key
/// produce zeros.
pub fn attention_forward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    mask: &BlockCausalMask,
) -> (Matrix<T>, AttentionCache<T>) {
    check(q, k, v, heads, mask);
    let dh = q.cols() / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let dv_h = v.cols() / heads;
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(q, h, dh);
        let kh = head_slice(k, h, dh);
        let vh = head_slice(v, h, dv_h);
        let mut s = Matrix::zeros(q.rows(), k.rows());
        gemm_into(&qh, false, &kh, true, &mut s, scale, T::zero());
        for r in 0..s.rows() {
            let allow = mask.row(r);
            let row = s.row_mut(r);
            let max = row
                .iter()
                .zip(allow)
                .filter(|(_, &a)| a)
                .map(|(&x, _)| x)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                row.fill(T::zero());
                continue;
            }
            let mut z = T::zero();
            for (x, &a) in row.iter_mut().zip(allow) {
                *x = if a { (*x - max).exp() } else { T::zero() };
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let mut oh = Matrix::zeros(q.rows(), dv_h);
        gemm_into(&s, false, &vh, false, &mut oh, T::one(), T::zero());
        write_head(&mut out, &oh, h, dv_h);
        probs.push(s);
    }
    (out, AttentionCache { probs })
}

pub fn attention_backward<T: Real>(
    g: &Matrix<T>,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    mask: &BlockCausalMask,
    cache: &AttentionCache<T>,
) -> AttentionGrads<T> {
    check(q, k, v, heads, mask);
    let dh = q.cols() / heads;
    let dv_h = v.cols() / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    for h in 0..heads {
        let p = &cache.probs[h];
        let gh = head_slice(g, h, dv_h);
        let qh = head_slice(q, h, dh);
        let kh = head_slice(k, h, dh);
        let vh = head_slice(v, h, dv_h);

        let mut dvh = Matrix::zeros(v.rows(), dv_h);
        gemm_into(p, true, &gh, false, &mut dvh, T::one(), T::zero());
        write_head(&mut dv, &dvh, h, dv_h);

        let mut dp = Matrix::zeros(q.rows(), k.rows());
        gemm_into(&gh, false, &vh, true, &mut dp, T::one(), T::zero());
        for r in 0..dp.rows() {
            let pr = p.row(r);
            let dot: T = pr.iter().zip(dp.row(r)).map(|(&a, &b)| a * b).sum();
            for (x, &pv) in dp.row_mut(r).iter_mut().zip(pr) {
                *x = pv * (*x - dot);
            }
        }
        let mut dqh = Matrix::zeros(q.rows(), dh);
        gemm_into(&dp, false, &kh, false, &mut dqh, scale, T::zero());
        write_head(&mut dq, &dqh, h, dh);
        let mut dkh = Matrix::zeros(k.rows(), dh);
        gemm_into(&dp, true, &qh, false, &mut dkh, scale, T::zero());
        write_head(&mut dk, &dkh, h, dh);
    }
    AttentionGrads { dq, dk, dv }
}
