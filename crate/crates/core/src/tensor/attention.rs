//! Fused multi-head scaled dot-product attention kernels.
//!
//! Inputs are already projected: `q: [n_q, C]`, `k, v: [n_k, C]`, heads split
//! the channel axis into contiguous blocks of `C / heads`.

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnDims {
    pub nq: usize,
    pub nk: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn scale<T: Scalar>(&self) -> T {
        T::lit(1.0 / (self.head_dim() as f64).sqrt())
    }
}

fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Columns `h*dh..(h+1)*dh` of `x: [n, width]`, as `[n, dh]`.
fn head_block<T: Scalar>(x: &[T], n: usize, width: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dh);
    for r in 0..n {
        out.extend_from_slice(&x[r * width + h * dh..r * width + (h + 1) * dh]);
    }
    out
}

/// Transpose of [`head_block`], as `[dh, n]`.
fn head_block_t<T: Scalar>(x: &[T], n: usize, width: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * dh];
    for r in 0..n {
        for t in 0..dh {
            out[t * n + r] = x[r * width + h * dh + t];
        }
    }
    out
}

/// Returns the `[n_q, C]` output and the `[heads, n_q, n_k]` attention weights.
pub(crate) fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    d: AttnDims,
) -> (Vec<T>, Vec<T>) {
    let dh = d.head_dim();
    let scale: T = d.scale();
    let mut out = vec![T::zero(); d.nq * d.width];
    let mut probs = vec![T::zero(); d.heads * d.nq * d.nk];
    for h in 0..d.heads {
        let kt = head_block_t(k, d.nk, d.width, h, dh);
        let vh = head_block(v, d.nk, d.width, h, dh);
        for i in 0..d.nq {
            let row = &mut probs[(h * d.nq + i) * d.nk..(h * d.nq + i + 1) * d.nk];
            let qi = &q[i * d.width + h * dh..i * d.width + (h + 1) * dh];
            for (t, &qv) in qi.iter().enumerate() {
                axpy(row, qv * scale, &kt[t * d.nk..(t + 1) * d.nk]);
            }
            if let Some(b) = bias {
                for (r, &bv) in row.iter_mut().zip(&b[i * d.nk..(i + 1) * d.nk]) {
                    *r = *r + bv;
                }
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut total = T::zero();
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total = total + *r;
            }
            let inv = T::one() / total;
            for r in row.iter_mut() {
                *r = *r * inv;
            }
            let oi = &mut out[i * d.width + h * dh..i * d.width + (h + 1) * dh];
            for (j, &p) in row.iter().enumerate() {
                axpy(oi, p, &vh[j * dh..(j + 1) * dh]);
            }
        }
    }
    (out, probs)
}

pub(crate) struct AttnGrads<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub bias: Vec<T>,
}

/// Adjoints of all four inputs given the output adjoint `g: [n_q, C]`.
pub(crate) fn backward<T: Scalar>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d: AttnDims,
    want_bias: bool,
) -> AttnGrads<T> {
    let dh = d.head_dim();
    let scale: T = d.scale();
    let mut dq = vec![T::zero(); d.nq * d.width];
    let mut dk = vec![T::zero(); d.nk * d.width];
    let mut dv = vec![T::zero(); d.nk * d.width];
    let mut dbias = if want_bias {
        vec![T::zero(); d.nq * d.nk]
    } else {
        Vec::new()
    };
    let mut dp = vec![T::zero(); d.nk];
    for h in 0..d.heads {
        let kh = head_block(k, d.nk, d.width, h, dh);
        let vt = head_block_t(v, d.nk, d.width, h, dh);
        let mut dkh = vec![T::zero(); d.nk * dh];
        let mut dvh = vec![T::zero(); d.nk * dh];
        for i in 0..d.nq {
            let p = &probs[(h * d.nq + i) * d.nk..(h * d.nq + i + 1) * d.nk];
            let go = &g[i * d.width + h * dh..i * d.width + (h + 1) * dh];
            let qi = &q[i * d.width + h * dh..i * d.width + (h + 1) * dh];
            for (j, &pj) in p.iter().enumerate() {
                axpy(&mut dvh[j * dh..(j + 1) * dh], pj, go);
            }
            dp.fill(T::zero());
            for (t, &gt) in go.iter().enumerate() {
                axpy(&mut dp, gt, &vt[t * d.nk..(t + 1) * d.nk]);
            }
            let dot = p
                .iter()
                .zip(&dp)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for (dpj, &pj) in dp.iter_mut().zip(p) {
                *dpj = pj * (*dpj - dot);
            }
            if want_bias {
                for (b, &s) in dbias[i * d.nk..(i + 1) * d.nk].iter_mut().zip(&dp) {
                    *b = *b + s;
                }
            }
            let dqi = &mut dq[i * d.width + h * dh..i * d.width + (h + 1) * dh];
            for (j, &s) in dp.iter().enumerate() {
                let s = s * scale;
                axpy(dqi, s, &kh[j * dh..(j + 1) * dh]);
                axpy(&mut dkh[j * dh..(j + 1) * dh], s, qi);
            }
        }
        for j in 0..d.nk {
            dk[j * d.width + h * dh..j * d.width + (h + 1) * dh]
                .copy_from_slice(&dkh[j * dh..(j + 1) * dh]);
            dv[j * d.width + h * dh..j * d.width + (h + 1) * dh]
                .copy_from_slice(&dvh[j * dh..(j + 1) * dh]);
        }
    }
    AttnGrads {
        q: dq,
        k: dk,
        v: dv,
        bias: dbias,
    }
}
