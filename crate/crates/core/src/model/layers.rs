use super::params::{Attention, Bound, Linear, Norm};
use crate::tensor::{Graph, Result, Var};
use crate::Scalar;

pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, l: Linear, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var(l.w))?;
    g.add_row(y, p.var(l.b))
}

pub(crate) fn norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, n: Norm, x: Var, eps: T) -> Result<Var> {
    g.layer_norm(x, p.var(n.gain), p.var(n.bias), eps)
}

/// Two-layer ReLU MLP.
pub(crate) fn ffn<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    a: Linear,
    b: Linear,
    x: Var,
) -> Result<Var> {
    let h = linear(g, p, a, x)?;
    let h = g.relu(h);
    linear(g, p, b, h)
}

/// Multi-head scaled dot-product attention.
///
/// `score_bias`, when given, is added to every head's `[n_q, n_k]` score
/// matrix before the softmax.
pub(crate) fn attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    a: Attention,
    heads: usize,
    query: Var,
    key: Var,
    value: Var,
    score_bias: Option<Var>,
) -> Result<Var> {
    let q = linear(g, p, a.q, query)?;
    let k = linear(g, p, a.k, key)?;
    let v = linear(g, p, a.v, value)?;
    let cat = g.attention(q, k, v, heads, score_bias)?;
    linear(g, p, a.o, cat)
}
