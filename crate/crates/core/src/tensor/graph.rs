use super::attention::{self as attn, AttnDims};
use super::kernels::{add_into, gemm, sigmoid, transpose};
use super::{axis_split, Result, Tensor, TensorError};
use crate::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

enum Op<T> {
    /// Leaf, or any node whose inputs are all constants.
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ClampMax(Var, T),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
        eps: T,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows(Var, Vec<usize>),
    GatherMean(Var, Vec<usize>),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        dims: AttnDims,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of primitive applications. Creation order is a
/// topological order; [`Graph::backward`] visits nodes once, in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `leaf`; `None` if it is not a differentiable leaf.
    pub fn get(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.grads.get(leaf.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(leaf.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut adj[v.0] {
        Some(existing) => add_into(existing, &contrib),
        slot @ None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| {
            TensorError::invalid(
                op,
                format!("expected rank-2 input, got {:?}", self.shape(v)),
            )
        })
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(v).len() {
            return Err(TensorError::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(v)),
            ));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let value = Tensor::new(vec![n, m], transpose(self.value(a).data(), m, n))?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Bcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok((sa.to_vec(), Bcast::Same))
        } else if self.value(b).numel() == 1 {
            Ok((sa.to_vec(), Bcast::RhsScalar))
        } else if self.value(a).numel() == 1 {
            Ok((sb.to_vec(), Bcast::LhsScalar))
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn zip_values(&self, a: Var, b: Var, mode: Bcast, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        match mode {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::RhsScalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Bcast::LhsScalar => db.iter().map(|&y| f(da[0], y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, mode) = self.bcast("add", a, b)?;
        let value = Tensor::new(shape, self.zip_values(a, b, mode, |x, y| x + y))?;
        Ok(self.push(value, Op::Add(a, b, mode), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, mode) = self.bcast("sub", a, b)?;
        let value = Tensor::new(shape, self.zip_values(a, b, mode, |x, y| x - y))?;
        Ok(self.push(value, Op::Sub(a, b, mode), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, mode) = self.bcast("mul", a, b)?;
        let value = Tensor::new(shape, self.zip_values(a, b, mode, |x, y| x * y))?;
        Ok(self.push(value, Op::Mul(a, b, mode), &[a, b]))
    }

    /// Adds a bias vector (`[n]` or `[1, n]`) to every row of `x: [m, n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row", x)?;
        if self.value(bias).numel() != n || self.shape(bias).len() > 2 {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, b);
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        self.push(value, Op::Log(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs(x), &[x])
    }

    /// `min(x, c)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v.min(c));
        self.push(value, Op::ClampMax(x, c), &[x])
    }

    // ---- normalisation --------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, l| m.max(src[at(l)]));
                let mut total = T::zero();
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    total = total + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax(x, axis), &[x]))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "rank-0 input"))?;
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let nf = T::from_usize(n).unwrap();
        let rows = src.len() / n;
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// `x / max(||x||_2, 1e-12)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let eps = T::lit(1e-12);
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let norm = (0..len).map(|l| src[at(l)] * src[at(l)]).sum::<T>().sqrt();
                let denom = norm.max(eps);
                for l in 0..len {
                    out[at(l)] = src[at(l)] / denom;
                }
                norms.push(norm);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::L2Normalize {
                x,
                axis,
                norms,
                eps,
            },
            &[x],
        ))
    }

    /// Per-row softmax cross-entropy of `logits: [m, k]` against integer
    /// targets; returns the `[m]` vector of row losses.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = self.dims2("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![m, k],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("target {t} out of range for {k} classes"),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); m * k];
        let mut losses = Vec::with_capacity(m);
        for r in 0..m {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * k + j] = e;
                total = total + e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = *p / total;
            }
            losses.push(max + total.ln() - row[targets[r]]);
        }
        let value = Tensor::new(vec![m], losses)?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- reductions and structure ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        self.push(Tensor::scalar(total), Op::Mean(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total_len = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total_len += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total_len;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    /// Index range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start >= end || end > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} invalid for axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Selects rows of a rank-2 tensor (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", x)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row index set {rows:?} invalid for {m} rows"),
            ));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(src.row(r));
        }
        let value = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.push(value, Op::GatherRows(x, rows.to_vec()), &[x]))
    }

    /// Mean of the selected rows of `x: [m, n]`, as a `[1, n]` tensor.
    pub fn gather_mean(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_mean", x)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(TensorError::invalid(
                "gather_mean",
                format!("row index set {rows:?} invalid for {m} rows"),
            ));
        }
        let src = self.value(x);
        let mut out = vec![T::zero(); n];
        for &r in rows {
            add_into(&mut out, src.row(r));
        }
        let count = T::from_usize(rows.len()).unwrap();
        for v in &mut out {
            *v = *v / count;
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.push(value, Op::GatherMean(x, rows.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshape(shape)
            .map_err(|_| TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            })?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Multi-head scaled dot-product attention on projected inputs
    /// `q: [n_q, C]`, `k, v: [n_k, C]`, with an optional additive score
    /// bias `[n_q, n_k]` shared by all heads. Returns `[n_q, C]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: Option<Var>,
    ) -> Result<Var> {
        let (nq, width) = self.dims2("attention", q)?;
        let (nk, wk) = self.dims2("attention", k)?;
        if self.shape(v) != [nk, wk] || wk != width {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(k).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::invalid(
                "attention",
                format!("{heads} heads do not divide width {width}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [nq, nk] {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: vec![nq, nk],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let dims = AttnDims {
            nq,
            nk,
            width,
            heads,
        };
        let (out, probs) = attn::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            bias.map(|b| self.value(b).data()),
            dims,
        );
        let value = Tensor::new(vec![nq, width], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                bias,
                dims,
                probs,
            },
            &inputs,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a single-element `loss`. Pure in `(graph, loss)`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                    return None;
                }
                let data = adj
                    .get_mut(i)
                    .and_then(|a| a.take())
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                Some(Tensor::new(node.value.shape().to_vec(), data).expect("adjoint shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let bt = transpose(self.value(b).data(), k, n);
                    accumulate(adj, a, gemm(g, &bt, m, n, k));
                }
                if self.wants(b) {
                    let at = transpose(self.value(a).data(), m, k);
                    accumulate(adj, b, gemm(&at, g, k, m, n));
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = self.value(a).dims2().unwrap();
                accumulate(adj, a, transpose(g, n, m));
            }
            &Op::Add(a, b, mode) | &Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                let total = || g.iter().copied().sum::<T>();
                if self.wants(a) {
                    let c = match mode {
                        Bcast::LhsScalar => vec![total()],
                        _ => g.to_vec(),
                    };
                    accumulate(adj, a, c);
                }
                if self.wants(b) {
                    let c = match mode {
                        Bcast::RhsScalar => vec![sign * total()],
                        _ => g.iter().map(|&v| sign * v).collect(),
                    };
                    accumulate(adj, b, c);
                }
            }
            &Op::Mul(a, b, mode) => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let c = match mode {
                        Bcast::Same => g.iter().zip(db).map(|(&gv, &y)| gv * y).collect(),
                        Bcast::RhsScalar => g.iter().map(|&gv| gv * db[0]).collect(),
                        Bcast::LhsScalar => vec![g.iter().zip(db).map(|(&gv, &y)| gv * y).sum()],
                    };
                    accumulate(adj, a, c);
                }
                if self.wants(b) {
                    let c = match mode {
                        Bcast::Same => g.iter().zip(da).map(|(&gv, &x)| gv * x).collect(),
                        Bcast::LhsScalar => g.iter().map(|&gv| gv * da[0]).collect(),
                        Bcast::RhsScalar => vec![g.iter().zip(da).map(|(&gv, &x)| gv * x).sum()],
                    };
                    accumulate(adj, b, c);
                }
            }
            &Op::AddRow(x, bias) => {
                if self.wants(x) {
                    accumulate(adj, x, g.to_vec());
                }
                if self.wants(bias) {
                    let n = self.value(bias).numel();
                    let mut c = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        add_into(&mut c, row);
                    }
                    accumulate(adj, bias, c);
                }
            }
            &Op::Scale(x, c) => accumulate(adj, x, g.iter().map(|&v| v * c).collect()),
            &Op::AddScalar(x) => accumulate(adj, x, g.to_vec()),
            &Op::Relu(x) => {
                let src = self.value(x).data();
                let c = g
                    .iter()
                    .zip(src)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(adj, x, c);
            }
            &Op::Sigmoid(x) => {
                let c = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                accumulate(adj, x, c);
            }
            &Op::Exp(x) => accumulate(adj, x, g.iter().zip(out).map(|(&gv, &e)| gv * e).collect()),
            &Op::Log(x) => {
                let src = self.value(x).data();
                accumulate(adj, x, g.iter().zip(src).map(|(&gv, &v)| gv / v).collect());
            }
            &Op::Abs(x) => {
                let src = self.value(x).data();
                let c = g
                    .iter()
                    .zip(src)
                    .map(|(&gv, &v)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(adj, x, c);
            }
            &Op::ClampMax(x, cap) => {
                let src = self.value(x).data();
                let c = g
                    .iter()
                    .zip(src)
                    .map(|(&gv, &v)| if v < cap { gv } else { T::zero() })
                    .collect();
                accumulate(adj, x, c);
            }
            &Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                let mut c = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot = (0..len).map(|l| g[at(l)] * out[at(l)]).sum::<T>();
                        for l in 0..len {
                            c[at(l)] = out[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                accumulate(adj, x, c);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let nf = T::from_usize(n).unwrap();
                if self.wants(*x) {
                    let mut c = vec![T::zero(); g.len()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let sum_dh = dh.iter().copied().sum::<T>();
                        let sum_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..n {
                            c[r * n + j] = inv / nf * (nf * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    accumulate(adj, *x, c);
                }
                if self.wants(*gain) {
                    let mut c = vec![T::zero(); n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            c[j] = c[j] + gr[j] * hr[j];
                        }
                    }
                    accumulate(adj, *gain, c);
                }
                if self.wants(*bias) {
                    let mut c = vec![T::zero(); n];
                    for gr in g.chunks(n) {
                        add_into(&mut c, gr);
                    }
                    accumulate(adj, *bias, c);
                }
            }
            Op::L2Normalize {
                x,
                axis,
                norms,
                eps,
            } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut c = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let norm = norms[o * inner + i];
                        if norm > *eps {
                            let dot = (0..len).map(|l| g[at(l)] * out[at(l)]).sum::<T>();
                            for l in 0..len {
                                c[at(l)] = (g[at(l)] - out[at(l)] * dot) / norm;
                            }
                        } else {
                            for l in 0..len {
                                c[at(l)] = g[at(l)] / *eps;
                            }
                        }
                    }
                }
                accumulate(adj, *x, c);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = probs.len() / targets.len();
                let mut c = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    c[r * k + t] = c[r * k + t] - T::one();
                    for v in &mut c[r * k..(r + 1) * k] {
                        *v = *v * g[r];
                    }
                }
                accumulate(adj, *logits, c);
            }
            &Op::Sum(x) => accumulate(adj, x, vec![g[0]; self.value(x).numel()]),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                accumulate(adj, x, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::Concat(inputs, axis) => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut pieces: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|&v| Vec::with_capacity(self.value(v).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (piece, &v) in pieces.iter_mut().zip(inputs) {
                        let block = self.shape(v)[*axis] * inner;
                        piece.extend_from_slice(&g[offset..offset + block]);
                        offset += block;
                    }
                }
                for (piece, &v) in pieces.into_iter().zip(inputs) {
                    if self.wants(v) {
                        accumulate(adj, v, piece);
                    }
                }
            }
            &Op::Slice { x, axis, start } => {
                let src_shape = self.shape(x);
                let (outer, len, inner) = axis_split(src_shape, axis);
                let width = node.value.shape()[axis];
                let mut c = vec![T::zero(); self.value(x).numel()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    c[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                accumulate(adj, x, c);
            }
            Op::GatherRows(x, rows) => {
                let n = self.shape(*x)[1];
                let mut c = vec![T::zero(); self.value(*x).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut c[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                }
                accumulate(adj, *x, c);
            }
            Op::GatherMean(x, rows) => {
                let n = self.shape(*x)[1];
                let count = T::from_usize(rows.len()).unwrap();
                let share: Vec<T> = g.iter().map(|&v| v / count).collect();
                let mut c = vec![T::zero(); self.value(*x).numel()];
                for &r in rows {
                    add_into(&mut c[r * n..(r + 1) * n], &share);
                }
                accumulate(adj, *x, c);
            }
            &Op::Reshape(x) => accumulate(adj, x, g.to_vec()),
            Op::Attention {
                q,
                k,
                v,
                bias,
                dims,
                probs,
            } => {
                let want_bias = bias.is_some_and(|b| self.wants(b));
                let grads = attn::backward(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    *dims,
                    want_bias,
                );
                for (var, c) in [(*q, grads.q), (*k, grads.k), (*v, grads.v)] {
                    if self.wants(var) {
                        accumulate(adj, var, c);
                    }
                }
                if let (Some(b), true) = (*bias, want_bias) {
                    accumulate(adj, b, grads.bias);
                }
            }
        }
    }
}
