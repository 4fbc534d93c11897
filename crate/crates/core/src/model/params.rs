use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Graph, Tensor, Var};
use crate::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered parameter tensors. Order is the checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn snap_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = <T as Scalar>::from_f32(v.as_f32());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Graph variables for one [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps variables already registered on a graph, in store order.
    pub fn new(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Draws from N(0, σ²) truncated to ±2σ.
pub(crate) fn trunc_normal<T: Scalar>(
    rng: &mut impl Rng,
    shape: &[usize],
    sigma: f64,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::lit(z * sigma);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub fn glorot_sigma(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Appends named tensors with the standard initialisation.
pub(crate) struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = trunc_normal(self.rng, shape, self.sigma);
        self.store.push(name, t)
    }

    /// Weight drawn with the Glorot scale `σ = √(2 / (fan_in + fan_out))`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let sigma = glorot_sigma(fan_in, fan_out);
        let w = trunc_normal(self.rng, &[fan_in, fan_out], sigma);
        Linear {
            w: self.store.push(format!("{name}.w"), w),
            b: self
                .store
                .push(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gain: self
                .store
                .push(format!("{name}.gain"), Tensor::full(&[width], T::one())),
            bias: self
                .store
                .push(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn attention(&mut self, name: &str, width: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), width, width),
            k: self.linear(&format!("{name}.k"), width, width),
            v: self.linear(&format!("{name}.v"), width, width),
            o: self.linear(&format!("{name}.o"), width, width),
        }
    }
}
