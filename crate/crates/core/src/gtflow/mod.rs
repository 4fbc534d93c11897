//! Training-only ground-truth flow.
//!
//! Ground-truth instances are embedded by a small MLP ([`GtFlowParams::encode`])
//! into the BEV channel width. Two auxiliary losses use those embeddings:
//!
//! * [`contrastive_loss`] aligns each embedding with the BEV features pooled
//!   over its instance's footprint ([`crop_pool`]);
//! * [`gt_query_decode`] runs the embeddings through the detector's decoder
//!   and head as a separate query set, supervised row by row by
//!   [`gtqi_loss`].
//!
//! All tensors here live in their own [`ParamStore`], so a detector trained
//! with or without this module has the same inference parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::matching::{perception_loss, Assignment, LossWeights};
use crate::model::{Bound, Builder, Detector, HeadOutput, Linear, ParamId, ParamStore, INIT_SIGMA};
use crate::scene::{GtInstance, SceneGeometry, NUM_CLASSES};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};
use crate::Scalar;

pub const GT_ENCODER_HIDDEN: usize = 64;
/// One-hot class plus ten box descriptors.
pub const GT_INPUT_DIM: usize = NUM_CLASSES + 10;
/// Initial value of the free logit-scale parameter; `exp` of it is ≈ 14.29.
pub const LOGIT_SCALE_INIT: f64 = 2.659;
pub const LOGIT_SCALE_MAX: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtFlowLayout {
    pub fc1: Linear,
    pub fc2: Linear,
    pub logit_scale: ParamId,
}

/// GT encoder and contrastive temperature, kept apart from the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct GtFlowParams<T> {
    pub channels: usize,
    pub layout: GtFlowLayout,
    pub params: ParamStore<T>,
}

/// Encoder input for one instance: one-hot class, normalised centre, scaled
/// size, heading as sine/cosine and scaled velocity.
pub fn gt_input(inst: &GtInstance, geometry: &SceneGeometry) -> [f64; GT_INPUT_DIM] {
    let mut x = [0.0; GT_INPUT_DIM];
    x[inst.class_id] = 1.0;
    let span = 2.0 * geometry.range;
    let tail = [
        (inst.center[0] + geometry.range) / span,
        (inst.center[1] + geometry.range) / span,
        inst.center[2] / 5.0,
        inst.size[0] / 10.0,
        inst.size[1] / 10.0,
        inst.size[2] / 10.0,
        inst.yaw.sin(),
        inst.yaw.cos(),
        inst.velocity[0] / 15.0,
        inst.velocity[1] / 15.0,
    ];
    x[NUM_CLASSES..].copy_from_slice(&tail);
    x
}

impl<T: Scalar> GtFlowParams<T> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            sigma: INIT_SIGMA,
        };
        let fc1 = b.linear("gt_enc.fc1", GT_INPUT_DIM, GT_ENCODER_HIDDEN);
        let fc2 = b.linear("gt_enc.fc2", GT_ENCODER_HIDDEN, channels);
        let logit_scale = store.push(
            "gt_enc.logit_scale",
            Tensor::scalar(T::lit(LOGIT_SCALE_INIT)),
        );
        Self {
            channels,
            layout: GtFlowLayout {
                fc1,
                fc2,
                logit_scale,
            },
            params: store,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Embeddings `[N, C]` for `instances`, which must be non-empty and
    /// inside the perception range.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        instances: &[GtInstance],
        geometry: &SceneGeometry,
    ) -> Result<Var> {
        if instances.is_empty() {
            return Err(TensorError::invalid("gt_encode", "no instances"));
        }
        if let Some(i) = instances
            .iter()
            .position(|i| !geometry.contains(i.center[0], i.center[1]))
        {
            return Err(TensorError::invalid(
                "gt_encode",
                format!("instance {i} lies outside the perception range"),
            ));
        }
        let data: Vec<T> = instances
            .iter()
            .flat_map(|i| gt_input(i, geometry).map(T::lit))
            .collect();
        let x = g.constant(Tensor::new(vec![instances.len(), GT_INPUT_DIM], data)?);
        let l = self.layout;
        let h = g.matmul(x, p.var(l.fc1.w))?;
        let h = g.add_row(h, p.var(l.fc1.b))?;
        let h = g.relu(h);
        let y = g.matmul(h, p.var(l.fc2.w))?;
        g.add_row(y, p.var(l.fc2.b))
    }

    /// `min(exp(s), 100)` as a scalar variable.
    pub fn logit_scale(&self, g: &mut Graph<T>, p: &Bound) -> Var {
        let e = g.exp(p.var(self.layout.logit_scale));
        g.clamp_max(e, T::lit(LOGIT_SCALE_MAX))
    }
}

/// Row-major indices of the BEV cells whose centres lie inside the
/// axis-aligned hull of the instance's rotated ground footprint; the cell
/// containing the centre when no centre falls inside.
pub fn footprint_cells(inst: &GtInstance, geometry: &SceneGeometry) -> Vec<usize> {
    let (c, s) = (inst.yaw.cos().abs(), inst.yaw.sin().abs());
    let (half_w, half_l) = (inst.size[0] / 2.0, inst.size[1] / 2.0);
    let ex = half_l * c + half_w * s;
    let ey = half_l * s + half_w * c;
    let [cx, cy, _] = inst.center;
    let mut cells = Vec::new();
    for row in 0..geometry.bev_h {
        for col in 0..geometry.bev_w {
            let (x, y) = geometry.cell_center(row, col);
            if (x - cx).abs() <= ex && (y - cy).abs() <= ey {
                cells.push(row * geometry.bev_w + col);
            }
        }
    }
    if cells.is_empty() {
        cells.push(geometry.cell_of(cx, cy));
    }
    cells
}

/// Channel-wise mean of `bev: [cells, C]` over the instance footprint, as
/// `[1, C]`.
pub fn crop_pool<T: Scalar>(
    g: &mut Graph<T>,
    bev: Var,
    inst: &GtInstance,
    geometry: &SceneGeometry,
) -> Result<Var> {
    g.gather_mean(bev, &footprint_cells(inst, geometry))
}

/// Pooled object features `[N, C]` for every instance, or `None` if there
/// are none.
pub fn object_features<T: Scalar>(
    g: &mut Graph<T>,
    bev: Var,
    instances: &[GtInstance],
    geometry: &SceneGeometry,
) -> Result<Option<Var>> {
    if instances.is_empty() {
        return Ok(None);
    }
    let rows = instances
        .iter()
        .map(|i| crop_pool(g, bev, i, geometry))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&rows, 0).map(Some)
}

/// Symmetric cross-entropy between row-normalised `alpha` and `beta`
/// (`[N, C]` each) with similarity logits `scale · α̂ β̂ᵀ` and the identity
/// as target. Zero when `N = 0`.
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    alpha: Var,
    beta: Var,
    scale: Var,
) -> Result<Var> {
    let n = g.shape(alpha)[0];
    if g.shape(alpha) != g.shape(beta) {
        return Err(TensorError::ShapeMismatch {
            op: "contrastive_loss",
            lhs: g.shape(alpha).to_vec(),
            rhs: g.shape(beta).to_vec(),
        });
    }
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let a = g.l2_normalize(alpha, 1)?;
    let b = g.l2_normalize(beta, 1)?;
    let bt = g.transpose(b)?;
    let sim = g.matmul(a, bt)?;
    let logits = g.mul(sim, scale)?;
    let targets: Vec<usize> = (0..n).collect();
    let rows = g.cross_entropy(logits, &targets)?;
    let rows = g.mean(rows);
    let lt = g.transpose(logits)?;
    let cols = g.cross_entropy(lt, &targets)?;
    let cols = g.mean(cols);
    let total = g.add(rows, cols)?;
    Ok(g.scale(total, T::lit(0.5)))
}

/// Decodes the GT embeddings `beta: [N, C]` as their own query set against
/// `bev` and applies the shared head. Learned queries are not involved.
pub fn gt_query_decode<T: Scalar>(
    det: &Detector<T>,
    g: &mut Graph<T>,
    p: &Bound,
    bev: Var,
    beta: Var,
) -> Result<HeadOutput> {
    let q = det.decode(g, p, bev, beta)?;
    det.head(g, p, bev, q)
}

/// Perception loss with row `i` of `out` supervised by instance `i`.
pub fn gtqi_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &HeadOutput,
    instances: &[GtInstance],
    geometry: &SceneGeometry,
    weights: &LossWeights,
) -> Result<Var> {
    let rows = g.shape(out.logits)[0];
    if rows != instances.len() {
        return Err(TensorError::invalid(
            "gtqi_loss",
            format!("{rows} prediction rows for {} instances", instances.len()),
        ));
    }
    perception_loss(
        g,
        out,
        &Assignment::identity(rows),
        instances,
        geometry,
        weights,
    )
}
