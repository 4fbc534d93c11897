//! Set-prediction matching and the detection loss.
//!
//! Learned queries are paired one-to-one with ground-truth instances by a
//! minimum-cost assignment over [`match_cost`]; [`perception_loss`] then
//! supervises matched queries with class, box and attribute targets and
//! pushes the rest toward the no-object class.

mod hungarian;

use serde::{Deserialize, Serialize};

use crate::model::{box_targets, encode_box, HeadOutput, Predictions, BOX_DIM};
use crate::scene::{GtInstance, SceneGeometry, NUM_CLASSES};
use crate::tensor::{Graph, Result, Tensor, Var};
use crate::Scalar;

/// Box components entering the matching cost: position, size and heading.
/// Velocity is supervised but not matched on.
pub const MATCH_BOX_DIMS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub box_l1: f64,
    pub no_object: f64,
    pub attr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            box_l1: 5.0,
            no_object: 0.1,
            attr: 1.0,
        }
    }
}

/// `queries × instances` matching costs with their two components.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub costs: Vec<f64>,
    pub class_cost: Vec<f64>,
    pub box_cost: Vec<f64>,
}

impl CostMatrix {
    pub fn from_costs(rows: usize, cols: usize, costs: Vec<f64>) -> Self {
        assert_eq!(costs.len(), rows * cols, "cost matrix shape");
        Self {
            rows,
            cols,
            class_cost: vec![0.0; costs.len()],
            box_cost: vec![0.0; costs.len()],
            costs,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.cols + col]
    }
}

/// `(query, instance)` pairs sorted by query.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Self {
            pairs: (0..n).map(|i| (i, i)).collect(),
        }
    }

    /// Sum of assigned costs in query order.
    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        hungarian::total(&costs.costs, costs.cols, &self.pairs)
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// `w_cls · (−p_q[class_i]) + w_box · L1(box_q, target_i)` over the first
/// [`MATCH_BOX_DIMS`] regression components.
pub fn match_cost<T: Scalar>(
    preds: &Predictions<T>,
    instances: &[GtInstance],
    geometry: &SceneGeometry,
    weights: &LossWeights,
) -> CostMatrix {
    let rows = preds.logits.shape()[0];
    let cols = instances.len();
    let targets: Vec<[f64; BOX_DIM]> = instances.iter().map(|i| encode_box(i, geometry)).collect();
    let mut m = CostMatrix::from_costs(rows, cols, vec![0.0; rows * cols]);
    for q in 0..rows {
        let logits: Vec<f64> = preds.logits.row(q).iter().map(|v| v.as_f64()).collect();
        let probs = softmax_row(&logits);
        let pred_box: Vec<f64> = preds.boxes.row(q).iter().map(|v| v.as_f64()).collect();
        for (i, (inst, target)) in instances.iter().zip(&targets).enumerate() {
            let cls = -weights.cls * probs[inst.class_id];
            let l1: f64 = pred_box[..MATCH_BOX_DIMS]
                .iter()
                .zip(&target[..MATCH_BOX_DIMS])
                .map(|(a, b)| (a - b).abs())
                .sum();
            let bx = weights.box_l1 * l1;
            let k = q * cols + i;
            m.class_cost[k] = cls;
            m.box_cost[k] = bx;
            m.costs[k] = cls + bx;
        }
    }
    m
}

/// Minimum-cost assignment of `min(rows, cols)` pairs; among equal-cost
/// optima, the lexicographically smallest pair list.
pub fn hungarian(costs: &CostMatrix) -> Assignment {
    assert!(
        costs.costs.iter().all(|c| c.is_finite()),
        "costs must be finite"
    );
    Assignment {
        pairs: hungarian::solve_canonical(&costs.costs, costs.rows, costs.cols),
    }
}

/// Set-prediction loss for one scene, normalised by `max(N, 1)`:
/// class CE on matched queries, `no_object`-weighted no-object CE on the
/// rest, `box_l1`-weighted L1 over all ten box components and
/// `attr`-weighted attribute CE on matched queries.
pub fn perception_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &HeadOutput,
    assignment: &Assignment,
    instances: &[GtInstance],
    geometry: &SceneGeometry,
    weights: &LossWeights,
) -> Result<Var> {
    let rows = g.shape(out.logits)[0];
    let mut targets = vec![NUM_CLASSES; rows];
    let mut row_weight = vec![T::lit(weights.no_object); rows];
    for &(q, i) in &assignment.pairs {
        targets[q] = instances[i].class_id;
        row_weight[q] = T::lit(weights.cls);
    }
    let ce = g.cross_entropy(out.logits, &targets)?;
    let w = g.constant(Tensor::new(vec![rows], row_weight)?);
    let weighted = g.mul(ce, w)?;
    let mut total = g.sum(weighted);

    if !assignment.pairs.is_empty() {
        let qrows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let matched: Vec<GtInstance> = assignment
            .pairs
            .iter()
            .map(|p| instances[p.1].clone())
            .collect();
        let target = g.constant(box_targets::<T>(&matched, geometry).expect("non-empty"));
        let pred = g.gather_rows(out.boxes, &qrows)?;
        let diff = g.sub(pred, target)?;
        let abs = g.abs(diff);
        let l1 = g.sum(abs);
        let l1 = g.scale(l1, T::lit(weights.box_l1));
        total = g.add(total, l1)?;

        if weights.attr != 0.0 {
            let attr_targets: Vec<usize> = matched.iter().map(|i| i.attribute_id).collect();
            let attr = g.gather_rows(out.attr_logits, &qrows)?;
            let ace = g.cross_entropy(attr, &attr_targets)?;
            let ace = g.sum(ace);
            let ace = g.scale(ace, T::lit(weights.attr));
            total = g.add(total, ace)?;
        }
    }
    Ok(g.scale(total, T::lit(1.0 / instances.len().max(1) as f64)))
}
