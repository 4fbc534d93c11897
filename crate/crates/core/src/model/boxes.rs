//! Regression-space box coding.
//!
//! A box row is `(x̂, ŷ, z, ln w, ln l, ln h, sin yaw, cos yaw, vx/s, vy/s)`
//! where `(x̂, ŷ)` map the perception square onto `[0, 1]²` and `s` is
//! [`VELOCITY_SCALE`].

use crate::scene::io::Detection;
use crate::scene::{wrap_angle, GtInstance, SceneGeometry, MAX_SPEED, NUM_CLASSES};
use crate::tensor::Tensor;
use crate::Scalar;

pub const BOX_DIM: usize = 10;

/// Velocity components are regressed in units of this many m/s.
pub const VELOCITY_SCALE: f64 = MAX_SPEED;

pub fn encode_box(inst: &GtInstance, geometry: &SceneGeometry) -> [f64; BOX_DIM] {
    let span = 2.0 * geometry.range;
    [
        (inst.center[0] + geometry.range) / span,
        (inst.center[1] + geometry.range) / span,
        inst.center[2],
        inst.size[0].ln(),
        inst.size[1].ln(),
        inst.size[2].ln(),
        inst.yaw.sin(),
        inst.yaw.cos(),
        inst.velocity[0] / VELOCITY_SCALE,
        inst.velocity[1] / VELOCITY_SCALE,
    ]
}

/// Inverse of [`encode_box`]; yaw is recovered from the (possibly
/// unnormalised) sine/cosine pair.
pub fn decode_box(row: &[f64], geometry: &SceneGeometry) -> ([f64; 3], [f64; 3], f64, [f64; 2]) {
    let span = 2.0 * geometry.range;
    let center = [
        row[0] * span - geometry.range,
        row[1] * span - geometry.range,
        row[2],
    ];
    let size = [row[3].exp(), row[4].exp(), row[5].exp()];
    let yaw = wrap_angle(row[6].atan2(row[7]));
    let velocity = [row[8] * VELOCITY_SCALE, row[9] * VELOCITY_SCALE];
    (center, size, yaw, velocity)
}

/// Stacks encoded boxes of `instances` into an `[n, 10]` tensor.
pub fn box_targets<T: Scalar>(
    instances: &[GtInstance],
    geometry: &SceneGeometry,
) -> Option<Tensor<T>> {
    if instances.is_empty() {
        return None;
    }
    let data: Vec<f64> = instances
        .iter()
        .flat_map(|i| encode_box(i, geometry))
        .collect();
    Some(Tensor::from_f64(&[instances.len(), BOX_DIM], &data).expect("row width is fixed"))
}

/// Detections from raw head outputs: rows whose no-object probability is
/// below one half, scored by their best foreground probability.
pub fn detections<T: Scalar>(
    logits: &Tensor<T>,
    attr_logits: &Tensor<T>,
    boxes: &Tensor<T>,
    geometry: &SceneGeometry,
) -> Vec<Detection> {
    let rows = logits.shape()[0];
    let mut out = Vec::new();
    for r in 0..rows {
        let l: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        if e[NUM_CLASSES] / total >= 0.5 {
            continue;
        }
        let (class_id, best) =
            e[..NUM_CLASSES]
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                );
        let attr = attr_logits.row(r);
        let attribute_id = usize::from(attr[1] > attr[0]);
        let row: Vec<f64> = boxes.row(r).iter().map(|v| v.as_f64()).collect();
        let (center, size, yaw, velocity) = decode_box(&row, geometry);
        out.push(Detection {
            class_id,
            center,
            size,
            yaw,
            velocity,
            attribute_id,
            score: (best / total).clamp(0.0, 1.0),
        });
    }
    out
}
