//! Greedy centre-distance matching and the per-pair true-positive errors.

use std::cmp::Ordering;
use std::f64::consts::PI;

use crate::scene::io::{Detection, ScenePredictions};
use crate::scene::{GtInstance, GtScene, ObjectClass};

/// Errors of one true-positive pair. Which of them count towards a class's
/// means is decided by [`TpMetric::applies_to`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairErrors {
    pub trans: f64,
    pub scale: f64,
    pub orient: f64,
    pub vel: f64,
    pub attr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TpMetric {
    Trans,
    Scale,
    Orient,
    Vel,
    Attr,
}

impl TpMetric {
    pub const ALL: [TpMetric; 5] = [
        TpMetric::Trans,
        TpMetric::Scale,
        TpMetric::Orient,
        TpMetric::Vel,
        TpMetric::Attr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TpMetric::Trans => "trans_err",
            TpMetric::Scale => "scale_err",
            TpMetric::Orient => "orient_err",
            TpMetric::Vel => "vel_err",
            TpMetric::Attr => "attr_err",
        }
    }

    /// Cones have no orientation; barriers and cones have no velocity or
    /// attribute.
    pub fn applies_to(self, class: ObjectClass) -> bool {
        match self {
            TpMetric::Trans | TpMetric::Scale => true,
            TpMetric::Orient => class != ObjectClass::TrafficCone,
            TpMetric::Vel | TpMetric::Attr => !class.is_static(),
        }
    }

    pub fn of(self, e: &PairErrors) -> f64 {
        match self {
            TpMetric::Trans => e.trans,
            TpMetric::Scale => e.scale,
            TpMetric::Orient => e.orient,
            TpMetric::Vel => e.vel,
            TpMetric::Attr => e.attr,
        }
    }
}

/// Ground-plane distance between two centres.
pub fn center_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// `1 − IoU` of two boxes sharing centre and heading.
pub fn scale_error(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]) * a[2].min(b[2]);
    let union = a[0] * a[1] * a[2] + b[0] * b[1] * b[2] - inter;
    1.0 - inter / union
}

/// Smallest absolute difference between two headings modulo `period`.
pub fn yaw_error(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).abs() % period;
    d.min(period - d)
}

/// Heading symmetry period: barriers look the same turned half way round.
pub fn yaw_period(class: ObjectClass) -> f64 {
    if class == ObjectClass::Barrier {
        PI
    } else {
        2.0 * PI
    }
}

pub fn pair_errors(pred: &Detection, gt: &GtInstance) -> PairErrors {
    let dvx = pred.velocity[0] - gt.velocity[0];
    let dvy = pred.velocity[1] - gt.velocity[1];
    PairErrors {
        trans: center_distance(&pred.center, &gt.center),
        scale: scale_error(&pred.size, &gt.size),
        orient: yaw_error(pred.yaw, gt.yaw, yaw_period(gt.class())),
        vel: (dvx * dvx + dvy * dvy).sqrt(),
        attr: if pred.attribute_id == gt.attribute_id {
            0.0
        } else {
            1.0
        },
    }
}

/// One prediction's outcome at one threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchRecord {
    pub scene: usize,
    pub pred: usize,
    pub score: f64,
    /// Index of the claimed instance within its scene.
    pub gt: Option<usize>,
    pub errors: Option<PairErrors>,
}

impl MatchRecord {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

/// Matching outcome for one class at one distance threshold, in descending
/// score order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchLedger {
    pub class: ObjectClass,
    pub threshold: f64,
    pub n_gt: usize,
    pub records: Vec<MatchRecord>,
}

impl MatchLedger {
    pub fn num_tp(&self) -> usize {
        self.records.iter().filter(|r| r.is_tp()).count()
    }
}

/// Greedy matching over aligned scene lists (`preds[s]` belongs to
/// `gts[s]`). Predictions of `class` are visited by descending score, ties
/// in input order; each claims the nearest unclaimed instance of the same
/// class and scene whose centre lies strictly closer than `threshold`.
/// Distance ties go to the earlier instance.
pub fn greedy_match(
    preds: &[ScenePredictions],
    gts: &[GtScene],
    threshold: f64,
    class: ObjectClass,
) -> MatchLedger {
    assert_eq!(preds.len(), gts.len(), "scene lists must be aligned");
    let cid = class.id();
    let mut order: Vec<(usize, usize, f64)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, sp)| {
            sp.instances
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == cid)
                .map(move |(i, d)| (s, i, d.score))
        })
        .collect();
    order.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal));

    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.instances.len()]).collect();
    let n_gt = gts
        .iter()
        .map(|g| g.instances.iter().filter(|i| i.class_id == cid).count())
        .sum();
    let records = order
        .into_iter()
        .map(|(s, i, score)| {
            let det = &preds[s].instances[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts[s].instances.iter().enumerate() {
                if gt.class_id != cid || claimed[s][j] {
                    continue;
                }
                let d = center_distance(&det.center, &gt.center);
                if d < threshold && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            if let Some((j, _)) = best {
                claimed[s][j] = true;
            }
            MatchRecord {
                scene: s,
                pred: i,
                score,
                gt: best.map(|b| b.0),
                errors: best.map(|(j, _)| pair_errors(det, &gts[s].instances[j])),
            }
        })
        .collect();
    MatchLedger {
        class,
        threshold,
        n_gt,
        records,
    }
}

pub const RECALL_STEPS: usize = 100;
/// First recall grid index kept (recall 0.10).
pub const FIRST_RECALL_STEP: usize = 10;
pub const MIN_PRECISION: f64 = 0.1;

/// Average precision over the recall grid `{0.10, 0.11, …, 1.00}`.
///
/// Precision at grid recall `r` is the best precision reached at any
/// operating point with recall ≥ `r` (zero if none). Each value is reduced
/// by [`MIN_PRECISION`], rescaled by `1 / (1 − MIN_PRECISION)`, clamped at
/// zero and averaged, so a perfect ranking scores exactly 1. `None` for a class with neither instances nor
/// predictions; zero when only one side is empty.
pub fn average_precision(ledger: &MatchLedger) -> Option<f64> {
    let n = ledger.n_gt;
    if n == 0 {
        return if ledger.records.is_empty() {
            None
        } else {
            Some(0.0)
        };
    }
    // (true positives, precision) after each prediction
    let mut points = Vec::with_capacity(ledger.records.len());
    let mut tp = 0usize;
    for (k, r) in ledger.records.iter().enumerate() {
        if r.is_tp() {
            tp += 1;
        }
        points.push((tp, tp as f64 / (k + 1) as f64));
    }
    // envelope from the right
    let mut best = 0.0f64;
    let mut envelope = vec![0.0; points.len()];
    for k in (0..points.len()).rev() {
        best = best.max(points[k].1);
        envelope[k] = best;
    }
    let mut sum = 0.0;
    let mut k = 0;
    for step in FIRST_RECALL_STEP..=RECALL_STEPS {
        // first operating point with tp / n >= step / 100
        while k < points.len() && points[k].0 * RECALL_STEPS < step * n {
            k += 1;
        }
        let p = if k < points.len() { envelope[k] } else { 0.0 };
        sum += ((p - MIN_PRECISION) / (1.0 - MIN_PRECISION)).max(0.0);
    }
    Some(sum / (RECALL_STEPS - FIRST_RECALL_STEP + 1) as f64)
}
