//! Centre-distance detection metrics: per-class AP over four distance
//! thresholds, true-positive errors at 2 m, and the composite NDS.

mod ledger;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::io::{self, PredictionSet, ScenePredictions, SceneSet, Validate};
use crate::scene::{GtScene, ObjectClass, SceneError};

pub use ledger::{
    average_precision, center_distance, greedy_match, pair_errors, scale_error, yaw_error,
    yaw_period, MatchLedger, MatchRecord, PairErrors, TpMetric, FIRST_RECALL_STEP, MIN_PRECISION,
    RECALL_STEPS,
};

pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;
/// Error assigned to a class without true positives.
pub const WORST_TP_ERROR: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(
        "scene ids differ: missing from predictions {missing:?}, unknown to ground truth {extra:?}"
    )]
    SceneMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
}

/// Mean true-positive errors of one class; `None` where the error does not
/// apply to the class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTpErrors {
    pub trans_err: Option<f64>,
    pub scale_err: Option<f64>,
    pub orient_err: Option<f64>,
    pub vel_err: Option<f64>,
    pub attr_err: Option<f64>,
}

impl ClassTpErrors {
    pub fn get(&self, m: TpMetric) -> Option<f64> {
        match m {
            TpMetric::Trans => self.trans_err,
            TpMetric::Scale => self.scale_err,
            TpMetric::Orient => self.orient_err,
            TpMetric::Vel => self.vel_err,
            TpMetric::Attr => self.attr_err,
        }
    }

    fn set(&mut self, m: TpMetric, v: Option<f64>) {
        let slot = match m {
            TpMetric::Trans => &mut self.trans_err,
            TpMetric::Scale => &mut self.scale_err,
            TpMetric::Orient => &mut self.orient_err,
            TpMetric::Vel => &mut self.vel_err,
            TpMetric::Attr => &mut self.attr_err,
        };
        *slot = v;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMetrics {
    /// AP per distance threshold, keyed by the threshold in metres; empty
    /// for a class with neither instances nor predictions.
    pub ap: BTreeMap<String, f64>,
    pub tp_errors: ClassTpErrors,
    pub num_gt: usize,
    pub num_pred: usize,
    /// True positives at [`TP_THRESHOLD`].
    pub num_tp: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub gt: usize,
    pub predictions: usize,
    pub true_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mATE")]
    pub mate: f64,
    #[serde(rename = "mASE")]
    pub mase: f64,
    #[serde(rename = "mAOE")]
    pub maoe: f64,
    #[serde(rename = "mAVE")]
    pub mave: f64,
    #[serde(rename = "mAAE")]
    pub maae: f64,
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(rename = "long_tail_mAP")]
    pub long_tail_map: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub counts: Counts,
}

impl MetricsReport {
    /// The five mean TP errors in ATE, ASE, AOE, AVE, AAE order.
    pub fn tp_errors(&self) -> [f64; 5] {
        [self.mate, self.mase, self.maoe, self.mave, self.maae]
    }

    pub fn class(&self, c: ObjectClass) -> Option<&ClassMetrics> {
        self.per_class.get(c.name())
    }

    /// Mean AP of one class over the distance thresholds.
    pub fn class_ap(&self, c: ObjectClass) -> Option<f64> {
        self.class(c).and_then(|m| mean_over_thresholds(&m.ap))
    }
}

impl Validate for MetricsReport {
    fn validate(&self) -> Result<(), SceneError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SceneError::Invalid {
                    path: name.into(),
                    msg: format!("{v} not in [0, 1]"),
                })
            }
        };
        unit("mAP", self.map)?;
        unit("NDS", self.nds)?;
        unit("long_tail_mAP", self.long_tail_map)?;
        for (name, v) in ["mATE", "mASE", "mAOE", "mAVE", "mAAE"]
            .iter()
            .zip(self.tp_errors())
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SceneError::Invalid {
                    path: (*name).into(),
                    msg: format!("{v} is not a non-negative error"),
                });
            }
        }
        for (class, m) in &self.per_class {
            if ObjectClass::ALL.iter().all(|c| c.name() != class) {
                return Err(SceneError::Invalid {
                    path: format!("per_class.{class}"),
                    msg: "unknown class".into(),
                });
            }
            for (thr, &v) in &m.ap {
                unit(&format!("per_class.{class}.ap.{thr}"), v)?;
            }
        }
        Ok(())
    }
}

/// `[5·mAP + Σ max(1 − e, 0)] / 10` over the five mean TP errors.
pub fn nds(map: f64, tp_errors: [f64; 5]) -> f64 {
    let mut total = 5.0 * map;
    for e in tp_errors {
        total += (1.0 - e).max(0.0);
    }
    total / 10.0
}

fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

fn mean_over_thresholds(ap: &BTreeMap<String, f64>) -> Option<f64> {
    if ap.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for t in DISTANCE_THRESHOLDS {
        sum += ap[&threshold_key(t)];
    }
    Some(sum / DISTANCE_THRESHOLDS.len() as f64)
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Pairs prediction scenes with ground-truth scenes by id, in ground-truth
/// order.
fn align(preds: &PredictionSet, gts: &SceneSet) -> Result<Vec<ScenePredictions>, MetricsError> {
    let by_id: HashMap<&str, &ScenePredictions> = preds
        .scenes
        .iter()
        .map(|s| (s.scene_id.as_str(), s))
        .collect();
    let gt_ids: BTreeSet<&str> = gts.scenes.iter().map(|s| s.scene_id.as_str()).collect();
    let pred_ids: BTreeSet<&str> = by_id.keys().copied().collect();
    if gt_ids != pred_ids {
        return Err(MetricsError::SceneMismatch {
            missing: gt_ids
                .difference(&pred_ids)
                .map(|s| s.to_string())
                .collect(),
            extra: pred_ids
                .difference(&gt_ids)
                .map(|s| s.to_string())
                .collect(),
        });
    }
    Ok(gts
        .scenes
        .iter()
        .map(|g| by_id[g.scene_id.as_str()].clone())
        .collect())
}

fn class_metrics(preds: &[ScenePredictions], gts: &[GtScene], class: ObjectClass) -> ClassMetrics {
    let num_pred = preds
        .iter()
        .map(|s| {
            s.instances
                .iter()
                .filter(|d| d.class_id == class.id())
                .count()
        })
        .sum();
    let mut ap = BTreeMap::new();
    let mut tp_ledger = None;
    let mut num_gt = 0;
    for t in DISTANCE_THRESHOLDS {
        let ledger = greedy_match(preds, gts, t, class);
        num_gt = ledger.n_gt;
        if let Some(v) = average_precision(&ledger) {
            ap.insert(threshold_key(t), v);
        }
        if t == TP_THRESHOLD {
            tp_ledger = Some(ledger);
        }
    }
    let ledger = tp_ledger.expect("the TP threshold is one of the distance thresholds");
    let num_tp = ledger.num_tp();
    let mut tp_errors = ClassTpErrors::default();
    let active = num_gt > 0 || num_pred > 0;
    for m in TpMetric::ALL {
        if !active || !m.applies_to(class) {
            continue;
        }
        let v = mean(
            ledger
                .records
                .iter()
                .filter_map(|r| r.errors.as_ref())
                .map(|e| m.of(e)),
        );
        tp_errors.set(m, Some(v.unwrap_or(WORST_TP_ERROR)));
    }
    ClassMetrics {
        ap,
        tp_errors,
        num_gt,
        num_pred,
        num_tp,
    }
}

/// Scores `preds` against `gts`. Both are validated and must cover the same
/// scene ids.
///
/// mAP averages each class's threshold-mean AP over classes that have
/// instances or predictions; mean TP errors average over the classes to
/// which each error applies. Long-tail mAP restricts the first average to
/// the long-tail classes. Averages over an empty set fall back to 0 (AP)
/// and [`WORST_TP_ERROR`] (errors).
pub fn evaluate(preds: &PredictionSet, gts: &SceneSet) -> Result<MetricsReport, MetricsError> {
    preds.validate()?;
    gts.validate()?;
    let aligned = align(preds, gts)?;
    let per: Vec<(ObjectClass, ClassMetrics)> = ObjectClass::ALL
        .iter()
        .map(|&c| (c, class_metrics(&aligned, &gts.scenes, c)))
        .collect();

    let class_aps: Vec<(ObjectClass, f64)> = per
        .iter()
        .filter_map(|(c, m)| mean_over_thresholds(&m.ap).map(|v| (*c, v)))
        .collect();
    let map = mean(class_aps.iter().map(|p| p.1)).unwrap_or(0.0);
    let long_tail_map =
        mean(class_aps.iter().filter(|p| p.0.is_long_tail()).map(|p| p.1)).unwrap_or(0.0);
    let errs: Vec<f64> = TpMetric::ALL
        .iter()
        .map(|&m| {
            mean(per.iter().filter_map(|(_, cm)| cm.tp_errors.get(m))).unwrap_or(WORST_TP_ERROR)
        })
        .collect();
    let errs = [errs[0], errs[1], errs[2], errs[3], errs[4]];
    let counts = Counts {
        gt: per.iter().map(|p| p.1.num_gt).sum(),
        predictions: per.iter().map(|p| p.1.num_pred).sum(),
        true_positives: per.iter().map(|p| p.1.num_tp).sum(),
    };
    Ok(MetricsReport {
        map,
        mate: errs[0],
        mase: errs[1],
        maoe: errs[2],
        mave: errs[3],
        maae: errs[4],
        nds: nds(map, errs),
        long_tail_map,
        per_class: per
            .into_iter()
            .map(|(c, m)| (c.name().to_string(), m))
            .collect(),
        counts,
    })
}

/// [`evaluate`] on JSON files.
pub fn evaluate_files(
    pred_path: impl AsRef<Path>,
    gt_path: impl AsRef<Path>,
) -> Result<MetricsReport, MetricsError> {
    let preds: PredictionSet = io::load(pred_path)?;
    let gts: SceneSet = io::load(gt_path)?;
    evaluate(&preds, &gts)
}
