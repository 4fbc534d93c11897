use gtbev::metrics::{self, MetricsReport};
use gtbev::model::checkpoint::Checkpoint;
use gtbev::model::{detections, Detector};
use gtbev::scene::io::{Detection, PredictionSet, ScenePredictions};
use gtbev::scene::{mask_view, ViewFeatures};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::train::Real;
use crate::HarnessError;

/// Which camera views are withheld at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskPolicy {
    None,
    /// One view per scene, drawn uniformly from a stream seeded by `seed`.
    RandomOneView {
        seed: u64,
    },
}

impl MaskPolicy {
    /// Masked view of every scene, in scene order.
    pub fn masked_views(&self, scenes: usize, views: usize) -> Vec<Option<usize>> {
        match *self {
            MaskPolicy::None => vec![None; scenes],
            MaskPolicy::RandomOneView { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..scenes).map(|_| Some(rng.gen_range(0..views))).collect()
            }
        }
    }
}

/// Detections of one scene from the detector alone.
pub fn predict_scene(
    det: &Detector<Real>,
    views: &ViewFeatures,
) -> Result<Vec<Detection>, HarnessError> {
    let p = det.predict(views)?;
    Ok(detections(
        &p.logits,
        &p.attr_logits,
        &p.boxes,
        &det.config.geometry,
    ))
}

pub fn predictions(
    det: &Detector<Real>,
    data: &Dataset,
    policy: MaskPolicy,
) -> Result<PredictionSet, HarnessError> {
    let masked = policy.masked_views(data.len(), det.config.rig.views);
    let scenes = data
        .scenes
        .par_iter()
        .zip(&data.views)
        .zip(masked)
        .map(|((scene, views), m)| {
            let instances = match m {
                None => predict_scene(det, views)?,
                Some(k) => predict_scene(det, &mask_view(views, k)?)?,
            };
            Ok(ScenePredictions {
                scene_id: scene.scene_id.clone(),
                instances,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(PredictionSet { scenes })
}

pub fn evaluate_detector(
    det: &Detector<Real>,
    data: &Dataset,
    policy: MaskPolicy,
) -> Result<MetricsReport, HarnessError> {
    let preds = predictions(det, data, policy)?;
    Ok(metrics::evaluate(&preds, &data.scene_set())?)
}

/// Detector of `config`'s model shape with weights from `ckpt`; tensors
/// the detector does not own (the GT encoder) are ignored.
pub fn load_detector(
    ckpt: &Checkpoint,
    config: &ExperimentConfig,
) -> Result<Detector<Real>, HarnessError> {
    let mut det =
        Detector::<Real>::new(config.model.clone(), 0).map_err(HarnessError::Validation)?;
    ckpt.restore(&mut det.params, "")
        .map_err(|e| HarnessError::checkpoint("<checkpoint>", e))?;
    Ok(det)
}

/// Pure inference of the checkpoint's detector on `data`. The guidance
/// switches of `config` play no part.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    config: &ExperimentConfig,
    data: &Dataset,
    policy: MaskPolicy,
) -> Result<MetricsReport, HarnessError> {
    evaluate_detector(&load_detector(ckpt, config)?, data, policy)
}
