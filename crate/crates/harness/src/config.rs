use std::path::Path;

use gtbev::matching::LossWeights;
use gtbev::model::ModelConfig;
use gtbev::scene::{CameraRig, ClassProfile, SceneGeometry};
use gtbev::tensor::AdamW;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Which ground-truth-flow losses join the baseline loss during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtFlowSwitches {
    pub gt_bev: bool,
    pub gt_qi: bool,
}

impl GtFlowSwitches {
    pub const BASELINE: Self = Self {
        gt_bev: false,
        gt_qi: false,
    };
    pub const BEV: Self = Self {
        gt_bev: true,
        gt_qi: false,
    };
    pub const BEV_AND_DEC: Self = Self {
        gt_bev: true,
        gt_qi: true,
    };

    pub fn any(self) -> bool {
        self.gt_bev || self.gt_qi
    }

    /// Ablation label: `none`, `BEV` or `BEV&Dec`.
    pub fn label(self) -> &'static str {
        match (self.gt_bev, self.gt_qi) {
            (false, false) => "none",
            (true, false) => "BEV",
            (true, true) => "BEV&Dec",
            (false, true) => "Dec",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Seed of the scene generator; fixed across training seeds.
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub profile: ClassProfile,
    /// Standard deviation of the additive feature noise.
    pub noise_sigma: f64,
    /// Seed of the per-class feature signatures.
    pub signature_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            train_scenes: 3000,
            eval_scenes: 300,
            profile: ClassProfile::nuscenes(),
            noise_sigma: 0.05,
            signature_seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub gt_bev: f64,
    pub gt_qi: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            gt_bev: 1.0,
            gt_qi: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Cosine decay to zero over the whole run.
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub gt_flow: GtFlowSwitches,
    pub loss: LossConfig,
    pub optimizer: AdamW,
    pub schedule: Schedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    /// The desk benchmark: a reduced BEV grid and camera rig so that the
    /// full three-configuration, five-seed ablation runs on a single core.
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: desk_model(),
            gt_flow: GtFlowSwitches::BEV_AND_DEC,
            loss: LossConfig::default(),
            optimizer: AdamW {
                lr: 4e-3,
                ..AdamW::default()
            },
            schedule: Schedule::Cosine,
            grad_clip: 0.0,
            epochs: 10,
            batch_size: 4,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: "runs".into(),
        }
    }
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        geometry: SceneGeometry {
            bev_h: 8,
            bev_w: 8,
            ..SceneGeometry::default()
        },
        rig: CameraRig {
            view_h: 4,
            view_w: 6,
            ..CameraRig::default()
        },
        ..ModelConfig::default()
    }
}

impl ExperimentConfig {
    /// The desk benchmark at the full 16 x 16 BEV grid and 6 x 8 views.
    pub fn full_model() -> Self {
        Self {
            model: ModelConfig::default(),
            ..Self::default()
        }
    }

    pub fn with_switches(&self, gt_flow: GtFlowSwitches) -> Self {
        Self {
            gt_flow,
            ..self.clone()
        }
    }

    pub fn geometry(&self) -> &SceneGeometry {
        &self.model.geometry
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset.train_scenes.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.epochs
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Validation(msg));
        self.model
            .validate()
            .map_err(|m| HarnessError::Validation(format!("model: {m}")))?;
        self.model
            .geometry
            .validate()
            .map_err(|e| HarnessError::Validation(format!("model.geometry: {e}")))?;
        self.model
            .rig
            .validate()
            .map_err(|e| HarnessError::Validation(format!("model.rig: {e}")))?;
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.dataset.train_scenes == 0 || self.dataset.eval_scenes == 0 {
            return bad("dataset needs training and evaluation scenes".into());
        }
        if !(self.dataset.noise_sigma >= 0.0 && self.dataset.noise_sigma.is_finite()) {
            return bad(format!(
                "dataset.noise_sigma {} must be finite and non-negative",
                self.dataset.noise_sigma
            ));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!(
                "optimizer.lr {} must be positive",
                self.optimizer.lr
            ));
        }
        let weights = [
            ("loss.gt_bev", self.loss.gt_bev),
            ("loss.gt_qi", self.loss.gt_qi),
            ("loss.weights.cls", self.loss.weights.cls),
            ("loss.weights.box_l1", self.loss.weights.box_l1),
            ("loss.weights.no_object", self.loss.weights.no_object),
            ("loss.weights.attr", self.loss.weights.attr),
            ("grad_clip", self.grad_clip),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} {w} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| HarnessError::Validation(format!("config {}: {}", e.path(), e.inner())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
