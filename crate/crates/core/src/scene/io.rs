//! JSON documents: scenes, scene sets, prediction sets and dataset manifests.
//!
//! Every loader validates after parsing; errors carry a field path such as
//! `scenes[3].instances[0].yaw`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ClassProfile, GtInstance, GtScene, SceneError, SceneGeometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSet {
    pub scenes: Vec<GtScene>,
}

/// A scored detection; the instance schema plus `score`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub class_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub attribute_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn from_instance(inst: &GtInstance, score: f64) -> Self {
        Self {
            class_id: inst.class_id,
            center: inst.center,
            size: inst.size,
            yaw: inst.yaw,
            velocity: inst.velocity,
            attribute_id: inst.attribute_id,
            score,
        }
    }

    pub fn instance(&self) -> GtInstance {
        GtInstance {
            class_id: self.class_id,
            center: self.center,
            size: self.size,
            yaw: self.yaw,
            velocity: self.velocity,
            attribute_id: self.attribute_id,
        }
    }

    pub fn validate(&self, path: &str) -> Result<(), SceneError> {
        self.instance().validate(path)?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(SceneError::invalid(
                format!("{path}.score"),
                format!("{} not in [0, 1]", self.score),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenePredictions {
    pub scene_id: String,
    pub instances: Vec<Detection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSet {
    pub scenes: Vec<ScenePredictions>,
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub profile: ClassProfile,
    #[serde(default)]
    pub geometry: SceneGeometry,
}

/// Implemented by documents that check their own invariants after parsing.
pub trait Validate {
    fn validate(&self) -> Result<(), SceneError>;
}

impl Validate for GtScene {
    fn validate(&self) -> Result<(), SceneError> {
        for (i, inst) in self.instances.iter().enumerate() {
            inst.validate(&format!("instances[{i}]"))?;
        }
        Ok(())
    }
}

fn unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), SceneError> {
    let mut seen = BTreeSet::new();
    for (i, id) in ids.enumerate() {
        if !seen.insert(id) {
            return Err(SceneError::invalid(
                format!("scenes[{i}].scene_id"),
                format!("duplicate scene_id {id:?}"),
            ));
        }
    }
    Ok(())
}

impl Validate for SceneSet {
    fn validate(&self) -> Result<(), SceneError> {
        for (s, scene) in self.scenes.iter().enumerate() {
            for (i, inst) in scene.instances.iter().enumerate() {
                inst.validate(&format!("scenes[{s}].instances[{i}]"))?;
            }
        }
        unique_ids(self.scenes.iter().map(|s| s.scene_id.as_str()))
    }
}

impl Validate for PredictionSet {
    fn validate(&self) -> Result<(), SceneError> {
        for (s, scene) in self.scenes.iter().enumerate() {
            for (i, det) in scene.instances.iter().enumerate() {
                det.validate(&format!("scenes[{s}].instances[{i}]"))?;
            }
        }
        unique_ids(self.scenes.iter().map(|s| s.scene_id.as_str()))
    }
}

impl Validate for DatasetManifest {
    fn validate(&self) -> Result<(), SceneError> {
        ClassProfile::new(self.profile.weights().to_vec())?;
        self.geometry.validate()
    }
}

/// Parses and validates a document.
pub fn from_json<T: DeserializeOwned + Validate>(text: &str) -> Result<T, SceneError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let value: T = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        SceneError::invalid(path, e.into_inner().to_string())
    })?;
    value.validate()?;
    Ok(value)
}

/// Serialises with shortest round-trip float formatting, so parsing the
/// output restores every value bit for bit.
pub fn to_json<T: Serialize>(value: &T) -> Result<String, SceneError> {
    serde_json::to_string_pretty(value).map_err(|e| SceneError::Json(e.to_string()))
}

pub fn load<T: DeserializeOwned + Validate>(path: impl AsRef<Path>) -> Result<T, SceneError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))?;
    from_json(&text)
}

pub fn save<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    std::fs::write(path, to_json(value)?)
        .map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))
}
