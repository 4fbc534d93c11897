//! Synthetic ground-truth scenes and their multi-view observations.
//!
//! A [`GtScene`] lives on a metric BEV plane centred on the ego vehicle.
//! [`generate_scene`] samples one from a [`ClassProfile`]; [`render_views`]
//! turns it into per-camera feature maps ([`ViewFeatures`]) that stand in for
//! image-backbone output.

mod generate;
pub mod io;
mod render;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::{generate_scene, scene_seed, SceneDraw};
pub use render::{mask_view, render_views, ClassSignatures, ViewFeatures};

pub const NUM_CLASSES: usize = 10;
pub const NUM_ATTRIBUTES: usize = 2;

/// Attribute ids: `0` stopped, `1` moving.
pub const ATTRIBUTE_NAMES: [&str; NUM_ATTRIBUTES] = ["stopped", "moving"];

/// Speed at or above which an instance is labelled moving.
pub const MOVING_SPEED: f64 = 0.5;

pub const MAX_SPEED: f64 = 15.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid {path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("view index {index} out of range for {views} views")]
    ViewIndex { index: usize, views: usize },
    #[error("json: {0}")]
    Json(String),
    #[error("io: {0}")]
    Io(String),
}

impl SceneError {
    pub fn invalid(path: impl Into<String>, msg: impl Into<String>) -> Self {
        SceneError::Invalid {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

/// The ten detection classes, in `class_id` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Barrier,
    TrafficCone,
    Truck,
    Trailer,
    Bicycle,
    Motorcycle,
    Bus,
    ConstructionVehicle,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; NUM_CLASSES] = [
        ObjectClass::Car,
        ObjectClass::Pedestrian,
        ObjectClass::Barrier,
        ObjectClass::TrafficCone,
        ObjectClass::Truck,
        ObjectClass::Trailer,
        ObjectClass::Bicycle,
        ObjectClass::Motorcycle,
        ObjectClass::Bus,
        ObjectClass::ConstructionVehicle,
    ];

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Barrier => "barrier",
            ObjectClass::TrafficCone => "traffic_cone",
            ObjectClass::Truck => "truck",
            ObjectClass::Trailer => "trailer",
            ObjectClass::Bicycle => "bicycle",
            ObjectClass::Motorcycle => "motorcycle",
            ObjectClass::Bus => "bus",
            ObjectClass::ConstructionVehicle => "construction_vehicle",
        }
    }

    /// Mean `(w, l, h)` in metres; `l` runs along the heading.
    pub fn mean_size(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [1.9, 4.6, 1.7],
            ObjectClass::Pedestrian => [0.7, 0.7, 1.8],
            ObjectClass::Barrier => [0.5, 2.5, 1.0],
            ObjectClass::TrafficCone => [0.4, 0.4, 1.0],
            ObjectClass::Truck => [2.5, 7.0, 3.0],
            ObjectClass::Trailer => [2.9, 12.0, 3.9],
            ObjectClass::Bicycle => [0.6, 1.7, 1.3],
            ObjectClass::Motorcycle => [0.8, 2.1, 1.5],
            ObjectClass::Bus => [2.9, 11.0, 3.5],
            ObjectClass::ConstructionVehicle => [2.8, 6.5, 3.2],
        }
    }

    /// Barriers and cones never move.
    pub fn is_static(self) -> bool {
        matches!(self, ObjectClass::Barrier | ObjectClass::TrafficCone)
    }

    /// Classes with at most a 2% share of the reference distribution.
    pub fn is_long_tail(self) -> bool {
        matches!(
            self,
            ObjectClass::ConstructionVehicle
                | ObjectClass::Bus
                | ObjectClass::Motorcycle
                | ObjectClass::Bicycle
                | ObjectClass::Trailer
        )
    }
}

impl TryFrom<Vec<f64>> for ClassProfile {
    type Error = SceneError;
    fn try_from(weights: Vec<f64>) -> Result<Self, SceneError> {
        Self::new(weights)
    }
}

impl From<ClassProfile> for Vec<f64> {
    fn from(p: ClassProfile) -> Self {
        p.weights
    }
}

pub fn long_tail_classes() -> impl Iterator<Item = ObjectClass> {
    ObjectClass::ALL.into_iter().filter(|c| c.is_long_tail())
}

/// Per-class sampling weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassProfile {
    weights: Vec<f64>,
}

impl ClassProfile {
    pub fn new(weights: Vec<f64>) -> Result<Self, SceneError> {
        if weights.len() != NUM_CLASSES {
            return Err(SceneError::invalid(
                "profile",
                format!("expected {NUM_CLASSES} weights, got {}", weights.len()),
            ));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
            return Err(SceneError::invalid(
                format!("profile[{i}]"),
                format!("negative or NaN weight {w}"),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SceneError::invalid(
                "profile",
                format!("weights sum to {total}, not 1"),
            ));
        }
        Ok(Self { weights })
    }

    /// Instance shares of the nuScenes validation split (normalised instance
    /// counts), in `class_id` order.
    pub fn nuscenes() -> Self {
        // car, ped, barrier, cone, truck, trailer, bicycle, motorcycle, bus, cv
        const COUNTS: [f64; NUM_CLASSES] = [
            27727.0, 11564.0, 10263.0, 6591.0, 4215.0, 1114.0, 857.0, 748.0, 657.0, 650.0,
        ];
        let total: f64 = COUNTS.iter().sum();
        Self {
            weights: COUNTS.iter().map(|c| c / total).collect(),
        }
    }

    pub fn one_hot(class: ObjectClass) -> Self {
        let mut weights = vec![0.0; NUM_CLASSES];
        weights[class.id()] = 1.0;
        Self { weights }
    }

    pub fn uniform() -> Self {
        Self {
            weights: vec![0.1; NUM_CLASSES],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Inverse-CDF draw from a uniform `u` in `[0, 1)`.
    pub fn sample(&self, u: f64) -> ObjectClass {
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                last = i;
                if u < acc {
                    return ObjectClass::ALL[i];
                }
            }
        }
        ObjectClass::ALL[last]
    }
}

/// Metric extent of the perception square and its BEV discretisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGeometry {
    /// Half-width of the square perception range, metres.
    pub range: f64,
    pub bev_h: usize,
    pub bev_w: usize,
    pub max_instances: usize,
    pub min_separation: f64,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        Self {
            range: 12.8,
            bev_h: 16,
            bev_w: 16,
            max_instances: 12,
            min_separation: 0.5,
        }
    }
}

impl SceneGeometry {
    pub fn cell_size_x(&self) -> f64 {
        2.0 * self.range / self.bev_w as f64
    }

    pub fn cell_size_y(&self) -> f64 {
        2.0 * self.range / self.bev_h as f64
    }

    pub fn num_cells(&self) -> usize {
        self.bev_h * self.bev_w
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= -self.range && x < self.range && y >= -self.range && y < self.range
    }

    /// Metric centre of BEV cell `(row, col)`; rows index `y`, columns `x`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            -self.range + (col as f64 + 0.5) * self.cell_size_x(),
            -self.range + (row as f64 + 0.5) * self.cell_size_y(),
        )
    }

    /// Row-major index of the cell containing `(x, y)`, clamped to the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> usize {
        let col = ((x + self.range) / self.cell_size_x()).floor();
        let row = ((y + self.range) / self.cell_size_y()).floor();
        let col = col.clamp(0.0, (self.bev_w - 1) as f64) as usize;
        let row = row.clamp(0.0, (self.bev_h - 1) as f64) as usize;
        row * self.bev_w + col
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.range > 0.0) {
            return Err(SceneError::invalid("geometry.range", "must be positive"));
        }
        if self.bev_h == 0 || self.bev_w == 0 {
            return Err(SceneError::invalid(
                "geometry.bev_h",
                "BEV grid must be non-empty",
            ));
        }
        if self.max_instances == 0 {
            return Err(SceneError::invalid(
                "geometry.max_instances",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Camera arrangement: `views` equal azimuth sectors tiling `[0, 2π)`, the
/// first centred on bearing 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRig {
    pub views: usize,
    /// Range bins per view.
    pub view_h: usize,
    /// Bearing bins per view.
    pub view_w: usize,
    pub channels: usize,
    /// Blob standard deviation in feature-cell units.
    pub blob_sigma: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            views: 6,
            view_h: 6,
            view_w: 8,
            channels: 8,
            blob_sigma: 0.6,
        }
    }
}

impl CameraRig {
    pub fn sector_width(&self) -> f64 {
        2.0 * PI / self.views as f64
    }

    pub fn sector_center(&self, view: usize) -> f64 {
        view as f64 * self.sector_width()
    }

    pub fn tokens_per_view(&self) -> usize {
        self.view_h * self.view_w
    }

    /// View whose sector contains `bearing` (radians, any wrap), together with
    /// the bearing's fractional position `[0, 1)` across that sector.
    pub fn sector_of(&self, bearing: f64) -> (usize, f64) {
        let w = self.sector_width();
        let shifted = (bearing + 0.5 * w).rem_euclid(2.0 * PI);
        let pos = shifted / w;
        let view = (pos.floor() as usize).min(self.views - 1);
        (view, (pos - view as f64).clamp(0.0, 1.0 - f64::EPSILON))
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.views == 0 || self.view_h == 0 || self.view_w == 0 || self.channels == 0 {
            return Err(SceneError::invalid(
                "rig",
                "all rig dimensions must be positive",
            ));
        }
        Ok(())
    }
}

/// One ground-truth object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtInstance {
    pub class_id: usize,
    pub center: [f64; 3],
    /// `(w, l, h)` in metres.
    pub size: [f64; 3],
    /// Radians in `[-π, π)`.
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub attribute_id: usize,
}

impl GtInstance {
    pub fn class(&self) -> ObjectClass {
        ObjectClass::from_id(self.class_id).expect("validated class id")
    }

    pub fn validate(&self, path: &str) -> Result<(), SceneError> {
        if self.class_id >= NUM_CLASSES {
            return Err(SceneError::invalid(
                format!("{path}.class_id"),
                format!("{} not in [0, {NUM_CLASSES})", self.class_id),
            ));
        }
        if self.attribute_id >= NUM_ATTRIBUTES {
            return Err(SceneError::invalid(
                format!("{path}.attribute_id"),
                format!("{} not in [0, {NUM_ATTRIBUTES})", self.attribute_id),
            ));
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(SceneError::invalid(
                format!("{path}.center"),
                "non-finite coordinate",
            ));
        }
        if !self.size.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(SceneError::invalid(
                format!("{path}.size"),
                "components must be positive",
            ));
        }
        if !(self.yaw >= -PI && self.yaw < PI) {
            return Err(SceneError::invalid(
                format!("{path}.yaw"),
                format!("{} not in [-pi, pi)", self.yaw),
            ));
        }
        if !self.velocity.iter().all(|v| v.is_finite()) {
            return Err(SceneError::invalid(
                format!("{path}.velocity"),
                "non-finite component",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtScene {
    pub scene_id: String,
    pub instances: Vec<GtInstance>,
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sectors_tile_the_circle() {
        let rig = CameraRig::default();
        let mut counts = vec![0usize; rig.views];
        for k in 0..3600 {
            let bearing = (k as f64 + 0.5) * 2.0 * PI / 3600.0 - PI;
            let (view, frac) = rig.sector_of(bearing);
            assert!((0.0..1.0).contains(&frac));
            counts[view] += 1;
        }
        assert!(counts.iter().all(|&c| c == 600), "{counts:?}");
        assert_eq!(rig.sector_of(0.0).0, 0);
        assert_eq!(rig.sector_of(PI / 3.0).0, 1);
        assert_eq!(rig.sector_of(-PI / 3.0).0, 5);
    }

    #[test]
    fn profile_validation() {
        assert!(ClassProfile::new(vec![0.1; 9]).is_err());
        assert!(ClassProfile::new(vec![0.2; 10]).is_err());
        let mut w = vec![0.1; 10];
        w[0] = -0.1;
        w[1] = 0.3;
        assert!(ClassProfile::new(w).is_err());
        let total: f64 = ClassProfile::nuscenes().weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_hot_profile_always_samples_its_class() {
        let p = ClassProfile::one_hot(ObjectClass::Bus);
        for k in 0..100 {
            assert_eq!(p.sample(k as f64 / 100.0), ObjectClass::Bus);
        }
    }

    #[test]
    fn five_long_tail_classes() {
        let names: Vec<_> = long_tail_classes().map(|c| c.name()).collect();
        assert_eq!(
            names,
            [
                "trailer",
                "bicycle",
                "motorcycle",
                "bus",
                "construction_vehicle"
            ]
        );
        let p = ClassProfile::nuscenes();
        for c in ObjectClass::ALL {
            assert_eq!(c.is_long_tail(), p.weights()[c.id()] <= 0.02);
        }
    }

    #[test]
    fn cell_lookup_round_trips_centres() {
        let g = SceneGeometry::default();
        assert!((g.cell_size_x() - 1.6).abs() < 1e-12);
        for row in 0..g.bev_h {
            for col in 0..g.bev_w {
                let (x, y) = g.cell_center(row, col);
                assert_eq!(g.cell_of(x, y), row * g.bev_w + col);
            }
        }
        assert_eq!(g.cell_of(100.0, -100.0), g.bev_w - 1);
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -PI, 0.0, PI, 3.2, 7.0] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(((w - a) / (2.0 * PI)).round() * 2.0 * PI - (w - a) < 1e-9);
        }
    }
}
