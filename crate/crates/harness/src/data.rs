use gtbev::scene::io::{DatasetManifest, SceneSet};
use gtbev::scene::{
    generate_scene, render_views, scene_seed, ClassSignatures, GtScene, ViewFeatures,
};

use crate::config::ExperimentConfig;

/// Offset separating evaluation scene seeds from training scene seeds.
pub const EVAL_SEED_OFFSET: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Scenes with their rendered views.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<GtScene>,
    pub views: Vec<ViewFeatures>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene_set(&self) -> SceneSet {
        SceneSet {
            scenes: self.scenes.clone(),
        }
    }
}

/// Seed of scene `index` in `split`.
pub fn split_scene_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    match split {
        Split::Train => scene_seed(dataset_seed, index as u64),
        Split::Eval => scene_seed(dataset_seed, EVAL_SEED_OFFSET + index as u64),
    }
}

/// Renders `scenes` with the configured rig, signatures and noise; the noise
/// stream of each scene is keyed by its generator seed.
pub fn render(config: &ExperimentConfig, scenes: Vec<GtScene>, seeds: &[u64]) -> Dataset {
    let d = &config.dataset;
    let signatures = ClassSignatures::seeded(config.model.rig.channels, d.signature_seed);
    let views = scenes
        .iter()
        .zip(seeds)
        .map(|(s, &seed)| {
            render_views(
                s,
                &config.model.rig,
                config.geometry(),
                &signatures,
                d.noise_sigma,
                seed,
            )
        })
        .collect();
    Dataset { scenes, views }
}

pub fn build(config: &ExperimentConfig, split: Split) -> Dataset {
    let d = &config.dataset;
    let (count, prefix) = match split {
        Split::Train => (d.train_scenes, "train"),
        Split::Eval => (d.eval_scenes, "eval"),
    };
    let seeds: Vec<u64> = (0..count)
        .map(|i| split_scene_seed(d.seed, split, i))
        .collect();
    let scenes = seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            generate_scene(
                &d.profile,
                config.geometry(),
                seed,
                format!("{prefix}-{i:05}"),
            )
            .scene
        })
        .collect();
    render(config, scenes, &seeds)
}

/// Manifest of the training split; regenerating from it yields the same scenes.
pub fn manifest(config: &ExperimentConfig) -> DatasetManifest {
    let d = &config.dataset;
    DatasetManifest {
        seed: d.seed,
        count: d.train_scenes,
        profile: d.profile.clone(),
        geometry: config.geometry().clone(),
    }
}

/// Scenes described by a manifest, with ids `scene-00000`, ….
pub fn from_manifest(m: &DatasetManifest) -> SceneSet {
    SceneSet {
        scenes: (0..m.count)
            .map(|i| {
                generate_scene(
                    &m.profile,
                    &m.geometry,
                    scene_seed(m.seed, i as u64),
                    format!("scene-{i:05}"),
                )
                .scene
            })
            .collect(),
    }
}
