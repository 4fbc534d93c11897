use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassProfile, GtInstance, GtScene, SceneGeometry, MAX_SPEED, MOVING_SPEED};

/// Placement attempts per instance before giving up on the rest of the scene.
pub const MAX_REJECTIONS: usize = 1000;

/// Fraction of movable instances drawn as stopped.
const STOPPED_SHARE: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDraw {
    pub scene: GtScene,
    /// Instance count drawn before separation rejection.
    pub requested: usize,
}

impl SceneDraw {
    /// True when separation could not be met for every requested instance.
    pub fn truncated(&self) -> bool {
        self.scene.instances.len() < self.requested
    }
}

/// Per-scene seed derived from a dataset seed.
pub fn scene_seed(dataset_seed: u64, index: u64) -> u64 {
    dataset_seed ^ index
}

pub fn generate_scene(
    profile: &ClassProfile,
    geometry: &SceneGeometry,
    seed: u64,
    scene_id: impl Into<String>,
) -> SceneDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let requested = rng.gen_range(1..=geometry.max_instances);
    let r = geometry.range;
    let min_sq = geometry.min_separation * geometry.min_separation;
    let mut instances: Vec<GtInstance> = Vec::with_capacity(requested);

    'outer: for _ in 0..requested {
        let class = profile.sample(rng.gen::<f64>());
        let (x, y) = {
            let mut tries = 0;
            loop {
                let x = rng.gen_range(-r..r);
                let y = rng.gen_range(-r..r);
                let clear = instances.iter().all(|o| {
                    let (dx, dy) = (o.center[0] - x, o.center[1] - y);
                    dx * dx + dy * dy >= min_sq
                });
                if clear {
                    break (x, y);
                }
                tries += 1;
                if tries >= MAX_REJECTIONS {
                    break 'outer;
                }
            }
        };
        let mean = class.mean_size();
        let size = mean.map(|m| m * rng.gen_range(0.8..=1.2));
        let yaw = rng.gen_range(-PI..PI);
        let speed = if class.is_static() {
            0.0
        } else if rng.gen::<f64>() < STOPPED_SHARE {
            rng.gen_range(0.0..MOVING_SPEED)
        } else {
            rng.gen_range(MOVING_SPEED..=MAX_SPEED)
        };
        instances.push(GtInstance {
            class_id: class.id(),
            center: [x, y, 0.5 * size[2]],
            size,
            yaw,
            velocity: [speed * yaw.cos(), speed * yaw.sin()],
            attribute_id: usize::from(speed >= MOVING_SPEED),
        });
    }

    SceneDraw {
        scene: GtScene {
            scene_id: scene_id.into(),
            instances,
        },
        requested,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::io::Validate;
    use crate::scene::{ObjectClass, NUM_CLASSES};

    #[test]
    fn same_seed_same_scene() {
        let p = ClassProfile::nuscenes();
        let g = SceneGeometry::default();
        assert_eq!(
            generate_scene(&p, &g, 42, "a"),
            generate_scene(&p, &g, 42, "a")
        );
        assert_ne!(
            generate_scene(&p, &g, 42, "a"),
            generate_scene(&p, &g, 43, "a")
        );
    }

    #[test]
    fn reference_profile_frequencies_converge() {
        let p = ClassProfile::nuscenes();
        let g = SceneGeometry::default();
        let mut counts = [0usize; NUM_CLASSES];
        let mut total = 0;
        let mut index = 0;
        while total < 10_000 {
            let draw = generate_scene(&p, &g, scene_seed(7, index), "s");
            for inst in &draw.scene.instances {
                counts[inst.class_id] += 1;
                total += 1;
            }
            index += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            let freq = n as f64 / total as f64;
            assert!(
                (freq - p.weights()[c]).abs() <= 0.01,
                "class {c}: {freq} vs {}",
                p.weights()[c]
            );
        }
    }

    #[test]
    fn one_hot_profile_gives_only_cars() {
        let p = ClassProfile::one_hot(ObjectClass::Car);
        let g = SceneGeometry::default();
        for s in 0..50 {
            let draw = generate_scene(&p, &g, s, "s");
            assert!(draw.scene.instances.iter().all(|i| i.class_id == 0));
        }
    }

    #[test]
    fn generated_scenes_satisfy_invariants() {
        let p = ClassProfile::uniform();
        let g = SceneGeometry::default();
        for s in 0..200 {
            let draw = generate_scene(&p, &g, s, format!("s{s}"));
            let inst = &draw.scene.instances;
            assert!(!draw.truncated());
            assert!((1..=g.max_instances).contains(&inst.len()));
            draw.scene.validate().unwrap();
            for (i, a) in inst.iter().enumerate() {
                assert!(g.contains(a.center[0], a.center[1]));
                let speed = a.velocity[0].hypot(a.velocity[1]);
                assert!(speed <= MAX_SPEED + 1e-9);
                assert_eq!(a.attribute_id, usize::from(speed >= MOVING_SPEED - 1e-12));
                let mean = a.class().mean_size();
                for k in 0..3 {
                    assert!(
                        a.size[k] >= 0.8 * mean[k] - 1e-12 && a.size[k] <= 1.2 * mean[k] + 1e-12
                    );
                }
                for b in &inst[i + 1..] {
                    let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
                    assert!(d >= g.min_separation);
                }
            }
        }
    }

    #[test]
    fn crowded_geometry_truncates_and_flags() {
        let p = ClassProfile::uniform();
        let g = SceneGeometry {
            range: 0.3,
            max_instances: 12,
            ..SceneGeometry::default()
        };
        let truncated = (0..20)
            .map(|s| generate_scene(&p, &g, s, "s"))
            .filter(|d| d.truncated())
            .count();
        assert!(truncated > 0);
    }
}
