//! Brute-force detection evaluator and randomized fixtures.
//!
//! Everything is recomputed from the raw prediction and instance lists:
//! visiting order by repeated maximum search, matching by scanning every
//! prediction-instance pair, precision at each recall level by scanning
//! every operating point. Only the floating-point expressions of the
//! per-pair errors and the averaging order follow the documented formulas.

use std::f64::consts::PI;

use gtbev::scene::io::{Detection, PredictionSet, ScenePredictions, SceneSet};
use gtbev::scene::{GtInstance, GtScene, ObjectClass, NUM_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub map: f64,
    pub errors: [f64; 5],
    pub nds: f64,
    pub long_tail_map: f64,
    /// AP per class and threshold; `None` for classes absent on both sides.
    pub ap: Vec<Option<[f64; 4]>>,
    /// Mean TP errors per class in ATE, ASE, AOE, AVE, AAE order.
    pub class_errors: Vec<[Option<f64>; 5]>,
    pub true_positives: usize,
}

struct Outcome {
    tp: bool,
    errors: Option<[f64; 5]>,
}

fn heading_gap(a: f64, b: f64, period: f64) -> f64 {
    let mut d = (a - b).abs();
    while d >= period {
        d -= period;
    }
    d.min(period - d)
}

fn errors_of(d: &Detection, g: &GtInstance) -> [f64; 5] {
    let dx = d.center[0] - g.center[0];
    let dy = d.center[1] - g.center[1];
    let inter = d.size[0].min(g.size[0]) * d.size[1].min(g.size[1]) * d.size[2].min(g.size[2]);
    let union = d.size[0] * d.size[1] * d.size[2] + g.size[0] * g.size[1] * g.size[2] - inter;
    let period = if g.class_id == ObjectClass::Barrier.id() {
        PI
    } else {
        2.0 * PI
    };
    let vx = d.velocity[0] - g.velocity[0];
    let vy = d.velocity[1] - g.velocity[1];
    [
        (dx * dx + dy * dy).sqrt(),
        1.0 - inter / union,
        heading_gap(d.yaw, g.yaw, period),
        (vx * vx + vy * vy).sqrt(),
        if d.attribute_id == g.attribute_id {
            0.0
        } else {
            1.0
        },
    ]
}

fn applies(class: usize, metric: usize) -> bool {
    let barrier = class == ObjectClass::Barrier.id();
    let cone = class == ObjectClass::TrafficCone.id();
    match metric {
        2 => !cone,
        3 | 4 => !barrier && !cone,
        _ => true,
    }
}

/// Every `(scene, prediction)` of `class`, visited by descending score,
/// earliest first among equal scores.
fn visiting_order(scenes: &[&[Detection]], class: usize) -> Vec<(usize, usize)> {
    let mut pending: Vec<(usize, usize)> = Vec::new();
    for (s, dets) in scenes.iter().enumerate() {
        for (i, d) in dets.iter().enumerate() {
            if d.class_id == class {
                pending.push((s, i));
            }
        }
    }
    let mut order = Vec::new();
    while !pending.is_empty() {
        let mut pick = 0;
        for k in 1..pending.len() {
            let (s, i) = pending[k];
            let (ps, pi) = pending[pick];
            if scenes[s][i].score > scenes[ps][pi].score {
                pick = k;
            }
        }
        order.push(pending.remove(pick));
    }
    order
}

fn run(
    scenes: &[&[Detection]],
    gts: &[GtScene],
    class: usize,
    threshold: f64,
) -> (Vec<Outcome>, usize) {
    // every instance of the dataset, flattened
    let all: Vec<(usize, usize)> = gts
        .iter()
        .enumerate()
        .flat_map(|(s, g)| (0..g.instances.len()).map(move |j| (s, j)))
        .collect();
    let n_gt = all
        .iter()
        .filter(|&&(s, j)| gts[s].instances[j].class_id == class)
        .count();
    let mut taken = vec![false; all.len()];
    let mut out = Vec::new();
    for (s, i) in visiting_order(scenes, class) {
        let d = &scenes[s][i];
        let mut best: Option<(usize, f64)> = None;
        for (k, &(gs, j)) in all.iter().enumerate() {
            let g = &gts[gs].instances[j];
            if gs != s || g.class_id != class || taken[k] {
                continue;
            }
            let dx = d.center[0] - g.center[0];
            let dy = d.center[1] - g.center[1];
            let dist = (dx * dx + dy * dy).sqrt();
            if !(dist < threshold) {
                continue;
            }
            match best {
                Some((_, bd)) if bd <= dist => {}
                _ => best = Some((k, dist)),
            }
        }
        match best {
            Some((k, _)) => {
                taken[k] = true;
                let (gs, j) = all[k];
                out.push(Outcome {
                    tp: true,
                    errors: Some(errors_of(d, &gts[gs].instances[j])),
                });
            }
            None => out.push(Outcome {
                tp: false,
                errors: None,
            }),
        }
    }
    (out, n_gt)
}

fn ap(outcomes: &[Outcome], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if outcomes.is_empty() { None } else { Some(0.0) };
    }
    let mut sum = 0.0;
    for step in 10..=100 {
        let level = step as f64 / 100.0;
        let mut p = 0.0f64;
        for k in 0..outcomes.len() {
            let tp = outcomes[..=k].iter().filter(|o| o.tp).count();
            let recall = tp as f64 / n_gt as f64;
            if recall >= level {
                p = p.max(tp as f64 / (k + 1) as f64);
            }
        }
        sum += ((p - 0.1) / (1.0 - 0.1)).max(0.0);
    }
    Some(sum / 91.0)
}

fn avg(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        Some(s / v.len() as f64)
    }
}

pub fn brute_force(preds: &PredictionSet, gts: &SceneSet) -> OracleReport {
    let scenes: Vec<&[Detection]> = gts
        .scenes
        .iter()
        .map(|g| {
            preds
                .scenes
                .iter()
                .find(|p| p.scene_id == g.scene_id)
                .map(|p| p.instances.as_slice())
                .expect("prediction scene for every ground-truth scene")
        })
        .collect();
    let mut ap_table = Vec::new();
    let mut err_table = Vec::new();
    let mut true_positives = 0;
    for class in 0..NUM_CLASSES {
        let n_pred: usize = scenes
            .iter()
            .map(|s| s.iter().filter(|d| d.class_id == class).count())
            .sum();
        let mut aps = [0.0; 4];
        let mut present = false;
        let mut at_two = None;
        for (t, &thr) in THRESHOLDS.iter().enumerate() {
            let (outcomes, n_gt) = run(&scenes, &gts.scenes, class, thr);
            if let Some(v) = ap(&outcomes, n_gt) {
                aps[t] = v;
                present = true;
            }
            if thr == 2.0 {
                at_two = Some((outcomes, n_gt));
            }
        }
        ap_table.push(present.then_some(aps));
        let (outcomes, n_gt) = at_two.unwrap();
        true_positives += outcomes.iter().filter(|o| o.tp).count();
        let mut errs = [None; 5];
        if n_gt > 0 || n_pred > 0 {
            for (m, slot) in errs.iter_mut().enumerate() {
                if applies(class, m) {
                    let v: Vec<f64> = outcomes
                        .iter()
                        .filter_map(|o| o.errors.map(|e| e[m]))
                        .collect();
                    *slot = Some(avg(&v).unwrap_or(1.0));
                }
            }
        }
        err_table.push(errs);
    }
    let class_mean = |a: &[f64; 4]| (a[0] + a[1] + a[2] + a[3]) / 4.0;
    let all_aps: Vec<f64> = ap_table.iter().flatten().map(class_mean).collect();
    let tail_aps: Vec<f64> = ap_table
        .iter()
        .enumerate()
        .filter(|(c, _)| ObjectClass::from_id(*c).unwrap().is_long_tail())
        .filter_map(|(_, a)| a.as_ref().map(class_mean))
        .collect();
    let map = avg(&all_aps).unwrap_or(0.0);
    let mut errors = [1.0; 5];
    for (m, e) in errors.iter_mut().enumerate() {
        let v: Vec<f64> = err_table.iter().filter_map(|row| row[m]).collect();
        *e = avg(&v).unwrap_or(1.0);
    }
    let mut nds = 5.0 * map;
    for e in errors {
        nds += (1.0 - e).max(0.0);
    }
    OracleReport {
        map,
        errors,
        nds: nds / 10.0,
        long_tail_map: avg(&tail_aps).unwrap_or(0.0),
        ap: ap_table,
        class_errors: err_table,
        true_positives,
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> GtInstance {
    // barriers and cones are drawn often so their special rules are exercised
    let class_id = match rng.gen_range(0..5) {
        0 => ObjectClass::Barrier.id(),
        1 => ObjectClass::TrafficCone.id(),
        _ => rng.gen_range(0..NUM_CLASSES),
    };
    let class = ObjectClass::from_id(class_id).unwrap();
    let [w, l, h] = class.mean_size();
    let moving = !class.is_static() && rng.gen_bool(0.6);
    let yaw: f64 = rng.gen_range(-PI..PI);
    let speed = if moving {
        rng.gen_range(0.5..10.0)
    } else {
        0.0
    };
    GtInstance {
        class_id,
        center: [
            rng.gen_range(-12.0..12.0),
            rng.gen_range(-12.0..12.0),
            h / 2.0,
        ],
        size: [w, l, h],
        yaw,
        velocity: [speed * yaw.cos(), speed * yaw.sin()],
        attribute_id: usize::from(moving),
    }
}

fn perturbed(rng: &mut ChaCha8Rng, g: &GtInstance) -> Detection {
    let mut d = Detection::from_instance(g, 0.0);
    let r: f64 = rng.gen_range(0.0..4.5);
    let a: f64 = rng.gen_range(-PI..PI);
    d.center[0] += r * a.cos();
    d.center[1] += r * a.sin();
    for s in &mut d.size {
        *s *= rng.gen_range(0.6..1.6);
    }
    match rng.gen_range(0..4) {
        0 => d.yaw = gtbev::scene::wrap_angle(g.yaw + PI),
        1 => d.yaw = rng.gen_range(-PI..PI),
        _ => {}
    }
    if rng.gen_bool(0.3) {
        d.attribute_id ^= 1;
    }
    d.velocity[0] += rng.gen_range(-2.0..2.0);
    if rng.gen_bool(0.1) {
        d.class_id = rng.gen_range(0..NUM_CLASSES);
    }
    d
}

/// 1–4 scenes, up to 8 instances in total and at most 20 predictions:
/// perturbed copies (including heading flips and wrong attributes),
/// duplicates and free-standing false positives. Scores are coarsely
/// quantised so ties occur.
pub fn random_fixture(seed: u64) -> (PredictionSet, SceneSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_scenes = rng.gen_range(1..=4);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let mut budget: usize = 20;
    for s in 0..n_scenes {
        let n = rng.gen_range(0..=8 / n_scenes + 1);
        let instances: Vec<GtInstance> = (0..n).map(|_| random_instance(&mut rng)).collect();
        let mut dets = Vec::new();
        for g in &instances {
            let copies = rng.gen_range(0..=2).min(budget);
            for _ in 0..copies {
                dets.push(perturbed(&mut rng, g));
            }
            budget -= copies;
        }
        let extra = rng.gen_range(0..=2).min(budget);
        for _ in 0..extra {
            dets.push(Detection::from_instance(&random_instance(&mut rng), 0.0));
        }
        budget -= extra;
        for d in &mut dets {
            d.score = (rng.gen_range(0..=20) as f64) / 20.0;
        }
        let id = format!("f{seed}-{s}");
        preds.push(ScenePredictions {
            scene_id: id.clone(),
            instances: dets,
        });
        gts.push(GtScene {
            scene_id: id,
            instances,
        });
    }
    // prediction file order need not follow the ground truth
    preds.reverse();
    (PredictionSet { scenes: preds }, SceneSet { scenes: gts })
}
