use gtbev::gtflow::{contrastive_loss, gt_query_decode, gtqi_loss, object_features, GtFlowParams};
use gtbev::matching::{hungarian, match_cost, perception_loss};
use gtbev::model::checkpoint::Checkpoint;
use gtbev::model::{Detector, Predictions};
use gtbev::scene::{GtInstance, GtScene, ViewFeatures};
use gtbev::tensor::OptState;
use gtbev::tensor::{clip_global_norm, cosine_lr, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LossConfig, Schedule};
use crate::data::Dataset;
use crate::HarnessError;

/// Training precision.
pub type Real = f32;

/// Largest tolerated fraction of skipped optimiser steps.
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

const GT_FLOW_SEED_SALT: u64 = 0x6774_5f65_6e63;
const SHUFFLE_SEED_SALT: u64 = 0x7368_7566;

/// Unweighted loss components and their configured weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_base: f64,
    pub l_gt_bev: f64,
    pub l_gt_qi: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_base: f64, l_gt_bev: f64, l_gt_qi: f64, weights: &LossConfig) -> Self {
        Self {
            l_base,
            l_gt_bev,
            l_gt_qi,
            total: l_base + weights.gt_bev * l_gt_bev + weights.gt_qi * l_gt_qi,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.l_base.is_finite()
            && self.l_gt_bev.is_finite()
            && self.l_gt_qi.is_finite()
    }

    /// Component-wise mean, with the total recomputed from the means.
    pub fn mean(items: &[LossBreakdown], weights: &LossConfig) -> Self {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::new(
            sum(|l| l.l_base),
            sum(|l| l.l_gt_bev),
            sum(|l| l.l_gt_qi),
            weights,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean over the applied steps of the epoch.
    pub mean: LossBreakdown,
    pub steps: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
    /// Batch-mean loss of every attempted step.
    pub steps: Vec<LossBreakdown>,
    pub skipped_steps: usize,
}

pub struct Trained {
    pub detector: Detector<Real>,
    pub gt_flow: GtFlowParams<Real>,
    pub history: TrainHistory,
}

/// Loss and parameter gradients of one scene.
pub struct SceneGradients {
    pub loss: LossBreakdown,
    pub detector: Vec<Tensor<Real>>,
    pub gt_flow: Vec<Tensor<Real>>,
}

pub fn gt_flow_seed(seed: u64) -> u64 {
    seed ^ GT_FLOW_SEED_SALT
}

fn value(g: &Graph<Real>, v: Var) -> f64 {
    g.value(v).data()[0] as f64
}

fn take_grads(
    grads: &mut gtbev::tensor::Gradients<Real>,
    vars: &[Var],
    g: &Graph<Real>,
) -> Vec<Tensor<Real>> {
    vars.iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect()
}

/// Forward pass, matching and backward pass for one scene: the matched
/// set-prediction loss plus, when switched on, the contrastive BEV loss and
/// the ground-truth query loss, summed into one objective.
pub fn scene_gradients(
    det: &Detector<Real>,
    gf: &GtFlowParams<Real>,
    views: &ViewFeatures,
    scene: &GtScene,
    config: &ExperimentConfig,
) -> Result<SceneGradients, HarnessError> {
    let geometry = config.geometry();
    let weights = &config.loss.weights;
    let switches = config.gt_flow;
    let mut g = Graph::new();
    let p = det.bind(&mut g, true);
    let q = gf.bind(&mut g, switches.any());
    let (bev, out) = det.forward(&mut g, &p, views)?;

    let preds = Predictions {
        logits: g.value(out.logits).clone(),
        attr_logits: g.value(out.attr_logits).clone(),
        boxes: g.value(out.boxes).clone(),
    };
    if ![&preds.logits, &preds.attr_logits, &preds.boxes]
        .iter()
        .all(|t| t.all_finite())
    {
        // no assignment exists; the step is skipped on the NaN loss
        let zeros = |vars: &[Var]| vars.iter().map(|&v| Tensor::zeros(g.shape(v))).collect();
        return Ok(SceneGradients {
            loss: LossBreakdown::new(f64::NAN, 0.0, 0.0, &config.loss),
            detector: zeros(p.vars()),
            gt_flow: zeros(q.vars()),
        });
    }
    let assignment = hungarian(&match_cost(&preds, &scene.instances, geometry, weights));
    let base = perception_loss(
        &mut g,
        &out,
        &assignment,
        &scene.instances,
        geometry,
        weights,
    )?;
    let mut total = base;
    let (mut l_bev, mut l_qi) = (0.0, 0.0);

    let inside: Vec<GtInstance> = scene
        .instances
        .iter()
        .filter(|i| geometry.contains(i.center[0], i.center[1]))
        .cloned()
        .collect();
    if switches.any() && !inside.is_empty() {
        let beta = gf.encode(&mut g, &q, &inside, geometry)?;
        if switches.gt_bev {
            let alpha =
                object_features(&mut g, bev.z, &inside, geometry)?.expect("instances are present");
            let scale = gf.logit_scale(&mut g, &q);
            let l = contrastive_loss(&mut g, alpha, beta, scale)?;
            l_bev = value(&g, l);
            let l = g.scale(l, config.loss.gt_bev as Real);
            total = g.add(total, l)?;
        }
        if switches.gt_qi {
            let gt_out = gt_query_decode(det, &mut g, &p, bev.z, beta)?;
            let l = gtqi_loss(&mut g, &gt_out, &inside, geometry, weights)?;
            l_qi = value(&g, l);
            let l = g.scale(l, config.loss.gt_qi as Real);
            total = g.add(total, l)?;
        }
    }
    let loss = LossBreakdown::new(value(&g, base), l_bev, l_qi, &config.loss);
    let mut grads = g.backward(total)?;
    Ok(SceneGradients {
        loss,
        detector: take_grads(&mut grads, p.vars(), &g),
        gt_flow: take_grads(&mut grads, q.vars(), &g),
    })
}

fn accumulate(dst: &mut [Tensor<Real>], src: &[Tensor<Real>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.data_mut().iter_mut().zip(s.data()) {
            *a += *b;
        }
    }
}

fn scale_all(ts: &mut [Tensor<Real>], c: Real) {
    for t in ts {
        for v in t.data_mut() {
            *v *= c;
        }
    }
}

/// Epoch-by-epoch training state.
pub struct Trainer<'a> {
    config: &'a ExperimentConfig,
    data: &'a Dataset,
    detector: Detector<Real>,
    gt_flow: GtFlowParams<Real>,
    det_state: OptState<Real>,
    gf_state: OptState<Real>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    total_steps: usize,
    max_skipped: usize,
    history: TrainHistory,
}

impl<'a> Trainer<'a> {
    /// Fresh detector initialised from `seed`; the GT encoder and logit
    /// scale start from a seed derived from `seed` and are trained alongside
    /// when any guidance switch is on.
    pub fn new(
        config: &'a ExperimentConfig,
        seed: u64,
        data: &'a Dataset,
    ) -> Result<Self, HarnessError> {
        config.validate()?;
        if data.is_empty() {
            return Err(HarnessError::Validation("training set is empty".into()));
        }
        let detector =
            Detector::<Real>::new(config.model.clone(), seed).map_err(HarnessError::Validation)?;
        let gt_flow = GtFlowParams::<Real>::new(config.model.channels, gt_flow_seed(seed));
        let total_steps = data.len().div_ceil(config.batch_size) * config.epochs;
        Ok(Self {
            config,
            data,
            det_state: OptState::new(detector.params.tensors()),
            gf_state: OptState::new(gt_flow.params.tensors()),
            detector,
            gt_flow,
            rng: ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SEED_SALT),
            order: (0..data.len()).collect(),
            total_steps,
            max_skipped: (MAX_SKIPPED_FRACTION * total_steps as f64).floor() as usize,
            history: TrainHistory::default(),
        })
    }

    pub fn detector(&self) -> &Detector<Real> {
        &self.detector
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.history.epochs.len()
    }

    pub fn run_epoch(&mut self) -> Result<&EpochLoss, HarnessError> {
        let config = self.config;
        let epoch = self.history.epochs.len();
        self.order.shuffle(&mut self.rng);
        let mut applied = Vec::new();
        let mut skipped = 0;
        let order = std::mem::take(&mut self.order);
        for batch in order.chunks(config.batch_size) {
            if self.step(batch)? {
                applied.push(*self.history.steps.last().expect("step recorded"));
            } else {
                skipped += 1;
            }
        }
        self.order = order;
        let mean = LossBreakdown::mean(&applied, &config.loss);
        log::info!(
            "epoch {epoch}: total {:.4} (base {:.4}, gt_bev {:.4}, gt_qi {:.4})",
            mean.total,
            mean.l_base,
            mean.l_gt_bev,
            mean.l_gt_qi
        );
        self.history.epochs.push(EpochLoss {
            epoch,
            mean,
            steps: applied.len(),
            skipped,
        });
        Ok(self.history.epochs.last().expect("just pushed"))
    }

    /// One optimiser step on the mean gradient of `batch`; false when the
    /// step was skipped for non-finite values.
    fn step(&mut self, batch: &[usize]) -> Result<bool, HarnessError> {
        let config = self.config;
        let step = self.history.steps.len();
        let (det, gf, data) = (&self.detector, &self.gt_flow, self.data);
        let results: Vec<SceneGradients> = batch
            .par_iter()
            .map(|&i| scene_gradients(det, gf, &data.views[i], &data.scenes[i], config))
            .collect::<Result<_, _>>()?;
        let mut iter = results.into_iter();
        let first = iter.next().expect("batches are non-empty");
        let mut losses = vec![first.loss];
        let (mut dg, mut gg) = (first.detector, first.gt_flow);
        for r in iter {
            losses.push(r.loss);
            accumulate(&mut dg, &r.detector);
            accumulate(&mut gg, &r.gt_flow);
        }
        let inv = 1.0 / batch.len() as Real;
        scale_all(&mut dg, inv);
        scale_all(&mut gg, inv);
        let loss = LossBreakdown::mean(&losses, &config.loss);
        self.history.steps.push(loss);

        let finite = loss.is_finite() && dg.iter().chain(&gg).all(Tensor::all_finite);
        if !finite {
            self.history.skipped_steps += 1;
            log::warn!("step {step}: non-finite loss or gradient, step skipped");
            if self.history.skipped_steps > self.max_skipped {
                return Err(HarnessError::Numerical(format!(
                    "{} of {} steps skipped for non-finite values",
                    self.history.skipped_steps, self.total_steps
                )));
            }
            return Ok(false);
        }
        if config.grad_clip > 0.0 {
            let n_det = dg.len();
            dg.append(&mut gg);
            clip_global_norm(&mut dg, config.grad_clip);
            gg = dg.split_off(n_det);
        }
        let lr = match config.schedule {
            Schedule::Constant => config.optimizer.lr,
            Schedule::Cosine => cosine_lr(config.optimizer.lr, step, self.total_steps),
        };
        config.optimizer.step(
            self.detector.params.tensors_mut(),
            &dg,
            &mut self.det_state,
            lr,
        )?;
        if config.gt_flow.any() {
            config.optimizer.step(
                self.gt_flow.params.tensors_mut(),
                &gg,
                &mut self.gf_state,
                lr,
            )?;
        }
        Ok(true)
    }

    pub fn finish(self) -> Trained {
        Trained {
            detector: self.detector,
            gt_flow: self.gt_flow,
            history: self.history,
        }
    }
}

/// Runs every configured epoch of a [`Trainer`].
pub fn train(
    config: &ExperimentConfig,
    seed: u64,
    data: &Dataset,
) -> Result<Trained, HarnessError> {
    let mut t = Trainer::new(config, seed, data)?;
    for _ in 0..config.epochs {
        t.run_epoch()?;
    }
    Ok(t.finish())
}

/// Checkpoint holding the detector and the GT encoder, with the config echo.
pub fn checkpoint(config: &ExperimentConfig, seed: u64, trained: &Trained) -> Checkpoint {
    let echo = serde_json::to_value(config).expect("config serialises");
    Checkpoint::from_stores(
        echo,
        seed,
        &[
            ("", &trained.detector.params),
            ("", &trained.gt_flow.params),
        ],
    )
}
