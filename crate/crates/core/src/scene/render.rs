use std::f64::consts::SQRT_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{CameraRig, GtScene, SceneError, SceneGeometry, NUM_CLASSES};

/// Frozen per-class channel patterns stamped by each instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSignatures {
    channels: usize,
    vectors: Vec<f64>,
}

impl ClassSignatures {
    /// Unit-norm Gaussian directions, one per class.
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Vec::with_capacity(NUM_CLASSES * channels);
        for _ in 0..NUM_CLASSES {
            let v: Vec<f64> = (0..channels)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            vectors.extend(v.iter().map(|x| x / n));
        }
        Self { channels, vectors }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, class_id: usize) -> &[f64] {
        &self.vectors[class_id * self.channels..(class_id + 1) * self.channels]
    }
}

/// `V × H_v × W_v × C_in` features, row-major, with a per-view availability bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ViewFeatures {
    pub fn zeros(rig: &CameraRig) -> Self {
        Self {
            views: rig.views,
            height: rig.view_h,
            width: rig.view_w,
            channels: rig.channels,
            data: vec![0.0; rig.views * rig.view_h * rig.view_w * rig.channels],
            mask: vec![true; rig.views],
        }
    }

    pub fn view_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn view(&self, k: usize) -> &[f64] {
        let n = self.view_len();
        &self.data[k * n..(k + 1) * n]
    }

    fn view_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.view_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn available_views(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Renders every instance inside the perception range into the view whose
/// sector holds its bearing.
pub fn render_views(
    scene: &GtScene,
    rig: &CameraRig,
    geometry: &SceneGeometry,
    signatures: &ClassSignatures,
    noise_sigma: f64,
    seed: u64,
) -> ViewFeatures {
    assert_eq!(
        signatures.channels(),
        rig.channels,
        "signature width must match the rig"
    );
    let mut out = ViewFeatures::zeros(rig);
    let max_range = geometry.range * SQRT_2;
    let inv_two_var = 1.0 / (2.0 * rig.blob_sigma * rig.blob_sigma);
    let c_in = rig.channels;

    for inst in &scene.instances {
        let (x, y) = (inst.center[0], inst.center[1]);
        if !geometry.contains(x, y) {
            continue;
        }
        let range = x.hypot(y);
        let (view, frac) = rig.sector_of(y.atan2(x));
        let col_f = frac * rig.view_w as f64 - 0.5;
        let row_f = (range / max_range).min(1.0) * rig.view_h as f64 - 0.5;
        let sig = signatures.get(inst.class_id);
        let gain = 1.0 / (1.0 + 0.05 * range);
        let width = rig.view_w;
        let dst = out.view_mut(view);
        for row in 0..rig.view_h {
            let dr = row as f64 - row_f;
            for col in 0..width {
                let dc = col as f64 - col_f;
                let w = gain * (-(dr * dr + dc * dc) * inv_two_var).exp();
                let cell = &mut dst[(row * width + col) * c_in..(row * width + col + 1) * c_in];
                for (d, s) in cell.iter_mut().zip(sig) {
                    *d += w * s;
                }
            }
        }
    }

    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("finite noise level");
        for v in &mut out.data {
            *v += normal.sample(&mut rng);
        }
    }
    out
}

/// Copy of `views` with view `index` zeroed and marked unavailable.
pub fn mask_view(views: &ViewFeatures, index: usize) -> Result<ViewFeatures, SceneError> {
    if index >= views.views {
        return Err(SceneError::ViewIndex {
            index,
            views: views.views,
        });
    }
    let mut out = views.clone();
    out.view_mut(index).fill(0.0);
    out.mask[index] = false;
    Ok(out)
}
