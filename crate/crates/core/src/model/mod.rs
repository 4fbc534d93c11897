//! BEV detector: view tokens → BEV encoder → query decoder → prediction head.
//!
//! Parameters live in a flat [`ParamStore`]; [`DetectorLayout`] names the
//! tensors each block reads. A forward pass binds the store onto a
//! [`Graph`] (trainable or constant) and composes graph primitives, so the
//! same code serves training and inference.

pub mod boxes;
pub mod checkpoint;
mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{CameraRig, SceneGeometry, ViewFeatures, NUM_ATTRIBUTES, NUM_CLASSES};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};
use crate::Scalar;

pub use boxes::{box_targets, decode_box, detections, encode_box, BOX_DIM};
use layers::{attention, ffn, linear, norm};
pub(crate) use params::Builder;
pub use params::{glorot_sigma, Attention, Bound, Linear, Norm, ParamId, ParamStore};

/// Standard deviation of the truncated-normal embedding initialisation;
/// linear layers use the Glorot scale.
pub const INIT_SIGMA: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub num_queries: usize,
    pub ffn: usize,
    pub ln_eps: f64,
    /// Length scale, in metres, of the fixed cross-attention prior that
    /// favours view tokens whose ground position lies near the BEV cell;
    /// 0 disables the prior.
    pub projection_sigma: f64,
    pub geometry: SceneGeometry,
    pub rig: CameraRig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            num_queries: 30,
            ffn: 64,
            ln_eps: 1e-5,
            projection_sigma: 3.0,
            geometry: SceneGeometry::default(),
            rig: CameraRig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            ));
        }
        if self.num_queries < self.geometry.max_instances {
            return Err(format!(
                "num_queries ({}) must be at least max_instances ({})",
                self.num_queries, self.geometry.max_instances
            ));
        }
        if self.ffn == 0 {
            return Err("ffn width must be positive".into());
        }
        if !(self.projection_sigma >= 0.0 && self.projection_sigma.is_finite()) {
            return Err(format!(
                "projection_sigma ({}) must be finite and non-negative",
                self.projection_sigma
            ));
        }
        self.geometry.validate().map_err(|e| e.to_string())?;
        self.rig.validate().map_err(|e| e.to_string())
    }

    pub fn num_tokens(&self) -> usize {
        self.rig.views * self.rig.tokens_per_view()
    }

    /// Ground-plane centre `(x, y)` of token `t` of view `k`: the range and
    /// bearing at which the renderer centres a blob on that token.
    pub fn token_ground_position(&self, k: usize, t: usize) -> (f64, f64) {
        let r = &self.rig;
        let (row, col) = (t / r.view_w, t % r.view_w);
        let range =
            (row as f64 + 0.5) / r.view_h as f64 * self.geometry.range * std::f64::consts::SQRT_2;
        let w = r.sector_width();
        let bearing = r.sector_center(k) - 0.5 * w + (col as f64 + 0.5) / r.view_w as f64 * w;
        (range * bearing.cos(), range * bearing.sin())
    }

    /// `[cells, tokens]` encoder cross-attention prior
    /// `−d² / (2σ²)` between each cell centre and each token's ground
    /// position, for the tokens of `token_views` in order.
    pub fn projection_bias(&self, token_views: &[usize]) -> Vec<f64> {
        let geo = &self.geometry;
        let per_view = self.rig.tokens_per_view();
        let tokens: Vec<(f64, f64)> = token_views
            .iter()
            .flat_map(|&k| (0..per_view).map(move |t| (k, t)))
            .map(|(k, t)| self.token_ground_position(k, t))
            .collect();
        let inv = if self.projection_sigma > 0.0 {
            1.0 / (2.0 * self.projection_sigma * self.projection_sigma)
        } else {
            0.0
        };
        let mut out = Vec::with_capacity(geo.num_cells() * tokens.len());
        for row in 0..geo.bev_h {
            for col in 0..geo.bev_w {
                let (cx, cy) = geo.cell_center(row, col);
                out.extend(
                    tokens
                        .iter()
                        .map(|&(x, y)| -((x - cx).powi(2) + (y - cy).powi(2)) * inv),
                );
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub cross: Attention,
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm3: Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: Norm,
    pub cross: Attention,
    pub norm2: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm3: Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadLayout {
    pub cls_hidden: Linear,
    pub cls_out: Linear,
    pub attr_out: Linear,
    pub reg_hidden: Linear,
    pub reg_out: Linear,
    pub reference: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorLayout {
    pub token_proj: Linear,
    pub view_pos: ParamId,
    pub bev_pos: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub query_embed: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub head: HeadLayout,
}

/// How masked views are kept out of the encoder's cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewMasking {
    /// Masked views' tokens are never built.
    ExcludeKeys,
    /// All tokens are built; masked keys get a `-inf`-like score bias.
    ScoreBias,
}

/// BEV map `[H_b·W_b, C]` (row-major cells) plus encoder diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct BevOutput {
    pub z: Var,
    /// True when every view was masked and `z` is the positional embedding.
    pub all_views_masked: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[n, K + 1]`, last column is no-object.
    pub logits: Var,
    /// `[n, 2]`.
    pub attr_logits: Var,
    /// `[n, 10]` regression-space boxes.
    pub boxes: Var,
}

/// Plain-value head outputs for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions<T> {
    pub logits: Tensor<T>,
    pub attr_logits: Tensor<T>,
    pub boxes: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector<T> {
    pub config: ModelConfig,
    pub layout: DetectorLayout,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: ModelConfig, seed: u64) -> std::result::Result<Self, String> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            sigma: INIT_SIGMA,
        };
        let c = config.channels;
        let f = config.ffn;
        let token_proj = b.linear("tokens.proj", config.rig.channels, c);
        let view_pos = b.weight("tokens.view_pos", &[config.num_tokens(), c]);
        let bev_pos = b.weight("bev.pos", &[config.geometry.num_cells(), c]);
        let encoder = (0..config.enc_layers)
            .map(|l| {
                let n = format!("enc.{l}");
                EncoderLayer {
                    cross: b.attention(&format!("{n}.cross"), c),
                    norm1: b.norm(&format!("{n}.norm1"), c),
                    self_attn: b.attention(&format!("{n}.self"), c),
                    norm2: b.norm(&format!("{n}.norm2"), c),
                    ffn1: b.linear(&format!("{n}.ffn1"), c, f),
                    ffn2: b.linear(&format!("{n}.ffn2"), f, c),
                    norm3: b.norm(&format!("{n}.norm3"), c),
                }
            })
            .collect();
        let query_embed = b.weight("dec.queries", &[config.num_queries, c]);
        let decoder = (0..config.dec_layers)
            .map(|l| {
                let n = format!("dec.{l}");
                DecoderLayer {
                    self_attn: b.attention(&format!("{n}.self"), c),
                    norm1: b.norm(&format!("{n}.norm1"), c),
                    cross: b.attention(&format!("{n}.cross"), c),
                    norm2: b.norm(&format!("{n}.norm2"), c),
                    ffn1: b.linear(&format!("{n}.ffn1"), c, f),
                    ffn2: b.linear(&format!("{n}.ffn2"), f, c),
                    norm3: b.norm(&format!("{n}.norm3"), c),
                }
            })
            .collect();
        let head = HeadLayout {
            cls_hidden: b.linear("head.cls_hidden", c, c),
            cls_out: b.linear("head.cls_out", c, NUM_CLASSES + 1),
            attr_out: b.linear("head.attr_out", c, NUM_ATTRIBUTES),
            reg_hidden: b.linear("head.reg_hidden", c, c),
            reg_out: b.linear("head.reg_out", c, BOX_DIM),
            reference: b.linear("head.ref", c, c),
        };
        Ok(Self {
            config,
            layout: DetectorLayout {
                token_proj,
                view_pos,
                bev_pos,
                encoder,
                query_embed,
                decoder,
                head,
            },
            params: store,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn eps(&self) -> T {
        T::lit(self.config.ln_eps)
    }

    fn check_views(&self, views: &ViewFeatures) -> Result<()> {
        let r = &self.config.rig;
        if (views.views, views.height, views.width, views.channels)
            != (r.views, r.view_h, r.view_w, r.channels)
        {
            return Err(TensorError::ShapeMismatch {
                op: "bev_encode",
                lhs: vec![r.views, r.view_h, r.view_w, r.channels],
                rhs: vec![views.views, views.height, views.width, views.channels],
            });
        }
        Ok(())
    }

    pub fn bev_encode(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        views: &ViewFeatures,
    ) -> Result<BevOutput> {
        self.bev_encode_with(g, p, views, ViewMasking::ExcludeKeys)
    }

    pub fn bev_encode_with(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        views: &ViewFeatures,
        masking: ViewMasking,
    ) -> Result<BevOutput> {
        self.check_views(views)?;
        let lay = &self.layout;
        let bev_pos = p.var(lay.bev_pos);
        let per_view = self.config.rig.tokens_per_view();
        let c_in = views.channels;
        let kept: Vec<usize> = (0..views.views).filter(|&k| views.mask[k]).collect();
        if kept.is_empty() {
            return Ok(BevOutput {
                z: bev_pos,
                all_views_masked: true,
            });
        }

        let token_views: Vec<usize> = match masking {
            ViewMasking::ExcludeKeys => kept.clone(),
            ViewMasking::ScoreBias => (0..views.views).collect(),
        };
        let cells = self.config.geometry.num_cells();
        let n_keys = token_views.len() * per_view;
        let mut bias_data = if self.config.projection_sigma > 0.0 {
            self.config.projection_bias(&token_views)
        } else {
            vec![0.0; cells * n_keys]
        };
        if masking == ViewMasking::ScoreBias {
            for cell in bias_data.chunks_mut(n_keys) {
                for (k, keys) in cell.chunks_mut(per_view).enumerate() {
                    if !views.mask[k] {
                        keys.fill(-1e30);
                    }
                }
            }
        }
        let bias = if self.config.projection_sigma > 0.0 || masking == ViewMasking::ScoreBias {
            Some(g.constant(Tensor::from_f64(&[cells, n_keys], &bias_data)?))
        } else {
            None
        };
        let feats: Vec<T> = token_views
            .iter()
            .flat_map(|&k| views.view(k).iter().map(|&v| T::lit(v)))
            .collect();
        let n_tok = token_views.len() * per_view;
        let feats = g.constant(Tensor::new(vec![n_tok, c_in], feats)?);
        let tok = linear(g, p, lay.token_proj, feats)?;
        let pos_rows: Vec<usize> = token_views
            .iter()
            .flat_map(|&k| k * per_view..(k + 1) * per_view)
            .collect();
        let view_pos = g.gather_rows(p.var(lay.view_pos), &pos_rows)?;
        let tokens = g.add(tok, view_pos)?;

        let heads = self.config.heads;
        let eps = self.eps();
        let mut x = bev_pos;
        for layer in &lay.encoder {
            let q = g.add(x, bev_pos)?;
            let a = attention(g, p, layer.cross, heads, q, tokens, tokens, bias)?;
            let r = g.add(x, a)?;
            x = norm(g, p, layer.norm1, r, eps)?;

            let qk = g.add(x, bev_pos)?;
            let a = attention(g, p, layer.self_attn, heads, qk, qk, x, None)?;
            let r = g.add(x, a)?;
            x = norm(g, p, layer.norm2, r, eps)?;

            let h = ffn(g, p, layer.ffn1, layer.ffn2, x)?;
            let r = g.add(x, h)?;
            x = norm(g, p, layer.norm3, r, eps)?;
        }
        Ok(BevOutput {
            z: x,
            all_views_masked: false,
        })
    }

    /// The learned decoder queries `[N_q, C]`.
    pub fn learned_queries(&self, p: &Bound) -> Var {
        p.var(self.layout.query_embed)
    }

    /// Refines `queries: [n, C]` against the BEV map. Queries attend only to
    /// each other and to BEV cells; there is no query positional term.
    pub fn decode(&self, g: &mut Graph<T>, p: &Bound, bev: Var, queries: Var) -> Result<Var> {
        let c = self.config.channels;
        if g.shape(queries).len() != 2 || g.shape(queries)[1] != c {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: vec![0, c],
                rhs: g.shape(queries).to_vec(),
            });
        }
        let heads = self.config.heads;
        let eps = self.eps();
        let keys = g.add(bev, p.var(self.layout.bev_pos))?;
        let mut q = queries;
        for layer in &self.layout.decoder {
            let a = attention(g, p, layer.self_attn, heads, q, q, q, None)?;
            let r = g.add(q, a)?;
            q = norm(g, p, layer.norm1, r, eps)?;

            let a = attention(g, p, layer.cross, heads, q, keys, bev, None)?;
            let r = g.add(q, a)?;
            q = norm(g, p, layer.norm2, r, eps)?;

            let h = ffn(g, p, layer.ffn1, layer.ffn2, q)?;
            let r = g.add(q, h)?;
            q = norm(g, p, layer.norm3, r, eps)?;
        }
        Ok(q)
    }

    /// Normalised `(x, y)` centres of the BEV cells, `[cells, 2]`.
    fn cell_centres(&self) -> Tensor<T> {
        let geo = &self.config.geometry;
        let mut data = Vec::with_capacity(geo.num_cells() * 2);
        for row in 0..geo.bev_h {
            for col in 0..geo.bev_w {
                data.push((col as f64 + 0.5) / geo.bev_w as f64);
                data.push((row as f64 + 0.5) / geo.bev_h as f64);
            }
        }
        Tensor::from_f64(&[geo.num_cells(), 2], &data).expect("cell centre shape")
    }

    /// Class, attribute and box outputs for decoded `queries`. Each query
    /// places a reference point as an attention-weighted mean of cell
    /// centres; the regression branch offsets it in logit space.
    pub fn head(&self, g: &mut Graph<T>, p: &Bound, bev: Var, queries: Var) -> Result<HeadOutput> {
        let h = &self.layout.head;
        let hc = linear(g, p, h.cls_hidden, queries)?;
        let hc = g.relu(hc);
        let logits = linear(g, p, h.cls_out, hc)?;
        let attr_logits = linear(g, p, h.attr_out, hc)?;
        let hr = linear(g, p, h.reg_hidden, queries)?;
        let hr = g.relu(hr);
        let raw = linear(g, p, h.reg_out, hr)?;

        let keys = g.add(bev, p.var(self.layout.bev_pos))?;
        let rq = linear(g, p, h.reference, queries)?;
        let kt = g.transpose(keys)?;
        let scores = g.matmul(rq, kt)?;
        let scores = g.scale(scores, T::lit(1.0 / (self.config.channels as f64).sqrt()));
        let weights = g.softmax(scores, 1)?;
        let centres = g.constant(self.cell_centres());
        let reference = g.matmul(weights, centres)?;
        let log_ref = g.log(reference);
        let one_minus = g.scale(reference, T::lit(-1.0));
        let one_minus = g.add_scalar(one_minus, T::lit(1.0));
        let log_rest = g.log(one_minus);
        let ref_logit = g.sub(log_ref, log_rest)?;

        let delta = g.slice(raw, 1, 0, 2)?;
        let xy = g.add(ref_logit, delta)?;
        let xy = g.sigmoid(xy);
        let rest = g.slice(raw, 1, 2, BOX_DIM)?;
        let boxes = g.concat(&[xy, rest], 1)?;
        Ok(HeadOutput {
            logits,
            attr_logits,
            boxes,
        })
    }

    /// Full learned-query forward pass.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        views: &ViewFeatures,
    ) -> Result<(BevOutput, HeadOutput)> {
        let bev = self.bev_encode(g, p, views)?;
        let q = self.decode(g, p, bev.z, self.learned_queries(p))?;
        let out = self.head(g, p, bev.z, q)?;
        Ok((bev, out))
    }

    /// Inference on a fresh graph with constant parameters.
    pub fn predict(&self, views: &ViewFeatures) -> Result<Predictions<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (_, out) = self.forward(&mut g, &p, views)?;
        Ok(Predictions {
            logits: g.value(out.logits).clone(),
            attr_logits: g.value(out.attr_logits).clone(),
            boxes: g.value(out.boxes).clone(),
        })
    }
}
