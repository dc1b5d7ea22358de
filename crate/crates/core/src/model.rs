//! Encoder, feature pyramid and prediction heads.
//!
//! Every encoder block runs temporal attention (over frames) and channel
//! attention (over feature channels) side by side on the same input, mixes
//! them as `(1 - theta) * temporal + theta * channel`, and then applies a
//! post-norm residual layer norm / feedforward stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Matrix, ParamId, ParamSet, Var};
use crate::sensitivity::{EvaluatorIds, SensitivityIds};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels `D`.
    pub dim: usize,
    pub num_classes: usize,
    /// Pyramid levels `L`.
    pub levels: usize,
    /// Encoder blocks applied before the pyramid.
    pub encoder_blocks: usize,
    /// Channel-attention mixing weight.
    pub theta: f64,
    /// Initial foreground probability of the classification head.
    pub prior_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { dim: 32, num_classes: 3, levels: 4, encoder_blocks: 1, theta: 0.2, prior_prob: 0.01 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes == 0 || self.levels == 0 || self.encoder_blocks == 0 {
            return Err(Error::InvalidArgument("dim, num_classes, levels and encoder_blocks must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidArgument(format!("theta {} outside [0, 1]", self.theta)));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::InvalidArgument("prior_prob must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Shortest sequence the pyramid accepts: `2^(L-1)`.
    pub fn min_len(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Parameter ids of one encoder block.
#[derive(Clone, Debug)]
pub struct BlockIds {
    pub q_t: ParamId,
    pub k_t: ParamId,
    pub v_t: ParamId,
    pub q_d: ParamId,
    pub k_d: ParamId,
    pub v_d: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Kernel-3, same-padded temporal convolution.
#[derive(Clone, Debug)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct HeadIds {
    pub cls_conv: ConvIds,
    pub cls_out: ConvIds,
    pub reg_conv: ConvIds,
    pub reg_out: ConvIds,
}

/// Where every component's parameters live in the [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub encoder: Vec<BlockIds>,
    /// One block per pyramid level above level 0.
    pub pyramid: Vec<BlockIds>,
    pub heads: HeadIds,
    pub sensitivity: SensitivityIds,
    pub evaluator_cls: EvaluatorIds,
    pub evaluator_loc: EvaluatorIds,
}

/// Model configuration, parameters and their layout.
#[derive(Clone, Debug)]
pub struct AslModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub layout: Layout,
}

pub(crate) struct Init<'a> {
    pub params: &'a mut ParamSet,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `+-1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let m = Matrix::from_fn(rows, cols, |_, _| self.rng.gen_range(-bound..bound));
        self.params.add(name, m)
    }

    pub fn constant(&mut self, name: String, rows: usize, cols: usize, value: f64) -> ParamId {
        self.params.add(name, Matrix::filled(rows, cols, value))
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> ConvIds {
        ConvIds {
            weight: self.uniform(format!("{name}.weight"), 3 * c_in, c_out, 3 * c_in),
            bias: self.uniform(format!("{name}.bias"), 1, c_out, 3 * c_in),
        }
    }

    fn block(&mut self, name: &str, dim: usize) -> BlockIds {
        let hidden = 4 * dim;
        let proj = |s: &str, init: &mut Self| init.uniform(format!("{name}.{s}"), dim, dim, dim);
        BlockIds {
            q_t: proj("q_t", self),
            k_t: proj("k_t", self),
            v_t: proj("v_t", self),
            q_d: proj("q_d", self),
            k_d: proj("k_d", self),
            v_d: proj("v_d", self),
            ln1_gain: self.constant(format!("{name}.ln1.gain"), 1, dim, 1.0),
            ln1_bias: self.constant(format!("{name}.ln1.bias"), 1, dim, 0.0),
            ffn_w1: self.uniform(format!("{name}.ffn.w1"), dim, hidden, dim),
            ffn_b1: self.uniform(format!("{name}.ffn.b1"), 1, hidden, dim),
            ffn_w2: self.uniform(format!("{name}.ffn.w2"), hidden, dim, hidden),
            ffn_b2: self.uniform(format!("{name}.ffn.b2"), 1, dim, hidden),
            ln2_gain: self.constant(format!("{name}.ln2.gain"), 1, dim, 1.0),
            ln2_bias: self.constant(format!("{name}.ln2.bias"), 1, dim, 0.0),
        }
    }
}

impl AslModel {
    /// Fresh model with seeded fan-in-scaled uniform weights and the
    /// documented sensitivity initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init { params: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let d = config.dim;
        let encoder = (0..config.encoder_blocks).map(|b| init.block(&format!("encoder.{b}"), d)).collect();
        let pyramid = (1..config.levels).map(|l| init.block(&format!("pyramid.{l}"), d)).collect();
        let heads = HeadIds {
            cls_conv: init.conv("head.cls.conv", d, d),
            cls_out: init.conv("head.cls.out", d, config.num_classes),
            reg_conv: init.conv("head.reg.conv", d, d),
            reg_out: init.conv("head.reg.out", d, 2),
        };
        let prior_bias = -((1.0 - config.prior_prob) / config.prior_prob).ln();
        init.params.get_mut(heads.cls_out.bias).value.fill(prior_bias);
        let sensitivity = SensitivityIds::init(&mut init, config.num_classes);
        let evaluator_cls = EvaluatorIds::init(&mut init, "evaluator.cls", d);
        let evaluator_loc = EvaluatorIds::init(&mut init, "evaluator.loc", d);
        let layout = Layout { encoder, pyramid, heads, sensitivity, evaluator_cls, evaluator_loc };
        Ok(AslModel { config, params, layout })
    }

    /// Rebuilds a model from saved parameters, checking every name and shape.
    pub fn from_params(config: ModelConfig, mut saved: ParamSet) -> Result<Self> {
        let mut model = AslModel::new(config, 0)?;
        if saved.len() != model.params.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter count mismatch: expected {}, found {}",
                model.params.len(),
                saved.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.get(id).id.clone();
            let src = saved.find(&name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            let value = std::mem::replace(&mut saved.get_mut(src).value, Matrix::zeros(0, 0));
            if value.shape() != model.params.value(id).shape() || !value.is_finite() {
                return Err(Error::Shape(format!("parameter {name} has shape {:?}", value.shape())));
            }
            model.params.get_mut(id).value = value;
        }
        model.params.ensure_grads();
        Ok(model)
    }

    /// Places every parameter on `g` as a leaf; indexed by [`ParamId`].
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|p| g.leaf(p.value.clone())).collect())
    }

    /// Encoder output and pyramid levels for one `T x D` sequence.
    pub fn pyramid(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Vec<Var>> {
        let (len, dim) = g.value(features).shape();
        if dim != self.config.dim {
            return Err(Error::Shape(format!("expected {} feature channels, got {dim}", self.config.dim)));
        }
        if len < self.config.min_len() {
            return Err(Error::SequenceTooShort { len, levels: self.config.levels, min_len: self.config.min_len() });
        }
        let mut x = features;
        for block in &self.layout.encoder {
            x = encoder_block(g, b, block, x, self.config.theta);
        }
        let mut levels = vec![x];
        for block in &self.layout.pyramid {
            let pooled = g.max_pool2(*levels.last().unwrap());
            levels.push(encoder_block(g, b, block, pooled, self.config.theta));
        }
        Ok(levels)
    }

    /// Per-level logits (`T_l x N_c`) and nonnegative offsets (`T_l x 2`, in
    /// stride units). Head weights are shared across levels.
    pub fn predict_heads(&self, g: &mut Graph, b: &Bound, levels: &[Var]) -> Vec<LevelPrediction> {
        let h = &self.layout.heads;
        levels
            .iter()
            .map(|&x| {
                let c = conv1d(g, b, &h.cls_conv, x);
                let c = g.gelu(c);
                let logits = conv1d(g, b, &h.cls_out, c);
                let r = conv1d(g, b, &h.reg_conv, x);
                let r = g.gelu(r);
                let r = conv1d(g, b, &h.reg_out, r);
                let offsets = g.softplus(r);
                LevelPrediction { logits, offsets }
            })
            .collect()
    }

    /// Full forward pass for one video.
    pub fn forward(&self, g: &mut Graph, b: &Bound, features: &Matrix) -> Result<VideoForward> {
        let x = g.leaf(features.clone());
        let levels = self.pyramid(g, b, x)?;
        let predictions = self.predict_heads(g, b, &levels);
        Ok(VideoForward { levels, predictions })
    }

    /// Plain-value predictions for inference.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<LevelOutput>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let fwd = self.forward(&mut g, &b, features)?;
        Ok(fwd
            .predictions
            .iter()
            .enumerate()
            .map(|(l, p)| LevelOutput {
                stride: 1 << l,
                logits: g.value(p.logits).clone(),
                offsets: g.value(p.offsets).clone(),
            })
            .collect())
    }
}

/// Parameter leaves of one graph.
pub struct Bound(pub Vec<Var>);

impl Bound {
    #[inline]
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LevelPrediction {
    pub logits: Var,
    pub offsets: Var,
}

pub struct VideoForward {
    pub levels: Vec<Var>,
    pub predictions: Vec<LevelPrediction>,
}

/// Detached predictions of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub stride: usize,
    pub logits: Matrix,
    pub offsets: Matrix,
}

pub(crate) fn conv1d(g: &mut Graph, b: &Bound, conv: &ConvIds, x: Var) -> Var {
    let cols = g.im2col3(x);
    let y = g.matmul(cols, b.get(conv.weight));
    g.add_row(y, b.get(conv.bias))
}

/// `softmax(Q_t K_t^T / sqrt(D)) V_t`
pub fn temporal_attention(g: &mut Graph, b: &Bound, block: &BlockIds, x: Var) -> Var {
    let dim = g.value(x).cols();
    let q = g.matmul(x, b.get(block.q_t));
    let k = g.matmul(x, b.get(block.k_t));
    let v = g.matmul(x, b.get(block.v_t));
    let scores = g.matmul_nt(q, k);
    let scores = g.scale(scores, 1.0 / (dim as f64).sqrt());
    let attn = g.softmax_rows(scores);
    g.matmul(attn, v)
}

/// Attention over channels: `softmax(Q_d K_d^T / sqrt(T)) V_d` with
/// `D x T` queries/keys/values, returned transposed back to `T x D`.
pub fn channel_attention(g: &mut Graph, b: &Bound, block: &BlockIds, x: Var) -> Var {
    let len = g.value(x).rows();
    // rows of Q_d are columns of x W_q
    let q = g.matmul(x, b.get(block.q_d));
    let k = g.matmul(x, b.get(block.k_d));
    let v = g.matmul(x, b.get(block.v_d));
    let scores = g.matmul_t(q, true, k, false);
    let scores = g.scale(scores, 1.0 / (len as f64).sqrt());
    let attn = g.softmax_rows(scores);
    // (A V_d)^T = (x W_v) A^T
    g.matmul_nt(v, attn)
}

/// `(1 - theta) * temporal + theta * channel`, before normalization.
pub fn fused_attention(g: &mut Graph, b: &Bound, block: &BlockIds, x: Var, theta: f64) -> Var {
    let ta = temporal_attention(g, b, block, x);
    let ca = channel_attention(g, b, block, x);
    let ta = g.scale(ta, 1.0 - theta);
    let ca = g.scale(ca, theta);
    g.add(ta, ca)
}

/// One encoder block: `y = LN(x + fused(x))`, `out = LN(y + FFN(y))`.
pub fn encoder_block(g: &mut Graph, b: &Bound, block: &BlockIds, x: Var, theta: f64) -> Var {
    let f = fused_attention(g, b, block, x, theta);
    let r = g.add(x, f);
    let y = g.layer_norm(r, b.get(block.ln1_gain), b.get(block.ln1_bias));
    let h = g.matmul(y, b.get(block.ffn_w1));
    let h = g.add_row(h, b.get(block.ffn_b1));
    let h = g.gelu(h);
    let h = g.matmul(h, b.get(block.ffn_w2));
    let h = g.add_row(h, b.get(block.ffn_b2));
    let r = g.add(y, h);
    g.layer_norm(r, b.get(block.ln2_gain), b.get(block.ln2_bias))
}
