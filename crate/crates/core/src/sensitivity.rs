//! Action sensitivity: how much each in-action frame should count for
//! classification and for localization.
//!
//! Two sources are combined per frame:
//!
//! * class level: learnable Gaussians over the normalized in-instance
//!   position `d`: one for classification, one each for the start and end
//!   boundaries;
//! * instance level: a small convolutional evaluator over the instance's
//!   own frames, regressed onto the quality of the current predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{conv1d, AslModel, Bound, ConvIds, Init};
use crate::numerics::{sigmoid, Graph, Matrix, ParamId, ParamSet, Var};
use crate::segment::Segment;

pub const SIGMA_MIN: f64 = 0.1;
pub const SIGMA_MAX: f64 = 5.0;
/// Grid size of exported sensitivity curves.
pub const CURVE_SAMPLES: usize = 101;

/// Parameter ids of the class-level Gaussians; each is an `N_c x 1` column.
#[derive(Clone, Debug)]
pub struct SensitivityIds {
    pub mu_cls: ParamId,
    pub sigma_cls: ParamId,
    pub mu_sot: ParamId,
    pub sigma_sot: ParamId,
    pub mu_eot: ParamId,
    pub sigma_eot: ParamId,
}

impl SensitivityIds {
    pub(crate) fn init(init: &mut Init<'_>, num_classes: usize) -> Self {
        let mut col = |name: &str, v: f64| init.constant(format!("sensitivity.{name}"), num_classes, 1, v);
        SensitivityIds {
            mu_cls: col("mu_cls", 0.0),
            sigma_cls: col("sigma_cls", 1.0),
            mu_sot: col("mu_sot", -0.5),
            sigma_sot: col("sigma_sot", 1.0),
            mu_eot: col("mu_eot", 0.5),
            sigma_eot: col("sigma_eot", 1.0),
        }
    }

    pub fn sigmas(&self) -> [ParamId; 3] {
        [self.sigma_cls, self.sigma_sot, self.sigma_eot]
    }
}

/// Snapshot of the class-level Gaussian parameters, indexed by class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityParams {
    pub mu_cls: Vec<f64>,
    pub sigma_cls: Vec<f64>,
    pub mu_sot: Vec<f64>,
    pub sigma_sot: Vec<f64>,
    pub mu_eot: Vec<f64>,
    pub sigma_eot: Vec<f64>,
}

impl SensitivityParams {
    pub fn from_params(params: &ParamSet, ids: &SensitivityIds) -> Self {
        let v = |id| params.value(id).data().to_vec();
        SensitivityParams {
            mu_cls: v(ids.mu_cls),
            sigma_cls: v(ids.sigma_cls),
            mu_sot: v(ids.mu_sot),
            sigma_sot: v(ids.sigma_sot),
            mu_eot: v(ids.mu_eot),
            sigma_eot: v(ids.sigma_eot),
        }
    }

    pub fn of(model: &AslModel) -> Self {
        Self::from_params(&model.params, &model.layout.sensitivity)
    }

    /// Initial values for `num_classes` classes.
    pub fn initial(num_classes: usize) -> Self {
        SensitivityParams {
            mu_cls: vec![0.0; num_classes],
            sigma_cls: vec![1.0; num_classes],
            mu_sot: vec![-0.5; num_classes],
            sigma_sot: vec![1.0; num_classes],
            mu_eot: vec![0.5; num_classes],
            sigma_eot: vec![1.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.mu_cls.len()
    }
}

#[inline]
pub fn gaussian(d: f64, mu: f64, sigma: f64) -> f64 {
    (-(d - mu) * (d - mu) / (2.0 * sigma * sigma)).exp()
}

/// Classification sensitivity `p^cls` at position `d` for class `class`.
pub fn class_sensitivity_cls(d: f64, class: usize, p: &SensitivityParams) -> f64 {
    gaussian(d, p.mu_cls[class], p.sigma_cls[class])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocSensitivity {
    pub sot: f64,
    pub eot: f64,
    /// `sot + eot`
    pub loc: f64,
}

/// Start, end and combined localization sensitivity at position `d`.
pub fn class_sensitivity_loc(d: f64, class: usize, p: &SensitivityParams) -> LocSensitivity {
    let sot = gaussian(d, p.mu_sot[class], p.sigma_sot[class]);
    let eot = gaussian(d, p.mu_eot[class], p.sigma_eot[class]);
    LocSensitivity { sot, eot, loc: sot + eot }
}

/// Projects every sigma into `[SIGMA_MIN, SIGMA_MAX]`.
pub fn clamp_sigma(params: &mut ParamSet, ids: &SensitivityIds) {
    for id in ids.sigmas() {
        params.get_mut(id).value.data_mut().iter_mut().for_each(|s| *s = s.clamp(SIGMA_MIN, SIGMA_MAX));
    }
}

/// Graph nodes of `p^cls`, `p^sot`, `p^eot` for frames with the given
/// classes and center distances; each is `n x 1`.
pub fn class_sensitivity_nodes(
    g: &mut Graph,
    b: &Bound,
    ids: &SensitivityIds,
    classes: &[usize],
    distances: &[f64],
) -> [Var; 3] {
    let d = g.leaf(Matrix::column(distances));
    let mut curve = |mu: ParamId, sigma: ParamId| {
        let mu = g.select_rows(b.get(mu), classes.to_vec());
        let sigma = g.select_rows(b.get(sigma), classes.to_vec());
        let diff = g.sub(d, mu);
        let num = g.square(diff);
        let den = g.square(sigma);
        let den = g.scale(den, 2.0);
        let ratio = g.div(num, den);
        let neg = g.scale(ratio, -1.0);
        g.exp(neg)
    };
    [curve(ids.mu_cls, ids.sigma_cls), curve(ids.mu_sot, ids.sigma_sot), curve(ids.mu_eot, ids.sigma_eot)]
}

/// Sampled sensitivity curves of one class over `d` in `[-0.5, 0.5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityCurves {
    pub class: usize,
    pub d: Vec<f64>,
    pub p_cls: Vec<f64>,
    pub p_sot: Vec<f64>,
    pub p_eot: Vec<f64>,
}

/// Evenly spaced positions `-0.5, -0.49, ..., 0.5`.
pub fn curve_grid() -> Vec<f64> {
    (0..CURVE_SAMPLES).map(|k| k as f64 / (CURVE_SAMPLES - 1) as f64 - 0.5).collect()
}

pub fn export_sensitivity_curves(p: &SensitivityParams, class: usize) -> Result<SensitivityCurves> {
    if class >= p.num_classes() {
        return Err(Error::UnknownClass { class, num_classes: p.num_classes() });
    }
    let d = curve_grid();
    let p_cls = d.iter().map(|&x| class_sensitivity_cls(x, class, p)).collect();
    let (p_sot, p_eot) = d
        .iter()
        .map(|&x| {
            let l = class_sensitivity_loc(x, class, p);
            (l.sot, l.eot)
        })
        .unzip();
    Ok(SensitivityCurves { class, d, p_cls, p_sot, p_eot })
}

impl SensitivityCurves {
    /// CSV with header `d,p_cls,p_sot,p_eot` and 6 decimals per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("d,p_cls,p_sot,p_eot\n");
        for k in 0..self.d.len() {
            out.push_str(&format!("{:.6},{:.6},{:.6},{:.6}\n", self.d[k], self.p_cls[k], self.p_sot[k], self.p_eot[k]));
        }
        out
    }

    /// Position of the largest value of a curve (first on ties).
    pub fn argmax(values: &[f64], d: &[f64]) -> f64 {
        let mut best = 0;
        for (k, v) in values.iter().enumerate() {
            if *v > values[best] {
                best = k;
            }
        }
        d[best]
    }
}

/// Instance-level evaluator: kernel-3 conv, GELU, linear `D -> 1`, sigmoid.
#[derive(Clone, Debug)]
pub struct EvaluatorIds {
    pub conv: ConvIds,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl EvaluatorIds {
    pub(crate) fn init(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        EvaluatorIds {
            conv: init.conv(&format!("{name}.conv"), dim, dim),
            fc_weight: init.uniform(format!("{name}.fc.weight"), dim, 1, dim),
            fc_bias: init.uniform(format!("{name}.fc.bias"), 1, 1, dim),
        }
    }

    /// Per-frame sensitivity in `(0, 1)` for the frames of one instance.
    pub fn evaluate(&self, g: &mut Graph, b: &Bound, frames: Var) -> Var {
        let h = conv1d(g, b, &self.conv, frames);
        let h = g.gelu(h);
        let h = g.matmul(h, b.get(self.fc_weight));
        let h = g.add_row(h, b.get(self.fc_bias));
        g.sigmoid(h)
    }
}

/// Instance-level sensitivity `q` of each frame of one instance, given that
/// instance's `N_f x D` features.
pub fn instance_sensitivity(model: &AslModel, evaluator: &EvaluatorIds, frames: &Matrix) -> Vec<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let x = g.leaf(frames.clone());
    let q = evaluator.evaluate(&mut g, &b, x);
    g.value(q).data().to_vec()
}

/// Prediction of one frame: class logits and decoded segment.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub logits: Vec<f64>,
    pub segment: Segment,
}

/// Regression targets of the instance-level evaluator for one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityTargets {
    /// Probability assigned to the ground-truth class.
    pub cls: f64,
    /// tIoU of the predicted and ground-truth segments.
    pub loc: f64,
}

pub fn quality_targets(pred: &FramePrediction, gt_class: usize, gt: &Segment) -> QualityTargets {
    QualityTargets { cls: sigmoid(pred.logits[gt_class]), loc: pred.segment.tiou_unchecked(gt) }
}

/// `h = p + q` for both sub-tasks; `p` is evaluated at the ground-truth class.
pub fn combine(p_cls: f64, p_loc: f64, q_cls: f64, q_loc: f64) -> (f64, f64) {
    (p_cls + q_cls, p_loc + q_loc)
}
