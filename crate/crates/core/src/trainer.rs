//! Optimization loop: forward, loss, backward, clipped update, sigma clamp
//! and per-epoch logging.

use std::io::Write;
use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::GroundTruthInstance;
use crate::data::{batches, Video};
use crate::error::{Error, Result};
use crate::eval::{mean_ap, EvalConfig, MapResult};
use crate::inference::{postprocess, Detection, InferenceConfig};
use crate::losses::{batch_objective, LossConfig, LossReport, VideoSample};
use crate::model::{AslModel, ModelConfig};
use crate::numerics::{finite_difference_gradcheck_terms, GradCheckReport, Matrix, ParamSet, DEFAULT_STEP};
use crate::sensitivity::{clamp_sigma, SensitivityParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Training hyperparameters. `num_classes` and `seed` have no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub num_classes: usize,
    pub seed: u64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    #[serde(default = "defaults::theta")]
    pub theta: f64,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: OptimizerKind,
    /// Global gradient-norm bound; 0 disables clipping.
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    /// Train with sensitivity-weighted losses and the evaluator.
    #[serde(default = "defaults::use_ase")]
    pub use_ase: bool,
    #[serde(default = "defaults::levels")]
    pub levels: usize,
    #[serde(default = "defaults::encoder_blocks")]
    pub encoder_blocks: usize,
}

mod defaults {
    use super::OptimizerKind;
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        4
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn lambda() -> f64 {
        crate::losses::DEFAULT_LAMBDA
    }
    pub fn delta() -> f64 {
        crate::losses::DEFAULT_DELTA
    }
    pub fn theta() -> f64 {
        0.2
    }
    pub fn optimizer() -> OptimizerKind {
        OptimizerKind::Adam
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn use_ase() -> bool {
        true
    }
    pub fn levels() -> usize {
        4
    }
    pub fn encoder_blocks() -> usize {
        1
    }
}

impl TrainConfig {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        TrainConfig {
            num_classes,
            seed,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            lambda: defaults::lambda(),
            delta: defaults::delta(),
            theta: defaults::theta(),
            optimizer: defaults::optimizer(),
            grad_clip: defaults::grad_clip(),
            use_ase: defaults::use_ase(),
            levels: defaults::levels(),
            encoder_blocks: defaults::encoder_blocks(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a nonnegative number");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a nonnegative number");
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1]");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be nonnegative");
        }
        Ok(())
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            dim,
            num_classes: self.num_classes,
            levels: self.levels,
            encoder_blocks: self.encoder_blocks,
            theta: self.theta,
            ..ModelConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda: self.lambda, delta: self.delta, use_ase: self.use_ase, ..LossConfig::default() }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of every loss component.
    pub loss: LossReport,
    pub sensitivity: SensitivityParams,
    /// Average mAP on the held-out set, when one was given.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub average_map: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// JSON lines, one object per epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs.iter().map(|r| serde_json::to_string(r).expect("serializable record") + "\n").collect()
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad train log line: {e}")))?;
        Ok(TrainLog { epochs })
    }
}

/// First- and second-moment state of the optimizer.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Optimizer { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn update(&mut self, params: &mut ParamSet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[k].data_mut();
                    let v = self.v[k].data_mut();
                    for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        params.iter_mut().for_each(|p| p.grad.scale_assign(k));
    }
    norm
}

/// One forward-backward-update cycle. Gradients are zeroed afterwards.
pub fn step(
    model: &mut AslModel,
    optimizer: &mut Optimizer,
    batch: &[VideoSample],
    config: &TrainConfig,
) -> Result<LossReport> {
    let objective = batch_objective(model, batch, &config.loss_config(), None)?;
    objective.write_gradients(model);
    let report = objective.report;
    drop(objective);
    if !model.params.iter().all(|p| p.grad.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    clip_grad_norm(&mut model.params, config.grad_clip);
    optimizer.update(&mut model.params);
    clamp_sigma(&mut model.params, &model.layout.sensitivity);
    model.params.zero_grads();
    Ok(report)
}

pub fn to_samples(videos: &[Video]) -> Vec<VideoSample> {
    videos
        .iter()
        .map(|v| VideoSample { features: v.features.to_matrix(), instances: v.annotation.instances.clone() })
        .collect()
}

/// Held-out data scored after every epoch.
pub struct Validation<'a> {
    pub samples: &'a [VideoSample],
    pub config: EvalConfig,
}

/// Trains a fresh model seeded by `config.seed`.
pub fn train(
    dataset: &[VideoSample],
    config: &TrainConfig,
    validation: Option<&Validation<'_>>,
) -> Result<(AslModel, TrainLog)> {
    config.validate()?;
    let first = dataset.first().ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let mut model = AslModel::new(config.model_config(first.features.cols()), config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_ba7c4);
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        let mut sum = [0.0; 5];
        let order = batches(dataset.len(), config.batch_size, &mut rng);
        for (b, idx) in order.iter().enumerate() {
            let batch: Vec<VideoSample> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let r = step(&mut model, &mut optimizer, &batch, config).map_err(|e| match e {
                Error::NonFinite(component) => Error::Diverged { component, epoch, batch: b },
                other => other,
            })?;
            for (s, v) in sum.iter_mut().zip([r.cls, r.loc, r.sensitivity, r.ascl, r.total]) {
                *s += v;
            }
        }
        let n = order.len() as f64;
        let loss = LossReport {
            cls: sum[0] / n,
            loc: sum[1] / n,
            sensitivity: sum[2] / n,
            ascl: sum[3] / n,
            total: sum[4] / n,
            lambda: config.lambda,
        };
        let average_map = match validation {
            Some(v) => Some(evaluate(&model, v.samples, &v.config)?.average),
            None => None,
        };
        info!(
            "epoch {epoch}: loss {:.5}{}",
            loss.total,
            average_map.map_or(String::new(), |m| format!(", mAP {m:.4}"))
        );
        log.epochs.push(EpochRecord { epoch, loss, sensitivity: SensitivityParams::of(&model), average_map });
    }
    Ok((model, log))
}

/// Decoded and suppressed detections for one sequence.
pub fn detect(model: &AslModel, features: &Matrix, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    let levels = model.predict(features)?;
    Ok(postprocess(&levels, features.rows(), cfg))
}

/// mAP of `model` on labeled samples.
pub fn evaluate(model: &AslModel, samples: &[VideoSample], config: &EvalConfig) -> Result<MapResult> {
    let dets =
        samples.iter().map(|s| detect(model, &s.features, &InferenceConfig::default())).collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = samples.iter().map(|s| s.instances.clone()).collect();
    mean_ap(&dets, &gts, config)
}

/// Model configuration plus parameters, as saved by training.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
}

pub fn save_checkpoint(path: &Path, model: &AslModel) -> Result<()> {
    let ckpt = Checkpoint { config: model.config.clone(), params: model.params.clone() };
    let text = serde_json::to_string(&ckpt).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<AslModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    AslModel::from_params(ckpt.config, ckpt.params)
}

pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(log.to_json_lines().as_bytes()).map_err(|e| Error::io(path, e))
}

/// Relative-error bound of [`gradient_suite`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// A random two-video batch (`T` = 32 and 24, `D` = 8, three classes) with
/// instances on every pyramid level, and a freshly initialized model.
pub fn gradcheck_case(seed: u64) -> Result<(AslModel, Vec<VideoSample>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, num_classes) = (8, 3);
    let model = AslModel::new(ModelConfig { dim, num_classes, ..ModelConfig::default() }, seed)?;
    let mut video = |len: usize, durations: &[usize]| {
        let instances = durations
            .iter()
            .map(|&d| {
                let start = rng.gen_range(0..=len - d);
                GroundTruthInstance::new(start, start + d, rng.gen_range(0..num_classes))
            })
            .collect();
        VideoSample { features: Matrix::from_fn(len, dim, |_, _| rng.gen_range(-1.0..1.0)), instances }
    };
    let a = video(32, &[3, 6, 12, 32]);
    let b = video(24, &[1, 9, 20]);
    Ok((model, vec![a, b]))
}

/// Analytic gradients of the full objective against central differences
/// (step 1e-5) for every parameter of [`gradcheck_case`]`(seed)`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let (mut model, batch) = gradcheck_case(seed)?;
    let cfg = LossConfig::default();
    let objective = batch_objective(&model, &batch, &cfg, None)?;
    objective.write_gradients(&mut model);
    let frozen = objective.detached.clone();
    drop(objective);
    let mut scratch = model.clone();
    let mut failure = None;
    let reports = finite_difference_gradcheck_terms(&mut model.params, DEFAULT_STEP, |params| {
        scratch.params.clone_from(params);
        match batch_objective(&scratch, &batch, &cfg, Some(&frozen)) {
            Ok(o) => o.terms,
            Err(e) => {
                failure.get_or_insert(e);
                vec![f64::NAN]
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(reports),
    }
}
