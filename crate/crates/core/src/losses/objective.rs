//! The batch training objective on the tape.

use log::warn;
use serde::{Deserialize, Serialize};

use super::{ascl_sampling, class_targets, total_loss, LossReport};
use crate::assignment::{assign_video, decode_offsets, GroundTruthInstance, LevelRanges};
use crate::error::{Error, Result};
use crate::model::{AslModel, Bound};
use crate::numerics::{sigmoid, ContrastiveAnchor, Graph, Matrix, Var};
use crate::sensitivity::{class_sensitivity_nodes, SensitivityParams};

/// Loss weights and hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub delta: f64,
    /// When false every frame weighs 1 and the evaluator is not trained.
    pub use_ase: bool,
    pub tau: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: super::DEFAULT_LAMBDA,
            delta: super::DEFAULT_DELTA,
            use_ase: true,
            tau: super::CONTRASTIVE_TAU,
            alpha: super::FOCAL_ALPHA,
            gamma: super::FOCAL_GAMMA,
        }
    }
}

/// One training video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub features: Matrix,
    pub instances: Vec<GroundTruthInstance>,
}

/// Values that enter the objective without gradient: evaluator outputs
/// used as weights, their regression targets, and the sensitivity
/// parameters that pick and weight contrastive frames.
///
/// Replaying a [`Detached`] snapshot turns the objective into a smooth
/// function of the parameters, which is what finite differences need.
#[derive(Clone, Debug, PartialEq)]
pub struct Detached {
    /// `[video][level]`, positives grouped by instance.
    pub levels: Vec<Vec<LevelDetached>>,
    pub sensitivity: SensitivityParams,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelDetached {
    pub q_cls: Vec<f64>,
    pub q_loc: Vec<f64>,
    pub target_cls: Vec<f64>,
    pub target_loc: Vec<f64>,
}

/// A built objective: the tape, parameter leaves and scalar loss node.
pub struct Objective {
    pub graph: Graph,
    pub bound: Bound,
    pub loss: Var,
    pub report: LossReport,
    pub detached: Detached,
    pub num_pos: usize,
    /// Per-frame and contrastive contributions; they sum to the total loss.
    pub terms: Vec<f64>,
    /// Scalar nodes of `L_cls`, `L_loc`, `L_s` and the unweighted `L_ASCL`.
    pub components: [Var; 4],
}

impl Objective {
    /// Runs the backward pass and writes parameter gradients into the model.
    pub fn write_gradients(&self, model: &mut AslModel) {
        let mut grads = self.graph.backward(self.loss);
        model.params.ensure_grads();
        for (id, &v) in model.params.ids().collect::<Vec<_>>().into_iter().zip(&self.bound.0) {
            let p = model.params.get_mut(id);
            match grads.take(v) {
                Some(gm) => p.grad = gm,
                None => p.grad.fill(0.0),
            }
        }
    }
}

/// Per-frame loss columns of one level, before normalization.
#[derive(Default)]
struct Partial {
    cls: Vec<Var>,
    loc: Option<Var>,
    sens: Option<Var>,
}

/// Builds the full objective for a batch.
///
/// With `frozen = None` detached quantities come from the current
/// parameters; passing an earlier [`Objective::detached`] replays them.
pub fn batch_objective(
    model: &AslModel,
    batch: &[VideoSample],
    cfg: &LossConfig,
    frozen: Option<&Detached>,
) -> Result<Objective> {
    let nc = model.config.num_classes;
    let ranges = LevelRanges::doubling(model.config.levels);
    let layout = &model.layout;
    let sensitivity = match frozen {
        Some(f) => f.sensitivity.clone(),
        None => SensitivityParams::of(model),
    };
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let mut parts = Vec::new();
    let mut detached_levels = Vec::with_capacity(batch.len());
    let mut ascl_rows: Vec<(Var, usize)> = Vec::new();
    let mut bg_rows: Vec<Var> = Vec::new();
    let mut num_pos = 0;

    for (v, sample) in batch.iter().enumerate() {
        let len = sample.features.rows();
        for gt in &sample.instances {
            gt.validate(len, nc)?;
        }
        let fwd = model.forward(&mut g, &b, &sample.features)?;
        let assignment = assign_video(len, &sample.instances, &ranges);
        num_pos += assignment.num_pos;
        let mut video_detached = Vec::with_capacity(assignment.levels.len());

        for (l, asg) in assignment.levels.iter().enumerate() {
            let pred = fwd.predictions[l];
            let fl = g.focal(pred.logits, class_targets(asg, nc), cfg.alpha, cfg.gamma);
            let fl = g.row_sum(fl);

            let mut pos: Vec<(usize, usize)> = asg.positives().map(|(i, p)| (p.instance, i)).collect();
            pos.sort_unstable();
            let bg: Vec<usize> = asg.background().collect();
            let bg_rows = (!bg.is_empty()).then(|| g.select_rows(fl, bg));
            if pos.is_empty() {
                parts.push(Partial { cls: bg_rows.into_iter().collect(), loc: None, sens: None });
                video_detached.push(LevelDetached::default());
                continue;
            }

            let idx: Vec<usize> = pos.iter().map(|&(_, i)| i).collect();
            let frames: Vec<_> = idx.iter().map(|&i| asg.frames[i].expect("positive frame")).collect();
            let targets =
                Matrix::from_fn(idx.len(), 2, |k, j| if j == 0 { frames[k].target.0 } else { frames[k].target.1 });
            let fl_pos = g.select_rows(fl, idx.clone());
            let offsets = g.select_rows(pred.offsets, idx.clone());
            let diou = g.diou(offsets, targets);

            let (cls_pos, loc, sens, det) = if cfg.use_ase {
                // instance-level evaluator on each instance's frames at this level
                let mut q_cls_parts = Vec::new();
                let mut q_loc_parts = Vec::new();
                let mut start = 0;
                while start < pos.len() {
                    let inst = pos[start].0;
                    let end = start + pos[start..].iter().take_while(|p| p.0 == inst).count();
                    let rows = g.select_rows(fwd.levels[l], idx[start..end].to_vec());
                    q_cls_parts.push(layout.evaluator_cls.evaluate(&mut g, &b, rows));
                    q_loc_parts.push(layout.evaluator_loc.evaluate(&mut g, &b, rows));
                    start = end;
                }
                let q_cls = g.concat_rows(q_cls_parts);
                let q_loc = g.concat_rows(q_loc_parts);

                let det = match frozen {
                    Some(f) => f.levels[v][l].clone(),
                    None => {
                        let logits = g.value(pred.logits);
                        let off = g.value(pred.offsets);
                        let target_cls =
                            idx.iter().zip(&frames).map(|(&i, p)| sigmoid(logits.get(i, p.class))).collect();
                        let target_loc = idx
                            .iter()
                            .zip(&frames)
                            .map(|(&i, p)| {
                                let seg = decode_offsets(asg.center(i), (off.get(i, 0), off.get(i, 1)), asg.stride);
                                let gt = sample.instances[p.instance].segment();
                                let iou = seg.tiou_unchecked(&gt);
                                if iou.is_finite() {
                                    iou
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        LevelDetached {
                            q_cls: g.value(q_cls).data().to_vec(),
                            q_loc: g.value(q_loc).data().to_vec(),
                            target_cls,
                            target_loc,
                        }
                    }
                };

                let classes: Vec<usize> = frames.iter().map(|p| p.class).collect();
                let distances: Vec<f64> = frames.iter().map(|p| p.center_distance).collect();
                let [p_cls, p_sot, p_eot] =
                    class_sensitivity_nodes(&mut g, &b, &layout.sensitivity, &classes, &distances);
                let p_loc = g.add(p_sot, p_eot);
                let q_cls_const = g.leaf(Matrix::column(&det.q_cls));
                let q_loc_const = g.leaf(Matrix::column(&det.q_loc));
                let h_cls = g.add(p_cls, q_cls_const);
                let h_loc = g.add(p_loc, q_loc_const);

                let weighted_cls = g.mul(fl_pos, h_cls);
                let weighted_loc = g.mul(diou, h_loc);

                let t_cls = g.leaf(Matrix::column(&det.target_cls));
                let t_loc = g.leaf(Matrix::column(&det.target_loc));
                let e_cls = g.sub(q_cls, t_cls);
                let e_loc = g.sub(q_loc, t_loc);
                let e_cls = g.square(e_cls);
                let e_loc = g.square(e_loc);
                (weighted_cls, weighted_loc, Some(g.add(e_cls, e_loc)), det)
            } else {
                (fl_pos, diou, None, LevelDetached::default())
            };
            let cls = bg_rows.into_iter().chain([cls_pos]).collect();
            parts.push(Partial { cls, loc: Some(loc), sens });
            video_detached.push(det);
        }
        detached_levels.push(video_detached);

        if cfg.lambda > 0.0 {
            for gt in &sample.instances {
                let s = ascl_sampling(&sensitivity, gt, cfg.delta, len);
                let mut pool = |frames: Vec<usize>, weights: Vec<f64>| {
                    let w = g.leaf(Matrix::from_vec_unchecked(1, weights.len(), weights));
                    let rows = g.select_rows(fwd.levels[0], frames);
                    g.matmul(w, rows)
                };
                let f_cls = pool(s.cls_frames, s.cls_weights);
                let f_loc = pool(s.loc_frames, s.loc_weights);
                ascl_rows.push((f_cls, s.class));
                ascl_rows.push((f_loc, s.class));
                if !s.bg_frames.is_empty() {
                    let n = s.bg_frames.len();
                    bg_rows.push(pool(s.bg_frames, vec![1.0 / n as f64; n]));
                }
            }
        }
    }

    let norm = if num_pos == 0 {
        warn!("batch has no in-action frames; normalizing the classification loss by 1");
        1.0
    } else {
        num_pos as f64
    };
    let sum_parts = |g: &mut Graph, vars: Vec<Var>| -> Var {
        if vars.is_empty() {
            return g.leaf(Matrix::scalar(0.0));
        }
        let all = g.concat_rows(vars);
        let s = g.sum_all(all);
        g.scale(s, 1.0 / norm)
    };
    let l_cls = sum_parts(&mut g, parts.iter().flat_map(|p| p.cls.iter().copied()).collect());
    let l_loc = sum_parts(&mut g, parts.iter().filter_map(|p| p.loc).collect());
    let l_s = sum_parts(&mut g, parts.iter().filter_map(|p| p.sens).collect());
    let l_ascl = if ascl_rows.is_empty() {
        g.leaf(Matrix::scalar(0.0))
    } else {
        contrastive_node(&mut g, &ascl_rows, bg_rows, cfg.tau)
    };

    let report = total_loss(
        g.value(l_cls).item(),
        g.value(l_loc).item(),
        g.value(l_s).item(),
        g.value(l_ascl).item(),
        cfg.lambda,
    )?;
    let a = g.add(l_cls, l_loc);
    let a = g.add(a, l_s);
    let loss = if cfg.lambda > 0.0 {
        let w = g.scale(l_ascl, cfg.lambda);
        g.add(a, w)
    } else {
        a
    };
    if !g.value(loss).is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let mut terms: Vec<f64> = parts
        .iter()
        .flat_map(|p| p.cls.iter().chain(&p.loc).chain(&p.sens))
        .flat_map(|&v| g.value(v).data().iter().map(|x| x / norm))
        .collect();
    terms.push(cfg.lambda * report.ascl);
    Ok(Objective {
        graph: g,
        bound: b,
        loss,
        report,
        detached: Detached { levels: detached_levels, sensitivity },
        num_pos,
        terms,
        components: [l_cls, l_loc, l_s, l_ascl],
    })
}

fn contrastive_node(g: &mut Graph, rows: &[(Var, usize)], bg: Vec<Var>, tau: f64) -> Var {
    let n = rows.len();
    let num_bg = bg.len();
    let all: Vec<Var> = rows.iter().map(|r| r.0).chain(bg).collect();
    let z = g.concat_rows(all);
    let z = g.l2_normalize_rows(z);
    let s = g.matmul_nt(z, z);
    let s = g.scale(s, 1.0 / tau);
    let anchors = (0..n)
        .filter_map(|i| {
            let class = rows[i].1;
            let positives: Vec<usize> = (0..n).filter(|&j| j != i && rows[j].1 == class).collect();
            if positives.is_empty() {
                return None;
            }
            let negatives = (0..n).filter(|&j| rows[j].1 != class).chain(n..n + num_bg).collect();
            Some(ContrastiveAnchor { row: i, positives, negatives })
        })
        .collect();
    g.contrastive(s, anchors)
}
