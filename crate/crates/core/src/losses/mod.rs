//! Training objectives.
//!
//! The plain-value functions here define each loss on detached inputs and
//! are what the tests pin down; [`objective`] builds the same quantities on
//! the tape for a whole batch.

pub mod objective;

use serde::{Deserialize, Serialize};

use crate::assignment::{GroundTruthInstance, LevelAssignment};
use crate::error::{Error, Result};
use crate::numerics::{diou_from_offsets, focal_term, Matrix};
use crate::sensitivity::{class_sensitivity_cls, class_sensitivity_loc, SensitivityParams};

pub use crate::segment::diou_loss_1d;
pub use objective::{batch_objective, Detached, LossConfig, Objective, VideoSample};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Temperature of the exponentiated-cosine similarity.
pub const CONTRASTIVE_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 0.3;
pub const DEFAULT_DELTA: f64 = 0.2;

/// Scalar loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub loc: f64,
    pub sensitivity: f64,
    pub ascl: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `cls + loc + sensitivity + lambda * ascl`, rejecting non-finite parts.
pub fn total_loss(cls: f64, loc: f64, sensitivity: f64, ascl: f64, lambda: f64) -> Result<LossReport> {
    for (name, v) in [("L_cls", cls), ("L_loc", loc), ("L_s", sensitivity), ("L_ASCL", ascl)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be a nonnegative number")));
    }
    Ok(LossReport { cls, loc, sensitivity, ascl, total: cls + loc + sensitivity + lambda * ascl, lambda })
}

/// One-hot targets for a level: in-action frames get their class, background
/// frames are all zero.
pub fn class_targets(assignment: &LevelAssignment, num_classes: usize) -> Matrix {
    let mut t = Matrix::zeros(assignment.len(), num_classes);
    for (i, p) in assignment.positives() {
        t.set(i, p.class, 1.0);
    }
    t
}

/// Sigmoid focal loss of one logit against a 0/1 target.
pub fn focal_loss(logit: f64, target: f64) -> f64 {
    focal_term(logit, target, FOCAL_ALPHA, FOCAL_GAMMA)
}

/// Sensitivity-weighted focal loss of one level, normalized by `num_pos`.
///
/// `h_cls` holds one weight per in-action frame, in frame order. A
/// `num_pos` of zero normalizes by one.
pub fn focal_loss_weighted(logits: &Matrix, assignment: &LevelAssignment, h_cls: &[f64], num_pos: usize) -> f64 {
    let targets = class_targets(assignment, logits.cols());
    let mut weights = vec![1.0; assignment.len()];
    for ((i, _), h) in assignment.positives().zip(h_cls) {
        weights[i] = *h;
    }
    let mut sum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let frame: f64 = (0..logits.cols()).map(|c| focal_loss(logits.get(i, c), targets.get(i, c))).sum();
        sum += w * frame;
    }
    sum / num_pos.max(1) as f64
}

/// Sensitivity-weighted DIoU loss over in-action frames of one level.
/// `offsets` are predicted `(start, end)` distances in stride units.
pub fn localization_loss(offsets: &Matrix, assignment: &LevelAssignment, h_loc: &[f64], num_pos: usize) -> f64 {
    if num_pos == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for ((i, p), h) in assignment.positives().zip(h_loc) {
        let (l, _, _) = diou_from_offsets(offsets.get(i, 0), offsets.get(i, 1), p.target.0, p.target.1);
        sum += h * l;
    }
    sum / num_pos as f64
}

/// Mean squared error between evaluator outputs and quality targets.
pub fn sensitivity_loss(q: &[f64], quality: &[f64]) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    q.iter().zip(quality).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / q.len() as f64
}

/// Most sensitive frames of an instance for classification, start and end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchors {
    pub cls: usize,
    pub sot: usize,
    pub eot: usize,
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Input-frame indices maximizing `p^cls`, `p^sot` and `p^eot` inside the
/// instance; ties go to the earliest frame.
pub fn ascl_anchors(p: &SensitivityParams, gt: &GroundTruthInstance) -> Anchors {
    let d = instance_distances(gt);
    let c = gt.class;
    Anchors {
        cls: gt.start + argmax_first(d.iter().map(|&x| class_sensitivity_cls(x, c, p))),
        sot: gt.start + argmax_first(d.iter().map(|&x| class_sensitivity_loc(x, c, p).sot)),
        eot: gt.start + argmax_first(d.iter().map(|&x| class_sensitivity_loc(x, c, p).eot)),
    }
}

fn instance_distances(gt: &GroundTruthInstance) -> Vec<f64> {
    (gt.start..gt.end).map(|i| crate::assignment::center_distance(i, gt).unwrap_or(0.0)).collect()
}

/// Frames and weights pooled into the contrastive features of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsclSampling {
    pub class: usize,
    pub cls_frames: Vec<usize>,
    /// `p^cls_t / |T_cls|` per frame of `cls_frames`.
    pub cls_weights: Vec<f64>,
    pub loc_frames: Vec<usize>,
    /// `p^loc_t / |T_loc|` per frame of `loc_frames`.
    pub loc_weights: Vec<f64>,
    /// Boundary background frames; empty when the instance touches both
    /// clip edges or the window radius is zero.
    pub bg_frames: Vec<usize>,
}

/// Window radius `floor(delta * N_f)`.
pub fn window_radius(delta: f64, num_frames: usize) -> usize {
    (delta * num_frames as f64).floor() as usize
}

/// Sampling ranges and weights for one instance in a clip of `len` frames.
pub fn ascl_sampling(p: &SensitivityParams, gt: &GroundTruthInstance, delta: f64, len: usize) -> AsclSampling {
    let anchors = ascl_anchors(p, gt);
    let r = window_radius(delta, gt.num_frames());
    let window = |a: usize| a.saturating_sub(r).max(gt.start)..(a + r + 1).min(gt.end);
    let cls_frames: Vec<usize> = window(anchors.cls).collect();
    let mut loc_frames: Vec<usize> = window(anchors.sot).chain(window(anchors.eot)).collect();
    loc_frames.sort_unstable();
    loc_frames.dedup();
    let weight = |frames: &[usize], f: &dyn Fn(f64) -> f64| -> Vec<f64> {
        let n = frames.len() as f64;
        frames.iter().map(|&t| f(crate::assignment::center_distance(t, gt).unwrap_or(0.0)) / n).collect()
    };
    let c = gt.class;
    let cls_weights = weight(&cls_frames, &|d| class_sensitivity_cls(d, c, p));
    let loc_weights = weight(&loc_frames, &|d| class_sensitivity_loc(d, c, p).loc);
    let bg_frames: Vec<usize> = (gt.start.saturating_sub(r)..gt.start).chain(gt.end..(gt.end + r).min(len)).collect();
    AsclSampling { class: c, cls_frames, cls_weights, loc_frames, loc_weights, bg_frames }
}

/// Contrastive features of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AsclFeatures {
    pub class: usize,
    pub f_cls: Vec<f64>,
    pub f_loc: Vec<f64>,
    pub f_bg: Option<Vec<f64>>,
}

/// Pools sensitivity-weighted features from a `T x D` sequence.
pub fn ascl_features(features: &Matrix, p: &SensitivityParams, gt: &GroundTruthInstance, delta: f64) -> AsclFeatures {
    let s = ascl_sampling(p, gt, delta, features.rows());
    let pool = |frames: &[usize], weights: Option<&[f64]>| -> Vec<f64> {
        let mut out = vec![0.0; features.cols()];
        for (k, &t) in frames.iter().enumerate() {
            let w = weights.map_or(1.0 / frames.len() as f64, |w| w[k]);
            for (o, v) in out.iter_mut().zip(features.row(t)) {
                *o += w * v;
            }
        }
        out
    };
    AsclFeatures {
        class: s.class,
        f_cls: pool(&s.cls_frames, Some(&s.cls_weights)),
        f_loc: pool(&s.loc_frames, Some(&s.loc_weights)),
        f_bg: (!s.bg_frames.is_empty()).then(|| pool(&s.bg_frames, None)),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = (a.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    let nb = (b.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    dot / (na * nb)
}

/// Action-sensitive contrastive loss over the instances of a batch.
///
/// Every `f_cls`/`f_loc` is an anchor. Its positives are the other
/// `f_cls`/`f_loc` of the same class, its negatives those of other classes
/// plus every `f_bg`. Anchors without positives are skipped; the result is
/// the mean over contributing anchors, or 0 when there are none.
pub fn ascl_loss(samples: &[AsclFeatures], tau: f64) -> f64 {
    let anchors: Vec<(&[f64], usize)> =
        samples.iter().flat_map(|s| [(s.f_cls.as_slice(), s.class), (s.f_loc.as_slice(), s.class)]).collect();
    let backgrounds: Vec<&[f64]> = samples.iter().filter_map(|s| s.f_bg.as_deref()).collect();
    let sim = |a: &[f64], b: &[f64]| (cosine(a, b) / tau).exp();
    let mut total = 0.0;
    let mut count = 0;
    for (i, &(a, class)) in anchors.iter().enumerate() {
        let mut pos = 0.0;
        let mut neg = 0.0;
        let mut has_pos = false;
        for (j, &(x, c)) in anchors.iter().enumerate() {
            if i == j {
                continue;
            }
            if c == class {
                pos += sim(a, x);
                has_pos = true;
            } else {
                neg += sim(a, x);
            }
        }
        if !has_pos {
            continue;
        }
        neg += backgrounds.iter().map(|b| sim(a, b)).sum::<f64>();
        total += -(pos / (pos + neg)).ln();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::assign_frames;
    use proptest::prelude::*;

    fn gt(start: usize, end: usize, class: usize) -> GroundTruthInstance {
        GroundTruthInstance::new(start, end, class)
    }

    #[test]
    fn focal_positive_at_zero_logit() {
        // -alpha (1 - 0.5)^2 ln 0.5
        let expect = -0.25 * 0.25 * 0.5f64.ln();
        assert!((focal_loss(0.0, 1.0) - expect).abs() < 1e-15);
        assert!((expect - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn focal_saturates_for_confident_logits() {
        let gts = [gt(2, 5, 1)];
        let a = assign_frames(8, 1, &gts, &[0]);
        let logits = Matrix::from_fn(8, 2, |i, c| if a.frames[i].is_some() && c == 1 { 50.0 } else { -50.0 });
        let l = focal_loss_weighted(&logits, &a, &[1.0; 3], a.num_positive());
        assert!(l < 1e-8);
    }

    #[test]
    fn focal_is_linear_in_weights() {
        let gts = [gt(1, 4, 0), gt(5, 7, 1)];
        let a = assign_frames(9, 1, &gts, &[0, 1]);
        let logits = Matrix::from_fn(9, 2, |i, c| (i as f64 * 0.37 - c as f64).sin());
        let n = a.num_positive();
        let bg_only = focal_loss_weighted(&logits, &a, &vec![0.0; n], n);
        let h: Vec<f64> = (0..n).map(|k| 0.3 + 0.1 * k as f64).collect();
        let h2: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        let pos1 = focal_loss_weighted(&logits, &a, &h, n) - bg_only;
        let pos2 = focal_loss_weighted(&logits, &a, &h2, n) - bg_only;
        assert!((pos2 - 2.0 * pos1).abs() < 1e-12);
    }

    #[test]
    fn no_positives_normalizes_by_one() {
        let a = assign_frames(4, 1, &[], &[]);
        let logits = Matrix::zeros(4, 2);
        let l = focal_loss_weighted(&logits, &a, &[], 0);
        assert!((l - 8.0 * focal_loss(0.0, 0.0)).abs() < 1e-15);
        assert_eq!(localization_loss(&Matrix::filled(4, 2, 1.0), &a, &[], 0), 0.0);
    }

    #[test]
    fn localization_examples() {
        let gts = [gt(0, 10, 0)];
        let a = assign_frames(10, 1, &gts, &[0]);
        let exact = Matrix::from_fn(10, 2, |i, k| if k == 0 { i as f64 + 0.5 } else { 9.5 - i as f64 });
        assert!(localization_loss(&exact, &a, &[1.0; 10], 10).abs() < 1e-15);

        // single frame at center 5, prediction [0,10] vs target [5,15]
        let one = [gt(5, 15, 0)];
        let a = assign_frames(16, 1, &one, &[0]);
        let mut offsets = Matrix::filled(16, 2, 7.0);
        offsets.set(5, 0, 5.5);
        offsets.set(5, 1, 4.5);
        let only_frame5: Vec<Option<_>> =
            a.frames.iter().enumerate().map(|(i, f)| if i == 5 { *f } else { None }).collect();
        let a1 = LevelAssignment { stride: 1, frames: only_frame5 };
        let l = localization_loss(&offsets, &a1, &[2.0], 1);
        let per = diou_loss_1d(
            &crate::segment::Segment { start: 0.0, end: 10.0 },
            &crate::segment::Segment { start: 5.0, end: 15.0 },
        )
        .unwrap();
        assert!((l - 2.0 * per).abs() < 1e-12);
        assert!((l - 1.55556).abs() < 1e-5);

        // background offsets do not matter
        let mut other = offsets.clone();
        other.set(0, 0, 100.0);
        other.set(15, 1, 0.01);
        assert_eq!(localization_loss(&other, &a1, &[2.0], 1), l);
    }

    #[test]
    fn sensitivity_loss_examples() {
        assert_eq!(sensitivity_loss(&[0.3, 0.9], &[0.3, 0.9]), 0.0);
        assert_eq!(sensitivity_loss(&[0.5], &[1.0]), 0.25);
        assert_eq!(sensitivity_loss(&[], &[]), 0.0);
    }

    #[test]
    fn anchors_follow_sensitivity_peaks() {
        let p = SensitivityParams::initial(2);
        assert_eq!(ascl_anchors(&p, &gt(10, 21, 1)), Anchors { cls: 15, sot: 10, eot: 20 });
        // even length: the two central frames tie and the earlier wins
        assert_eq!(ascl_anchors(&p, &gt(0, 4, 0)).cls, 1);
        let mut moved = p.clone();
        moved.mu_cls[1] = 0.5;
        assert_eq!(ascl_anchors(&moved, &gt(10, 21, 1)).cls, 20);
    }

    #[test]
    fn sampling_windows_clip_to_instance_and_clip() {
        let p = SensitivityParams::initial(1);
        let s = ascl_sampling(&p, &gt(0, 10, 0), 0.2, 30);
        // radius 2 around center 4 (tie between 4 and 5 goes to 4)
        assert_eq!(s.cls_frames, vec![2, 3, 4, 5, 6]);
        assert_eq!(s.loc_frames, vec![0, 1, 2, 7, 8, 9]);
        // flush at clip start: only the post-end window remains
        assert_eq!(s.bg_frames, vec![10, 11]);
        let single = ascl_sampling(&p, &gt(3, 4, 0), 0.2, 30);
        assert_eq!(single.cls_frames, vec![3]);
        assert_eq!(single.loc_frames, vec![3]);
        assert!(single.bg_frames.is_empty());
        let whole = ascl_sampling(&p, &gt(0, 30, 0), 0.2, 30);
        assert!(whole.bg_frames.is_empty());
    }

    #[test]
    fn feature_pooling() {
        let p = SensitivityParams::initial(1);
        let row = [1.0, -2.0, 0.5];
        let f = Matrix::from_fn(20, 3, |_, j| row[j]);
        let g = gt(4, 14, 0);
        let s = ascl_sampling(&p, &g, 0.2, 20);
        let out = ascl_features(&f, &p, &g, 0.2);
        let mean_p: f64 = s.cls_weights.iter().sum();
        for j in 0..3 {
            assert!((out.f_cls[j] - mean_p * row[j]).abs() < 1e-12);
            assert!((out.f_bg.as_ref().unwrap()[j] - row[j]).abs() < 1e-12);
        }
        let single = ascl_features(&f, &p, &gt(7, 8, 0), 0.2);
        assert_eq!(single.f_cls, row.to_vec());
    }

    fn feat(class: usize, cls: Vec<f64>, loc: Vec<f64>, bg: Option<Vec<f64>>) -> AsclFeatures {
        AsclFeatures { class, f_cls: cls, f_loc: loc, f_bg: bg }
    }

    #[test]
    fn ascl_examples() {
        // a lone instance: f_cls and f_loc are each other's only positive
        let one = [feat(0, vec![1.0, 0.0], vec![0.0, 1.0], None)];
        assert!(ascl_loss(&one, CONTRASTIVE_TAU).abs() < 1e-15);

        // one positive and one negative at equal cosine: ln 2
        let two = [feat(0, vec![1.0, 0.0], vec![0.0, 1.0], Some(vec![0.0, 1.0]))];
        let l = ascl_loss(&two, CONTRASTIVE_TAU);
        // the f_loc anchor's negative (bg) is identical to itself, its positive orthogonal
        let expect_cls = std::f64::consts::LN_2;
        let s_pos = (0.0f64 / CONTRASTIVE_TAU).exp();
        let s_neg = (1.0f64 / CONTRASTIVE_TAU).exp();
        let expect_loc = -(s_pos / (s_pos + s_neg)).ln();
        assert!((l - 0.5 * (expect_cls + expect_loc)).abs() < 1e-9);

        assert_eq!(ascl_loss(&[], CONTRASTIVE_TAU), 0.0);
    }

    #[test]
    fn ascl_decreases_as_positive_approaches() {
        let neg = vec![0.0, 0.0, 1.0];
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let angle = std::f64::consts::FRAC_PI_2 * (1.0 - k as f64 / 10.0);
            let samples = [
                feat(0, vec![1.0, 0.0, 0.0], vec![angle.cos(), angle.sin(), 0.0], None),
                feat(1, neg.clone(), neg.clone(), None),
            ];
            // only the class-0 anchors carry the moving positive; compare their loss
            let l = ascl_loss(&samples[..1], CONTRASTIVE_TAU);
            let l_full = ascl_loss(&samples, CONTRASTIVE_TAU);
            assert!(l_full < prev, "step {k}: {l_full} !< {prev}");
            prev = l_full;
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn total_loss_examples() {
        let r = total_loss(1.0, 2.0, 0.5, 1.0, 0.3).unwrap();
        assert!((r.total - 3.8).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 2.0, 0.5, 9.0, 0.0).unwrap().total, 3.5);
        match total_loss(1.0, f64::NAN, 0.0, 0.0, 0.3) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "L_loc"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn anchors_scale_invariant(start in 0usize..20, n in 1usize..40, mu in -1.0f64..1.0, sigma in 0.1f64..5.0, k in 0.01f64..100.0) {
            let g = gt(start, start + n, 0);
            let mut p = SensitivityParams::initial(1);
            p.mu_eot[0] = mu;
            p.sigma_eot[0] = sigma;
            let d = instance_distances(&g);
            let a = argmax_first(d.iter().map(|&x| class_sensitivity_loc(x, 0, &p).eot));
            let b = argmax_first(d.iter().map(|&x| k * class_sensitivity_loc(x, 0, &p).eot));
            prop_assert_eq!(a, b);
            prop_assert_eq!(ascl_anchors(&p, &g).eot, g.start + a);
        }

        #[test]
        fn ascl_nonnegative(vals in proptest::collection::vec(-1.0f64..1.0, 24), classes in proptest::collection::vec(0usize..3, 3)) {
            let samples: Vec<AsclFeatures> = (0..3)
                .map(|k| feat(classes[k], vals[k * 8..k * 8 + 2].to_vec(), vals[k * 8 + 2..k * 8 + 4].to_vec(),
                              Some(vals[k * 8 + 4..k * 8 + 6].to_vec())))
                .collect();
            let l = ascl_loss(&samples, CONTRASTIVE_TAU);
            prop_assert!(l >= 0.0 && l.is_finite());
        }
    }
}
