//! Decoding per-frame predictions into scored segments, and SoftNMS.

use serde::{Deserialize, Serialize};

use crate::assignment::frame_center;
use crate::model::LevelOutput;
use crate::numerics::sigmoid;
use crate::segment::Segment;

/// A scored segment in input-frame units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    pub class: usize,
    pub score: f64,
}

impl Detection {
    pub fn segment(&self) -> Segment {
        Segment { start: self.start, end: self.end }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub pre_nms_topk: usize,
    pub nms_sigma: f64,
    pub keep_k: usize,
    pub min_score: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { score_threshold: 0.001, pre_nms_topk: 2000, nms_sigma: 0.5, keep_k: 200, min_score: 0.001 }
    }
}

/// Every (frame, class) whose score exceeds `score_threshold`, decoded to
/// a segment clipped to `[0, len]`, keeping the `pre_nms_topk` best.
///
/// Equal scores keep emission order: level, then frame, then class.
pub fn decode(levels: &[LevelOutput], len: usize, score_threshold: f64, pre_nms_topk: usize) -> Vec<Detection> {
    let mut out = Vec::new();
    for level in levels {
        for i in 0..level.logits.rows() {
            let c = frame_center(i, level.stride);
            let s = level.stride as f64;
            let start = (c - level.offsets.get(i, 0) * s).max(0.0);
            let end = (c + level.offsets.get(i, 1) * s).min(len as f64);
            if !(end > start) {
                continue;
            }
            for (class, &logit) in level.logits.row(i).iter().enumerate() {
                let score = sigmoid(logit);
                if score > score_threshold {
                    out.push(Detection { start, end, class, score });
                }
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(pre_nms_topk);
    out
}

/// Gaussian-decay SoftNMS, applied per class.
///
/// Repeatedly moves the highest-scoring remaining detection to the output
/// (lowest input index on ties) and multiplies the score of every remaining
/// same-class detection by `exp(-tiou^2 / sigma)`. Stops after `keep_k`
/// selections or once the best remaining score is below `min_score`.
pub fn soft_nms(dets: &[Detection], sigma: f64, keep_k: usize, min_score: f64) -> Vec<Detection> {
    let mut remaining: Vec<Detection> = dets.to_vec();
    let mut alive = vec![true; remaining.len()];
    let mut out = Vec::with_capacity(keep_k.min(dets.len()));
    while out.len() < keep_k {
        let mut best: Option<usize> = None;
        for (k, d) in remaining.iter().enumerate() {
            if alive[k] && best.map_or(true, |b| d.score > remaining[b].score) {
                best = Some(k);
            }
        }
        let Some(b) = best else { break };
        let top = remaining[b];
        if top.score < min_score {
            break;
        }
        alive[b] = false;
        out.push(top);
        let seg = top.segment();
        for (k, d) in remaining.iter_mut().enumerate() {
            if alive[k] && d.class == top.class {
                let iou = seg.tiou_unchecked(&d.segment());
                d.score *= (-iou * iou / sigma).exp();
            }
        }
    }
    out
}

/// Decode followed by SoftNMS.
pub fn postprocess(levels: &[LevelOutput], len: usize, cfg: &InferenceConfig) -> Vec<Detection> {
    let dets = decode(levels, len, cfg.score_threshold, cfg.pre_nms_topk);
    soft_nms(&dets, cfg.nms_sigma, cfg.keep_k, cfg.min_score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{assign_video, GroundTruthInstance, LevelRanges};
    use crate::numerics::Matrix;
    use proptest::prelude::*;

    fn det(start: f64, end: f64, class: usize, score: f64) -> Detection {
        Detection { start, end, class, score }
    }

    /// Selection by recomputing every score from the original input and the
    /// detections selected so far.
    fn soft_nms_reference(dets: &[Detection], sigma: f64, keep_k: usize, min_score: f64) -> Vec<Detection> {
        let mut selected: Vec<usize> = Vec::new();
        let current = |k: usize, selected: &[usize]| {
            let mut s = dets[k].score;
            for &j in selected {
                if dets[j].class == dets[k].class {
                    let iou = dets[j].segment().tiou_unchecked(&dets[k].segment());
                    s *= (-iou * iou / sigma).exp();
                }
            }
            s
        };
        let mut out = Vec::new();
        while out.len() < keep_k {
            let candidates: Vec<(usize, f64)> =
                (0..dets.len()).filter(|k| !selected.contains(k)).map(|k| (k, current(k, &selected))).collect();
            let Some(&(k, s)) = candidates.iter().fold(None, |acc: Option<&(usize, f64)>, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            }) else {
                break;
            };
            if s < min_score {
                break;
            }
            out.push(Detection { score: s, ..dets[k] });
            selected.push(k);
        }
        out
    }

    #[test]
    fn soft_nms_examples() {
        let disjoint = [det(0.0, 5.0, 0, 0.9), det(10.0, 12.0, 0, 0.4)];
        assert_eq!(soft_nms(&disjoint, 0.5, 200, 0.001), disjoint.to_vec());

        // [0,8] vs [2,10]: intersection 6, union 10
        let overlap = [det(0.0, 8.0, 1, 0.9), det(2.0, 10.0, 1, 0.8)];
        let out = soft_nms(&overlap, 0.5, 200, 0.001);
        assert_eq!(out[0], overlap[0]);
        assert!((out[1].score - 0.8 * (-0.72f64).exp()).abs() < 1e-15);
        assert!((out[1].score - 0.38940).abs() < 1e-5);

        let dup = [det(3.0, 9.0, 0, 0.7), det(3.0, 9.0, 0, 0.7)];
        let out = soft_nms(&dup, 0.5, 200, 0.001);
        assert!((out[1].score / 0.7 - 0.13534).abs() < 1e-5);

        // other classes are untouched
        let mixed = [det(0.0, 8.0, 0, 0.9), det(0.0, 8.0, 1, 0.8)];
        assert_eq!(soft_nms(&mixed, 0.5, 200, 0.001), mixed.to_vec());

        assert_eq!(soft_nms(&mixed, 0.5, 1, 0.001).len(), 1);
        assert_eq!(soft_nms(&[det(0.0, 1.0, 0, 0.0005)], 0.5, 200, 0.001), vec![]);
    }

    fn level(stride: usize, logits: Matrix, offsets: Matrix) -> LevelOutput {
        LevelOutput { stride, logits, offsets }
    }

    #[test]
    fn decode_examples() {
        let off = Matrix::filled(4, 2, 0.5);
        assert!(decode(&[level(1, Matrix::filled(4, 2, -50.0), off.clone())], 4, 0.001, 2000).is_empty());

        let logits = Matrix::from_fn(4, 2, |i, c| (i * 2 + c) as f64 * 0.1);
        let all = decode(&[level(1, logits.clone(), off.clone())], 4, 0.001, 2000);
        assert_eq!(all.len(), 8);
        let top = decode(&[level(1, logits, off)], 4, 0.001, 1);
        assert_eq!(top.len(), 1);
        assert_eq!((top[0].class, top[0].start, top[0].end), (1, 3.0, 4.0));
        assert!((top[0].score - sigmoid(0.7)).abs() < 1e-15);

        // clipping at the sequence bounds
        let wide = decode(&[level(2, Matrix::filled(1, 1, 0.0), Matrix::filled(1, 2, 10.0))], 2, 0.001, 10);
        assert_eq!((wide[0].start, wide[0].end), (0.0, 2.0));
    }

    #[test]
    fn exact_targets_decode_to_ground_truth() {
        let len = 64;
        let gts = vec![
            GroundTruthInstance::new(3, 9, 0),
            GroundTruthInstance::new(10, 30, 1),
            GroundTruthInstance::new(20, 61, 2),
            GroundTruthInstance::new(40, 45, 0),
        ];
        let asg = assign_video(len, &gts, &LevelRanges::doubling(4));
        let mut levels = Vec::new();
        for a in &asg.levels {
            let mut logits = Matrix::filled(a.len(), 3, -50.0);
            let mut offsets = Matrix::filled(a.len(), 2, 1.0);
            for (i, p) in a.positives() {
                logits.set(i, p.class, 50.0);
                offsets.set(i, 0, p.target.0);
                offsets.set(i, 1, p.target.1);
            }
            levels.push(level(a.stride, logits, offsets));
        }
        let dets = decode(&levels, len, 0.5, 2000);
        for (k, gt) in gts.iter().enumerate() {
            let hits: Vec<_> = dets.iter().filter(|d| d.class == gt.class && d.segment() == gt.segment()).collect();
            assert!(!hits.is_empty(), "instance {k} not reproduced");
        }
        assert!(dets.iter().all(|d| gts.iter().any(|g| g.class == d.class && g.segment() == d.segment())));
    }

    fn arb_dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
        proptest::collection::vec((0u32..40, 1u32..15, 0usize..3, 1u32..1000), 0..=max).prop_map(|v| {
            v.into_iter()
                .map(|(s, l, c, score)| det(s as f64 * 0.5, (s + l) as f64 * 0.5, c, score as f64 / 1000.0))
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn soft_nms_matches_reference(dets in arb_dets(20), keep in 1usize..25) {
            prop_assert_eq!(soft_nms(&dets, 0.5, keep, 0.001), soft_nms_reference(&dets, 0.5, keep, 0.001));
        }

        #[test]
        fn soft_nms_never_raises_scores(dets in arb_dets(20)) {
            let out = soft_nms(&dets, 0.5, 200, 0.001);
            if let Some(first) = out.first() {
                let max = dets.iter().map(|d| d.score).fold(f64::MIN, f64::max);
                prop_assert_eq!(first.score, max);
            }
            for d in &out {
                prop_assert!(dets.iter().any(|o| o.start == d.start && o.end == d.end && o.class == d.class && d.score <= o.score));
            }
        }
    }
}
