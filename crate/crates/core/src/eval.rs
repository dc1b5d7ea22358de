//! Detection metrics: per-class average precision and mAP over tIoU
//! thresholds.
//!
//! Detections and ground truth are given per video, aligned by index.
//! Matching is greedy in descending score order; equal scores are broken by
//! earlier start, then video index, then input order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::assignment::GroundTruthInstance;
use crate::error::{Error, Result};
use crate::inference::Detection;

pub use crate::segment::tiou;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Strictly increasing, each in `(0, 1]`.
    pub thresholds: Vec<f64>,
    /// Only the highest-scoring detections of each video are scored.
    pub max_per_video: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { thresholds: (1..=9).map(|k| k as f64 / 10.0).collect(), max_per_video: 200 }
    }
}

impl EvalConfig {
    pub fn with_thresholds(thresholds: Vec<f64>) -> Result<Self> {
        let cfg = EvalConfig { thresholds, ..EvalConfig::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidArgument("no tIoU thresholds".into()));
        }
        for (k, &t) in self.thresholds.iter().enumerate() {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidArgument(format!("tIoU threshold {t} outside (0, 1]")));
            }
            if k > 0 && t <= self.thresholds[k - 1] {
                return Err(Error::InvalidArgument("tIoU thresholds must be strictly increasing".into()));
            }
        }
        if self.max_per_video == 0 {
            return Err(Error::InvalidArgument("max_per_video must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `lo:step:hi` into `lo, lo+step, ...` up to and including `hi`.
pub fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("threshold range {spec:?} is not lo:step:hi"));
    let parts: Vec<f64> = spec.split(':').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
    let [lo, step, hi] = parts[..] else { return Err(bad()) };
    if !(step > 0.0) || !(hi >= lo) {
        return Err(bad());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    // round away the drift of repeated addition so labels print cleanly
    Ok((0..=n).map(|k| ((lo + k as f64 * step) * 1e9).round() / 1e9).collect())
}

/// True/false-positive flags of the detections of one class, in ranking
/// order, plus the number of ground-truth instances of that class.
fn match_class(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthInstance>],
    class: usize,
    threshold: f64,
) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(v, ds)| ds.iter().enumerate().filter(|(_, d)| d.class == class).map(move |(k, _)| (v, k)))
        .collect();
    ranked.sort_by(|&(va, ka), &(vb, kb)| {
        let (a, b) = (&dets[va][ka], &dets[vb][kb]);
        b.score.total_cmp(&a.score).then(a.start.total_cmp(&b.start)).then(va.cmp(&vb)).then(ka.cmp(&kb))
    });
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = gts.iter().flatten().filter(|g| g.class == class).count();
    let flags = ranked
        .iter()
        .map(|&(v, k)| {
            let seg = dets[v][k].segment();
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.get(v).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
                if gt.class != class || matched[v][j] {
                    continue;
                }
                let iou = seg.tiou_unchecked(&gt.segment());
                if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    matched[v][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, num_gt)
}

/// All-point interpolated AP from ranked TP flags.
fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    flags.iter().zip(&envelope).filter(|(hit, _)| **hit).map(|(_, p)| p).sum::<f64>() / num_gt as f64
}

/// Average precision of one class at one tIoU threshold. Returns 0 when the
/// class has no ground truth.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthInstance>],
    class: usize,
    threshold: f64,
) -> f64 {
    let (flags, num_gt) = match_class(dets, gts, class, threshold);
    ap_from_flags(&flags, num_gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<f64>,
    pub average: f64,
}

impl MapResult {
    /// `{"0.1": 0.5123, ..., "average_mAP": 0.4012}` with 4 decimals.
    pub fn to_json(&self) -> String {
        let mut parts: Vec<String> =
            self.thresholds.iter().zip(&self.per_threshold).map(|(t, m)| format!("\"{t}\": {m:.4}")).collect();
        parts.push(format!("\"average_mAP\": {:.4}", self.average));
        format!("{{{}}}", parts.join(", "))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("tIoU    mAP\n");
        for (t, m) in self.thresholds.iter().zip(&self.per_threshold) {
            out.push_str(&format!("{t:<7} {m:.4}\n"));
        }
        out.push_str(&format!("average {:.4}\n", self.average));
        out
    }
}

/// mAP at every configured threshold (mean over classes that have ground
/// truth) and its mean over thresholds.
pub fn mean_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthInstance>], config: &EvalConfig) -> Result<MapResult> {
    config.validate()?;
    if dets.len() > gts.len() {
        return Err(Error::InvalidArgument(format!("{} detection lists for {} videos", dets.len(), gts.len())));
    }
    let classes: BTreeSet<usize> = gts.iter().flatten().map(|g| g.class).collect();
    if classes.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let capped: Vec<Vec<Detection>> = dets
        .iter()
        .map(|ds| {
            let mut ds = ds.clone();
            ds.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.total_cmp(&b.start)));
            ds.truncate(config.max_per_video);
            ds
        })
        .collect();
    let per_threshold: Vec<f64> = config
        .thresholds
        .iter()
        .map(|&t| classes.iter().map(|&c| average_precision(&capped, gts, c, t)).sum::<f64>() / classes.len() as f64)
        .collect();
    let average = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(MapResult { thresholds: config.thresholds.clone(), per_threshold, average })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(start: f64, end: f64, class: usize, score: f64) -> Detection {
        Detection { start, end, class, score }
    }

    fn gt(start: usize, end: usize, class: usize) -> GroundTruthInstance {
        GroundTruthInstance::new(start, end, class)
    }

    /// Recomputes the greedy matching from scratch for every ranking prefix
    /// and integrates the precision envelope over recall steps.
    fn ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthInstance>], class: usize, thr: f64) -> f64 {
        let mut all: Vec<(usize, usize, Detection)> = Vec::new();
        for (v, ds) in dets.iter().enumerate() {
            for (k, d) in ds.iter().enumerate() {
                if d.class == class {
                    all.push((v, k, *d));
                }
            }
        }
        all.sort_by(|a, b| {
            b.2.score
                .partial_cmp(&a.2.score)
                .unwrap()
                .then(a.2.start.partial_cmp(&b.2.start).unwrap())
                .then((a.0, a.1).cmp(&(b.0, b.1)))
        });
        let npos = gts.iter().flatten().filter(|g| g.class == class).count();
        if npos == 0 {
            return 0.0;
        }
        let mut points = Vec::new();
        for n in 1..=all.len() {
            let mut used = std::collections::HashSet::new();
            let mut tp = 0;
            for &(v, _, d) in &all[..n] {
                let mut best = None;
                let mut best_iou = -1.0;
                for (j, g) in gts[v].iter().enumerate() {
                    let inter = (d.end.min(g.end as f64) - d.start.max(g.start as f64)).max(0.0);
                    let iou = inter / ((d.end - d.start) + (g.end - g.start) as f64 - inter);
                    if g.class == class && !used.contains(&(v, j)) && iou >= thr && iou > best_iou {
                        best = Some((v, j));
                        best_iou = iou;
                    }
                }
                if let Some(m) = best {
                    used.insert(m);
                    tp += 1;
                }
            }
            points.push((tp as f64 / npos as f64, tp as f64 / n as f64));
        }
        let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
        recalls.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in recalls {
            if r > prev {
                let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
                ap += (r - prev) * best;
                prev = r;
            }
        }
        ap
    }

    #[test]
    fn ap_examples() {
        let gts = vec![vec![gt(0, 10, 0)]];
        assert_eq!(average_precision(&[vec![det(1.0, 9.0, 0, 0.5)]], &gts, 0, 0.5), 1.0);
        assert_eq!(average_precision(&[vec![det(20.0, 30.0, 0, 0.5)]], &gts, 0, 0.5), 0.0);

        let gts = vec![vec![gt(0, 10, 0), gt(20, 30, 0)]];
        let dets = vec![vec![det(0.0, 10.0, 0, 0.9), det(40.0, 50.0, 0, 0.8), det(20.0, 30.0, 0, 0.7)]];
        let ap = average_precision(&dets, &gts, 0, 0.5);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn map_examples() {
        let gts = vec![vec![gt(0, 10, 0), gt(5, 20, 1)], vec![gt(3, 7, 2)]];
        let perfect: Vec<Vec<Detection>> =
            gts.iter().map(|g| g.iter().map(|g| det(g.start as f64, g.end as f64, g.class, 1.0)).collect()).collect();
        let r = mean_ap(&perfect, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.average, 1.0);
        assert!(r.to_json().ends_with("\"average_mAP\": 1.0000}"));
        assert!(r.to_json().starts_with("{\"0.1\": 1.0000, \"0.2\": 1.0000"));
        assert_eq!(mean_ap(&[], &gts, &EvalConfig::default()).unwrap().average, 0.0);
        assert!(matches!(mean_ap(&[], &[vec![]], &EvalConfig::default()), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn two_class_micro_case_matches_oracle() {
        let gts = vec![vec![gt(0, 10, 0), gt(12, 20, 1)], vec![gt(2, 6, 1)]];
        let dets = vec![
            vec![det(1.0, 9.0, 0, 0.9), det(11.0, 19.0, 1, 0.6), det(0.0, 4.0, 0, 0.3)],
            vec![det(2.0, 5.0, 1, 0.8), det(3.0, 8.0, 1, 0.8)],
        ];
        let cfg = EvalConfig::default();
        let r = mean_ap(&dets, &gts, &cfg).unwrap();
        for (k, &t) in cfg.thresholds.iter().enumerate() {
            let expect = (ap_oracle(&dets, &gts, 0, t) + ap_oracle(&dets, &gts, 1, t)) / 2.0;
            assert!((r.per_threshold[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!(parse_thresholds("0.1:0.1:0.9").unwrap(), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!(parse_thresholds("0.3:0.1:0.7").unwrap(), vec![0.3, 0.4, 0.5, 0.6, 0.7]);
        assert_eq!(parse_thresholds("0.5:0.1:0.5").unwrap(), vec![0.5]);
        assert!(parse_thresholds("0.5:0:0.9").is_err());
        assert!(parse_thresholds("0.5:0.1").is_err());
        assert!(EvalConfig::with_thresholds(vec![0.5, 0.5]).is_err());
        assert!(EvalConfig::with_thresholds(vec![0.0, 0.5]).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<GroundTruthInstance>>)> {
        let gts = proptest::collection::vec((0usize..2, 0usize..12, 1usize..8, 0usize..2), 0..=3);
        let dets = proptest::collection::vec((0usize..2, 0u32..24, 1u32..16, 0usize..2, 1u32..6), 0..=5);
        (gts, dets).prop_map(|(g, d)| {
            let mut gv = vec![Vec::new(), Vec::new()];
            for (v, s, l, c) in g {
                gv[v].push(gt(s, s + l, c));
            }
            let mut dv = vec![Vec::new(), Vec::new()];
            for (v, s, l, c, score) in d {
                // coarse scores make ties common
                dv[v].push(det(s as f64 * 0.5, (s + l) as f64 * 0.5, c, score as f64 / 5.0));
            }
            (dv, gv)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn ap_matches_exhaustive_oracle((dets, gts) in arb_case(), thr in 0.05f64..1.0) {
            for c in 0..2 {
                let a = average_precision(&dets, &gts, c, thr);
                let o = ap_oracle(&dets, &gts, c, thr);
                prop_assert!((a - o).abs() < 1e-12, "class {}: {} vs {}", c, a, o);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn ap_non_increasing_in_threshold((dets, gts) in arb_case()) {
            for c in 0..2 {
                let mut prev = f64::INFINITY;
                for k in 1..=9 {
                    let a = average_precision(&dets, &gts, c, k as f64 / 10.0);
                    prop_assert!(a <= prev + 1e-12);
                    prev = a;
                }
            }
        }

        #[test]
        fn equal_score_permutation_is_invariant((dets, gts) in arb_case(), thr in 0.1f64..0.9) {
            let reversed: Vec<Vec<Detection>> = dets.iter().map(|d| d.iter().rev().copied().collect()).collect();
            for c in 0..2 {
                // distinct detections with identical score and start are exchangeable only if identical
                let a = average_precision(&dets, &gts, c, thr);
                let b = average_precision(&reversed, &gts, c, thr);
                let ambiguous = dets.iter().any(|ds| ds.iter().enumerate().any(|(i, x)| ds.iter().skip(i + 1).any(|y|
                    x.class == y.class && x.score == y.score && x.start == y.start && x.end != y.end)));
                if !ambiguous {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
