//! Ground-truth location sampling.
//!
//! Each instance is routed to one pyramid level by its duration. At that
//! level a frame is in-action when its center coordinate lies inside the
//! instance; a frame covered by several instances takes the shortest one
//! (earlier start on equal durations). All other frames are background.
//!
//! Frame `j` of a level with stride `s` covers input frames
//! `[j*s, (j+1)*s)` and has center coordinate `(j + 0.5) * s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::Segment;

/// One annotated action: frames `[start, end)` of class `class`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

impl GroundTruthInstance {
    pub fn new(start: usize, end: usize, class: usize) -> Self {
        GroundTruthInstance { start, end, class }
    }

    /// Number of frames, `N_f`.
    pub fn num_frames(&self) -> usize {
        self.end - self.start
    }

    pub fn segment(&self) -> Segment {
        Segment { start: self.start as f64, end: self.end as f64 }
    }

    pub fn validate(&self, len: usize, num_classes: usize) -> Result<()> {
        if self.start >= self.end || self.end > len {
            return Err(Error::InvalidArgument(format!(
                "instance [{}, {}) invalid for a sequence of {len} frames",
                self.start, self.end
            )));
        }
        if self.class >= num_classes {
            return Err(Error::UnknownClass { class: self.class, num_classes });
        }
        Ok(())
    }

    fn contains_center(&self, center: f64) -> bool {
        center >= self.start as f64 && center < self.end as f64
    }
}

/// Half-open duration ranges, one per pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRanges(pub Vec<(f64, f64)>);

impl LevelRanges {
    /// `[0,8), [8,16), [16,32), ...` doubling per level, last one unbounded.
    pub fn doubling(levels: usize) -> Self {
        let mut ranges = Vec::with_capacity(levels);
        let mut lo = 0.0;
        let mut hi = 8.0;
        for l in 0..levels {
            let upper = if l + 1 == levels { f64::INFINITY } else { hi };
            ranges.push((lo, upper));
            lo = hi;
            hi *= 2.0;
        }
        LevelRanges(ranges)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn level_of(&self, duration: usize) -> Option<usize> {
        let d = duration as f64;
        self.0.iter().position(|&(lo, hi)| d >= lo && d < hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidArgument("level ranges are empty".into()));
        }
        for w in self.0.windows(2) {
            if w[0].1 != w[1].0 {
                return Err(Error::InvalidArgument("level ranges must be contiguous".into()));
            }
        }
        if self.0.iter().any(|&(lo, hi)| !(hi > lo)) {
            return Err(Error::InvalidArgument("level ranges must be increasing".into()));
        }
        Ok(())
    }
}

/// Instance indices routed to each level.
pub fn assign_levels(gts: &[GroundTruthInstance], ranges: &LevelRanges) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); ranges.len()];
    for (k, gt) in gts.iter().enumerate() {
        // ranges cover [0, inf) when validated; durations are >= 1
        let level = ranges.level_of(gt.num_frames()).unwrap_or(ranges.len() - 1);
        out[level].push(k);
    }
    out
}

/// Labels of one in-action frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositiveFrame {
    /// Index into the video's instance list.
    pub instance: usize,
    pub class: usize,
    /// Normalized position inside the instance, in `[-0.5, 0.5]`.
    pub center_distance: f64,
    /// Distances to start and end in stride units.
    pub target: (f64, f64),
}

/// Labels of one pyramid level. `None` marks a background frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelAssignment {
    pub stride: usize,
    pub frames: Vec<Option<PositiveFrame>>,
}

impl LevelAssignment {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn center(&self, frame: usize) -> f64 {
        frame_center(frame, self.stride)
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, &PositiveFrame)> {
        self.frames.iter().enumerate().filter_map(|(i, f)| f.as_ref().map(|p| (i, p)))
    }

    pub fn background(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames.iter().enumerate().filter(|(_, f)| f.is_none()).map(|(i, _)| i)
    }

    pub fn num_positive(&self) -> usize {
        self.frames.iter().filter(|f| f.is_some()).count()
    }
}

/// Labels of every level of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameAssignment {
    pub levels: Vec<LevelAssignment>,
    /// Instance indices routed to each level.
    pub level_instances: Vec<Vec<usize>>,
    pub num_pos: usize,
}

pub fn frame_center(frame: usize, stride: usize) -> f64 {
    (frame as f64 + 0.5) * stride as f64
}

/// Labels for one level of `len` frames at `stride`, given the instances
/// routed to it (indices into `gts`).
pub fn assign_frames(len: usize, stride: usize, gts: &[GroundTruthInstance], instances: &[usize]) -> LevelAssignment {
    let frames = (0..len)
        .map(|j| {
            let center = frame_center(j, stride);
            let best = instances
                .iter()
                .copied()
                .filter(|&k| gts[k].contains_center(center))
                .min_by_key(|&k| (gts[k].num_frames(), gts[k].start, k))?;
            let gt = &gts[best];
            Some(PositiveFrame {
                instance: best,
                class: gt.class,
                center_distance: level_center_distance(center, gt),
                target: offsets_unchecked(center, gt, stride),
            })
        })
        .collect();
    LevelAssignment { stride, frames }
}

/// Labels for every level of a video of `len` input frames.
pub fn assign_video(len: usize, gts: &[GroundTruthInstance], ranges: &LevelRanges) -> FrameAssignment {
    let level_instances = assign_levels(gts, ranges);
    let levels: Vec<LevelAssignment> = level_instances
        .iter()
        .enumerate()
        .map(|(l, inst)| {
            let stride = 1usize << l;
            assign_frames(level_len(len, l), stride, gts, inst)
        })
        .collect();
    let num_pos = levels.iter().map(LevelAssignment::num_positive).sum();
    FrameAssignment { levels, level_instances, num_pos }
}

/// Number of frames at pyramid level `level`: `ceil(len / 2^level)`.
pub fn level_len(len: usize, level: usize) -> usize {
    len.div_ceil(1 << level)
}

/// Normalized distance of input frame `frame` to the instance center:
/// `-0.5` at the first frame, `+0.5` at the last, `0` when `N_f = 1`.
pub fn center_distance(frame: usize, gt: &GroundTruthInstance) -> Result<f64> {
    if frame < gt.start || frame >= gt.end {
        return Err(Error::FrameOutsideInstance { frame: frame as f64, start: gt.start, end: gt.end });
    }
    Ok(center_distance_unchecked(frame as f64, gt))
}

fn center_distance_unchecked(frame: f64, gt: &GroundTruthInstance) -> f64 {
    let n = gt.num_frames();
    if n <= 1 {
        return 0.0;
    }
    (frame - gt.start as f64) / (n - 1) as f64 - 0.5
}

/// Center distance for a level frame, measured in input-frame units from its
/// center coordinate and clamped to `[-0.5, 0.5]`.
pub fn level_center_distance(center: f64, gt: &GroundTruthInstance) -> f64 {
    center_distance_unchecked(center - 0.5, gt).clamp(-0.5, 0.5)
}

/// Distances from `center` to the instance start and end, in stride units.
pub fn regression_targets(center: f64, gt: &GroundTruthInstance, stride: usize) -> Result<(f64, f64)> {
    if !(center >= gt.start as f64 && center <= gt.end as f64) {
        return Err(Error::FrameOutsideInstance { frame: center, start: gt.start, end: gt.end });
    }
    Ok(offsets_unchecked(center, gt, stride))
}

fn offsets_unchecked(center: f64, gt: &GroundTruthInstance, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((center - gt.start as f64) / s, (gt.end as f64 - center) / s)
}

/// Inverse of [`regression_targets`].
pub fn decode_offsets(center: f64, offsets: (f64, f64), stride: usize) -> Segment {
    let s = stride as f64;
    Segment { start: center - offsets.0 * s, end: center + offsets.1 * s }
}
