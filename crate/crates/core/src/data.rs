//! Synthetic datasets and file formats.
//!
//! Feature files (`.aslf`) hold one `T x D` sequence:
//!
//! | offset | size      | content                         |
//! |--------|-----------|---------------------------------|
//! | 0      | 4         | magic `ASLF`                    |
//! | 4      | 2         | version, u16 LE (currently 1)   |
//! | 6      | 4         | `T`, u32 LE                     |
//! | 10     | 4         | `D`, u32 LE                     |
//! | 14     | `4*T*D`   | f32 LE values, row-major        |
//!
//! Annotations are JSON objects `{"video_id", "T", "instances": [{"start",
//! "end", "class"}]}`; predictions use the same shape with `"score"` added
//! and real-valued bounds. A dataset directory has `train/` and `test/`
//! subdirectories with `<id>.aslf` and `<id>.json` per video.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assignment::GroundTruthInstance;
use crate::error::{Error, Result};
use crate::inference::Detection;
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"ASLF";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 14;

/// A `T x D` feature sequence as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    len: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Features {
    pub fn new(len: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != len * dim {
            return Err(Error::Shape(format!("{} values for a {len}x{dim} sequence", data.len())));
        }
        Ok(Features { len, dim, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec_unchecked(self.len, self.dim, self.data.iter().map(|&v| v as f64).collect())
    }
}

pub fn encode_features(f: &Features) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.len as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim as u32).to_le_bytes());
    for v in &f.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Features> {
    let err = |offset: usize, message: String| Error::Format { offset: offset as u64, message };
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (len, dim) = (u32_at(6), u32_at(10));
    let expected = len
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| err(6, format!("size {len}x{dim} overflows")))?;
    if bytes.len() < expected {
        return Err(err(bytes.len(), format!("truncated data: expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(err(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let data: Vec<f32> =
        bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(err(HEADER_LEN + 4 * k, "non-finite feature value".into()));
    }
    Ok(Features { len, dim, data })
}

pub fn write_features(path: &Path, f: &Features) -> Result<()> {
    fs::write(path, encode_features(f)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Features> {
    decode_features(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub video_id: String,
    #[serde(rename = "T")]
    pub len: usize,
    pub instances: Vec<GroundTruthInstance>,
}

impl Annotation {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.instances.iter().try_for_each(|g| g.validate(self.len, num_classes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoPredictions {
    pub video_id: String,
    #[serde(rename = "T")]
    pub len: usize,
    pub instances: Vec<Detection>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_annotation(path: &Path, a: &Annotation) -> Result<()> {
    write_json(path, a)
}

pub fn read_annotation(path: &Path) -> Result<Annotation> {
    read_json(path)
}

/// Predictions file: a JSON array with one object per video.
pub fn write_predictions(path: &Path, preds: &[VideoPredictions]) -> Result<()> {
    write_json(path, &preds)
}

pub fn read_predictions(path: &Path) -> Result<Vec<VideoPredictions>> {
    read_json(path)
}

/// One video: annotation plus features.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub annotation: Annotation,
    pub features: Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    #[serde(rename = "T")]
    pub len: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    /// Inclusive range of instances per video.
    pub instances: (usize, usize),
    /// Inclusive range of instance durations in frames.
    pub duration: (usize, usize),
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// The reference benchmark set.
    pub fn reference() -> Self {
        SyntheticConfig {
            num_classes: 3,
            train_videos: 200,
            test_videos: 50,
            len: 256,
            dim: 32,
            instances: (1, 4),
            duration: (8, 64),
            noise: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes == 0 || self.dim == 0 || self.len == 0 {
            return bad("classes, T and D must be positive".into());
        }
        if self.instances.0 > self.instances.1 {
            return bad(format!("instance range {:?} is empty", self.instances));
        }
        if self.duration.0 == 0 || self.duration.0 > self.duration.1 {
            return bad(format!("duration range {:?} is invalid", self.duration));
        }
        if self.duration.1 > self.len {
            return bad(format!("duration {} exceeds T = {}", self.duration.1, self.len));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be a nonnegative number", self.noise));
        }
        Ok(())
    }
}

/// Sub-action phase of a frame at relative position `u = (k + 0.5) / N_f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Start,
    Middle,
    End,
}

pub fn phase_of(k: usize, num_frames: usize) -> Phase {
    let u = (k as f64 + 0.5) / num_frames as f64;
    if u < 0.2 {
        Phase::Start
    } else if u >= 0.8 {
        Phase::End
    } else {
        Phase::Middle
    }
}

/// Start, middle and end prototype of every class, each of length `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes(pub Vec<[Vec<f64>; 3]>);

impl Prototypes {
    pub fn get(&self, class: usize, phase: Phase) -> &[f64] {
        &self.0[class][phase as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub prototypes: Prototypes,
    pub train: Vec<Video>,
    pub test: Vec<Video>,
}

/// Deterministic synthetic dataset.
///
/// Instances are placed without overlap when a free slot is found within a
/// bounded number of tries; otherwise the overlap is kept and the later
/// instance's pattern is drawn on top.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prototypes = Prototypes(
        (0..config.num_classes)
            .map(|_| std::array::from_fn(|_| (0..config.dim).map(|_| rng.sample(StandardNormal)).collect()))
            .collect(),
    );
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let video = |id: String, rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(config.instances.0..=config.instances.1);
        let mut instances: Vec<GroundTruthInstance> = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.gen_range(0..config.num_classes);
            let dur = rng.gen_range(config.duration.0..=config.duration.1);
            let mut start = rng.gen_range(0..=config.len - dur);
            for _ in 0..50 {
                if instances.iter().all(|g| start + dur <= g.start || start >= g.end) {
                    break;
                }
                start = rng.gen_range(0..=config.len - dur);
            }
            instances.push(GroundTruthInstance::new(start, start + dur, class));
        }
        let mut data: Vec<f32> = Vec::with_capacity(config.len * config.dim);
        let mut clean = vec![0.0f64; config.len * config.dim];
        for g in &instances {
            for t in g.start..g.end {
                let proto = prototypes.get(g.class, phase_of(t - g.start, g.num_frames()));
                clean[t * config.dim..(t + 1) * config.dim].copy_from_slice(proto);
            }
        }
        for v in clean {
            let e: f64 = if config.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push((v + e) as f32);
        }
        instances.sort_by_key(|g| (g.start, g.end, g.class));
        let annotation = Annotation { video_id: id, len: config.len, instances };
        Video { annotation, features: Features { len: config.len, dim: config.dim, data } }
    };
    let train = (0..config.train_videos).map(|k| video(format!("train_{k:04}"), &mut rng)).collect();
    let test = (0..config.test_videos).map(|k| video(format!("test_{k:04}"), &mut rng)).collect();
    Ok(SyntheticDataset { prototypes, train, test })
}

pub fn write_split(dir: &Path, videos: &[Video]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in videos {
        write_features(&dir.join(format!("{}.aslf", v.annotation.video_id)), &v.features)?;
        write_annotation(&dir.join(format!("{}.json", v.annotation.video_id)), &v.annotation)?;
    }
    Ok(())
}

/// Writes `train/` and `test/` under `dir`.
pub fn write_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    write_split(&dir.join("train"), &ds.train)?;
    write_split(&dir.join("test"), &ds.test)
}

fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Every annotation in `dir`, sorted by file name.
pub fn read_annotations(dir: &Path) -> Result<Vec<Annotation>> {
    files_with_extension(dir, "json")?.iter().map(|p| read_annotation(p)).collect()
}

/// Every video in `dir`, sorted by id. Each annotation needs a matching
/// feature file of the same length.
pub fn load_split(dir: &Path) -> Result<Vec<Video>> {
    let mut out = Vec::new();
    for path in files_with_extension(dir, "json")? {
        let annotation = read_annotation(&path)?;
        let fpath = path.with_extension("aslf");
        let features = read_features(&fpath)?;
        if features.len() != annotation.len {
            return Err(Error::Shape(format!(
                "{}: annotation T = {} but features have {} frames",
                fpath.display(),
                annotation.len,
                features.len()
            )));
        }
        out.push(Video { annotation, features });
    }
    Ok(out)
}

/// Every feature file in `dir` with its file stem as video id, sorted.
pub fn read_feature_dir(dir: &Path) -> Result<Vec<(String, Features)>> {
    files_with_extension(dir, "aslf")?
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, read_features(&p)?))
        })
        .collect()
}

/// Deterministic shuffled batches of indices `0..n`.
pub fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
