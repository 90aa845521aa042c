//! Lip landmark sequences and pivot-distance features.
//!
//! Each frame carries 8 lip points normalized to the lip crop. One point is the
//! pivot; per frame the distances from the pivot to the other seven points are
//! measured with one or more metrics and the results are concatenated
//! frame-major into a single feature row.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{self, FrameTensor, TensorError};

pub const LANDMARKS: usize = 8;
/// Minimum guaranteed frames in a 10 s clip at 25 fps.
pub const DEFAULT_FRAMES: usize = 250;

/// JSON schema for landmark files.
pub const LANDMARK_SCHEMA: &str = include_str!("../schemas/landmarks.schema.json");

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("frame {frame} has {count} points, expected {LANDMARKS}")]
    PointCount { frame: usize, count: usize },
    #[error("frame {frame}, point {point} lies outside [0, 1]^2")]
    OutOfRange { frame: usize, point: usize },
    #[error("held flags cover {flags} frames, the sequence has {frames}")]
    HeldLength { flags: usize, frames: usize },
    #[error("sequence has {0} frames, at least 2 are required")]
    TooFewFrames(usize),
    #[error("fps must be positive and finite, got {0}")]
    InvalidFps(f64),
    #[error("pivot {0} outside [0, 7]")]
    InvalidPivot(usize),
    #[error("resampled frame count {0} is below 2")]
    InvalidFrameCount(usize),
    #[error("metric set is empty")]
    EmptyMetricSet,
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("landmark parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("feature sidecar lists {ids} clips but the tensor has shape {shape:?}")]
    SidecarMismatch { ids: usize, shape: Vec<usize> },
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Serialize for Point {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x, self.y].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Point {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x, y] = <[f64; 2]>::deserialize(d)?;
        Ok(Point { x, y })
    }
}

fn check(p: Point, q: Point) -> Result<()> {
    if p.is_finite() && q.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::NonFinite)
    }
}

pub fn euclidean(p: Point, q: Point) -> Result<f64> {
    check(p, q)?;
    Ok((p.x - q.x).hypot(p.y - q.y))
}

pub fn manhattan(p: Point, q: Point) -> Result<f64> {
    check(p, q)?;
    Ok((p.x - q.x).abs() + (p.y - q.y).abs())
}

/// Cosine distance together with the zero-norm diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineDistance {
    pub value: f64,
    /// Set when either operand had zero norm; `value` is then 1.0.
    pub zero_norm: bool,
}

/// `1 - cos(angle)` between the two points taken as position vectors.
pub fn cosine_distance(p: Point, q: Point) -> Result<CosineDistance> {
    check(p, q)?;
    let np = p.x.hypot(p.y);
    let nq = q.x.hypot(q.y);
    if np == 0.0 || nq == 0.0 {
        return Ok(CosineDistance { value: 1.0, zero_norm: true });
    }
    let cos = ((p.x * q.x + p.y * q.y) / (np * nq)).clamp(-1.0, 1.0);
    Ok(CosineDistance { value: 1.0 - cos, zero_norm: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Manhattan,
    Cosine,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Euclidean, Metric::Manhattan, Metric::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Manhattan => "manhattan",
            Metric::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| GeometryError::UnknownMetric(s.to_string()))
    }
}

/// Non-empty set of metrics, always held in the canonical order
/// euclidean, manhattan, cosine.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Metric>", into = "Vec<Metric>")]
pub struct MetricSet(Vec<Metric>);

impl MetricSet {
    pub fn new(metrics: impl IntoIterator<Item = Metric>) -> Result<Self> {
        let mut v: Vec<Metric> = metrics.into_iter().collect();
        v.sort();
        v.dedup();
        if v.is_empty() {
            return Err(GeometryError::EmptyMetricSet);
        }
        Ok(Self(v))
    }

    pub fn all() -> Self {
        Self(Metric::ALL.to_vec())
    }

    pub fn single(m: Metric) -> Self {
        Self(vec![m])
    }

    pub fn metrics(&self) -> &[Metric] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<Vec<Metric>> for MetricSet {
    type Error = GeometryError;

    fn try_from(v: Vec<Metric>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MetricSet> for Vec<Metric> {
    fn from(m: MetricSet) -> Self {
        m.0
    }
}

impl std::str::FromStr for MetricSet {
    type Err = GeometryError;

    /// Comma-separated metric names, or `all`.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(Self::all());
        }
        let parsed = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<Vec<Metric>>>()?;
        Self::new(parsed)
    }
}

impl fmt::Display for MetricSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|m| m.name()).collect();
        f.write_str(&names.join("+"))
    }
}

/// Per-clip landmark trajectories. Each frame holds exactly 8 points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandmarkSequence {
    pub clip_id: String,
    pub fps: f64,
    frames: Vec<[Point; LANDMARKS]>,
}

#[derive(Deserialize)]
struct RawSequence {
    clip_id: String,
    fps: f64,
    frames: Vec<Vec<Point>>,
    /// Per-frame flag set by the landmark adapter when a frame repeats the
    /// previous detection.
    #[serde(default)]
    held: Option<Vec<bool>>,
}

impl LandmarkSequence {
    pub fn new(clip_id: impl Into<String>, fps: f64, frames: Vec<[Point; LANDMARKS]>) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(GeometryError::InvalidFps(fps));
        }
        if frames.len() < 2 {
            return Err(GeometryError::TooFewFrames(frames.len()));
        }
        if !frames.iter().flatten().all(|p| p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { clip_id: clip_id.into(), fps, frames })
    }

    /// Parses a landmark file. File coordinates must be normalized to [0, 1].
    pub fn from_json(json: &str) -> Result<Self> {
        let raw: RawSequence = serde_json::from_str(json)?;
        if let Some(held) = &raw.held {
            if held.len() != raw.frames.len() {
                return Err(GeometryError::HeldLength { flags: held.len(), frames: raw.frames.len() });
            }
        }
        for (frame, f) in raw.frames.iter().enumerate() {
            if let Some(point) = f.iter().position(|p| !((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y))) {
                return Err(GeometryError::OutOfRange { frame, point });
            }
        }
        let frames = raw
            .frames
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                <[Point; LANDMARKS]>::try_from(f.as_slice())
                    .map_err(|_| GeometryError::PointCount { frame: i, count: f.len() })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(raw.clip_id, raw.fps, frames)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("landmarks serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn frames(&self) -> &[[Point; LANDMARKS]] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }
}

/// Linear resampling to exactly `frames` frames.
///
/// Output frame `t` sits at input position `t * (N - 1) / (frames - 1)`. The
/// position is split into an integer part and remainder with integer
/// arithmetic, so positions that land on input frames copy them exactly.
pub fn resample_temporal(seq: &LandmarkSequence, frames: usize) -> Result<LandmarkSequence> {
    if frames < 2 {
        return Err(GeometryError::InvalidFrameCount(frames));
    }
    let n = seq.frames.len();
    let span = frames - 1;
    let out = (0..frames)
        .map(|t| {
            let num = t * (n - 1);
            let (i0, rem) = (num / span, num % span);
            if rem == 0 {
                return seq.frames[i0];
            }
            let w = rem as f64 / span as f64;
            let (a, b) = (&seq.frames[i0], &seq.frames[i0 + 1]);
            std::array::from_fn(|k| Point {
                x: a[k].x + (b[k].x - a[k].x) * w,
                y: a[k].y + (b[k].y - a[k].y) * w,
            })
        })
        .collect();
    Ok(LandmarkSequence {
        clip_id: seq.clip_id.clone(),
        fps: frames as f64 * seq.fps / n as f64,
        frames: out,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureParams {
    pub pivot: usize,
    pub metrics: MetricSet,
    pub frames: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self { pivot: 0, metrics: MetricSet::all(), frames: DEFAULT_FRAMES }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<()> {
        if self.pivot >= LANDMARKS {
            return Err(GeometryError::InvalidPivot(self.pivot));
        }
        if self.frames < 2 {
            return Err(GeometryError::InvalidFrameCount(self.frames));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.frames * (LANDMARKS - 1) * self.metrics.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub clip_id: String,
    pub params: FeatureParams,
    pub values: Vec<f64>,
    /// Cosine evaluations that hit a zero-norm operand.
    pub zero_norm_count: usize,
}

/// Resamples to `params.frames` and lays out, frame-major, the pivot distance
/// to each non-pivot landmark (ascending index) under each chosen metric.
pub fn extract_features(seq: &LandmarkSequence, params: &FeatureParams) -> Result<FeatureVector> {
    params.validate()?;
    let seq = resample_temporal(seq, params.frames)?;
    let mut values = Vec::with_capacity(params.feature_len());
    let mut zero_norm_count = 0;
    for frame in &seq.frames {
        let pivot = frame[params.pivot];
        for (k, &p) in frame.iter().enumerate() {
            if k == params.pivot {
                continue;
            }
            for &m in params.metrics.metrics() {
                let d = match m {
                    Metric::Euclidean => euclidean(pivot, p)?,
                    Metric::Manhattan => manhattan(pivot, p)?,
                    Metric::Cosine => {
                        let c = cosine_distance(pivot, p)?;
                        zero_norm_count += usize::from(c.zero_norm);
                        c.value
                    }
                };
                values.push(d);
            }
        }
    }
    Ok(FeatureVector {
        clip_id: seq.clip_id,
        params: params.clone(),
        values,
        zero_norm_count,
    })
}

/// Extracts every sequence (in parallel) into an `(n_clips, feature_len)` matrix.
pub fn feature_matrix(seqs: &[LandmarkSequence], params: &FeatureParams) -> Result<Array2<f64>> {
    use rayon::prelude::*;
    params.validate()?;
    let rows = seqs
        .par_iter()
        .map(|s| extract_features(s, params).map(|f| f.values))
        .collect::<Result<Vec<_>>>()?;
    let width = params.feature_len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((seqs.len(), width), flat).expect("rows share feature_len"))
}

/// JSON sidecar written next to a feature tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub clip_ids: Vec<String>,
    pub params: FeatureParams,
}

pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
    tensor_path.with_extension("json")
}

/// Writes features as an f64 LBTF tensor plus a JSON sidecar with row order.
pub fn write_feature_file(path: &Path, matrix: &Array2<f64>, sidecar: &FeatureSidecar) -> Result<()> {
    let tensor = FrameTensor::from_f64(
        vec![matrix.nrows(), matrix.ncols()],
        matrix.iter().copied().collect(),
    )?;
    preprocess::write_tensor(&tensor, path)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(&side, json).map_err(|source| GeometryError::Io { path: side, source })
}

pub fn read_feature_file(path: &Path) -> Result<(Array2<f64>, FeatureSidecar)> {
    let tensor = preprocess::read_tensor(path)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|source| GeometryError::Io { path: side, source })?;
    let sidecar: FeatureSidecar = serde_json::from_str(&text)?;
    let shape = tensor.dims().to_vec();
    let data = tensor.into_f64().ok_or(TensorError::DtypeMismatch)?;
    if shape.len() != 2 || shape[0] != sidecar.clip_ids.len() {
        return Err(GeometryError::SidecarMismatch { ids: sidecar.clip_ids.len(), shape });
    }
    let m = Array2::from_shape_vec((shape[0], shape[1]), data).expect("shape checked");
    Ok((m, sidecar))
}
