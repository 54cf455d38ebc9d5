//! Sequences, synthetic data with ground-truth deformations, the NDGR grid
//! format and JSON manifests.
//!
//! NDGR layout (little-endian): magic `NDGR` | version u16 = 1 | ndim u8 |
//! dims u32 × ndim | channels u32 | dtype u8 (0 = f32) | payload, row-major,
//! channel-fastest. Grids are held as f64 in memory and stored as f32, so a
//! file → grid → file round trip is byte-exact while grid → file → grid is
//! exact only for f32-representable values.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Field, GridError, ScalarGrid, VectorGrid};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("a sequence needs at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("observation times must be strictly ascending (index {0})")]
    NotAscending(usize),
    #[error("duplicate time {time} in manifest entry {path}")]
    DuplicateTime { time: f64, path: String },
    #[error("frame {path} has dims {dims:?}, expected {expected:?}")]
    MixedDims {
        path: String,
        dims: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("frame {index} has dims {dims:?}, expected {expected:?}")]
    FrameDims {
        index: usize,
        dims: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("manifest entry {path}: {source}")]
    Frame {
        path: String,
        #[source]
        source: Box<DataError>,
    },
    #[error("manifest entry {0} is a vector field, expected an image")]
    NotAnImage(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("invalid synthetic spec: {0}")]
    Synth(String),
    #[error("shape leaves the grid at frame {frame}: {detail}")]
    OffGrid { frame: usize, detail: String },
    #[error("not an NDGR file: magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported NDGR version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported NDGR rank {0}")]
    BadRank(u8),
    #[error("NDGR dims {0:?} overflow the addressable size")]
    DimOverflow(Vec<u32>),
    #[error("unsupported NDGR dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("NDGR channel count {channels} fits neither a scalar nor a {ndim}-d vector grid")]
    BadChannels { channels: u32, ndim: u8 },
    #[error("NDGR truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("NDGR has trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Ordered observations `(I_k, t_k)` with times normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    frames: Vec<ScalarGrid>,
    times: Vec<f64>,
    normalized: Vec<f64>,
}

impl SequenceDataset {
    /// Frames must already be in strictly ascending time order.
    /// Normalization is `(t − t_0)/(t_max − t_0)`.
    pub fn new(frames: Vec<ScalarGrid>, times: Vec<f64>) -> Result<Self> {
        if frames.len() < 2 || frames.len() != times.len() {
            return Err(DataError::TooShort(frames.len().min(times.len())));
        }
        for (i, w) in times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(DataError::NotAscending(i + 1));
            }
        }
        let expected = frames[0].dims().to_vec();
        for (index, f) in frames.iter().enumerate() {
            if f.dims() != expected.as_slice() {
                return Err(DataError::FrameDims {
                    index,
                    dims: f.dims().to_vec(),
                    expected,
                });
            }
        }
        let t0 = times[0];
        let span = times[times.len() - 1] - t0;
        let normalized = times.iter().map(|t| (t - t0) / span).collect();
        Ok(Self {
            frames,
            times,
            normalized,
        })
    }

    pub fn frames(&self) -> &[ScalarGrid] {
        &self.frames
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn normalized_times(&self) -> &[f64] {
        &self.normalized
    }

    pub fn baseline(&self) -> &ScalarGrid {
        &self.frames[0]
    }

    pub fn dims(&self) -> &[usize] {
        self.frames[0].dims()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The sequence with observation `index` held out. Remaining frames keep
    /// their normalized times.
    pub fn without(&self, index: usize) -> Result<Self> {
        if index == 0 || index >= self.len() {
            return Err(DataError::Synth(format!(
                "cannot hold out observation {index}"
            )));
        }
        if self.len() < 3 {
            return Err(DataError::TooShort(self.len() - 1));
        }
        let keep = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .enumerate()
                .filter(|&(i, _)| i != index)
                .map(|(_, &x)| x)
                .collect()
        };
        let frames = self
            .frames
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != index)
            .map(|(_, f)| f.clone())
            .collect();
        Ok(Self {
            frames,
            times: keep(&self.times),
            normalized: keep(&self.normalized),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    TranslateDisk,
    ScaleDisk,
    ContractRing,
}

impl FromStr for SynthKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "translate-disk" => Ok(Self::TranslateDisk),
            "scale-disk" => Ok(Self::ScaleDisk),
            "contract-ring" => Ok(Self::ContractRing),
            other => Err(format!(
                "unknown kind {other:?} (translate-disk, scale-disk, contract-ring)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub size: Vec<usize>,
    pub frames: usize,
    /// Total translation in voxels (translate-disk), final scale ratio
    /// (scale-disk) or final radius ratio (contract-ring).
    pub magnitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub struct SynthSequence {
    pub dataset: SequenceDataset,
    /// Backward-warp displacement taking frame 0 to frame k, one per frame
    /// (the first is zero).
    pub ground_truth: Vec<VectorGrid>,
}

/// Width of the sigmoid edge profile, in voxels.
const EDGE: f64 = 1.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates a sequence whose frame k is the analytic frame-0 shape pulled
/// back through the ground-truth deformation at parameter k/(frames−1).
pub fn synth_sequence(spec: &SynthSpec) -> Result<SynthSequence> {
    let nd = spec.size.len();
    if nd != 2 && nd != 3 || spec.size.iter().any(|&n| n < 2) {
        return Err(DataError::Synth(format!(
            "size must have 2 or 3 axes of length ≥ 2, got {:?}",
            spec.size
        )));
    }
    if spec.frames < 2 {
        return Err(DataError::Synth(format!(
            "need at least 2 frames, got {}",
            spec.frames
        )));
    }
    if !spec.magnitude.is_finite() || !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return Err(DataError::Synth(
            "magnitude and noise_sigma must be finite, noise_sigma ≥ 0".into(),
        ));
    }
    let scaling = spec.kind != SynthKind::TranslateDisk;
    if scaling && spec.magnitude <= 0.0 {
        return Err(DataError::Synth(format!(
            "scale ratio must be positive, got {}",
            spec.magnitude
        )));
    }

    let min_n = *spec.size.iter().min().expect("non-empty") as f64;
    let centre: Vec<f64> = spec.size.iter().map(|&n| (n as f64 - 1.0) / 2.0).collect();
    let (outer, inner) = match spec.kind {
        SynthKind::TranslateDisk | SynthKind::ScaleDisk => (0.25 * min_n, None),
        SynthKind::ContractRing => (0.3 * min_n, Some(0.15 * min_n)),
    };
    // centre of the shape in frame 0
    let mut c0 = centre.clone();
    if spec.kind == SynthKind::TranslateDisk {
        c0[0] -= spec.magnitude / 2.0;
    }
    let profile = |y: &[f64]| -> f64 {
        let r = y
            .iter()
            .zip(&c0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let disk = sigmoid((outer - r) / EDGE);
        match inner {
            Some(ri) => disk - sigmoid((ri - r) / EDGE),
            None => disk,
        }
    };

    let last = (spec.frames - 1) as f64;
    // backward displacement at x for frame k
    let displacement = |k: usize, x: &[usize], out: &mut [f64]| {
        let s = k as f64 / last;
        match spec.kind {
            SynthKind::TranslateDisk => {
                out.fill(0.0);
                out[0] = -spec.magnitude * s;
            }
            _ => {
                let scale = 1.0 + (spec.magnitude - 1.0) * s;
                for a in 0..out.len() {
                    out[a] = (x[a] as f64 - c0[a]) * (1.0 / scale - 1.0);
                }
            }
        }
    };

    let reach = outer + 4.0 * EDGE;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::Synth(e.to_string())))
        .transpose()?;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut truth = Vec::with_capacity(spec.frames);
    for k in 0..spec.frames {
        let s = k as f64 / last;
        // shape centre and extent in frame k
        let (ck, rk) = match spec.kind {
            SynthKind::TranslateDisk => {
                let mut c = c0.clone();
                c[0] += spec.magnitude * s;
                (c, reach)
            }
            _ => (c0.clone(), reach * (1.0 + (spec.magnitude - 1.0) * s)),
        };
        for (a, (&c, &n)) in ck.iter().zip(&spec.size).enumerate() {
            if c - rk < 0.0 || c + rk > (n - 1) as f64 {
                return Err(DataError::OffGrid {
                    frame: k,
                    detail: format!(
                        "axis {a} spans [{:.2}, {:.2}] on a grid of length {n}",
                        c - rk,
                        c + rk
                    ),
                });
            }
        }
        let u = VectorGrid::from_fn(spec.size.clone(), |x, o| displacement(k, x, o))?;
        let mut y = vec![0.0; nd];
        let img = ScalarGrid::from_fn(spec.size.clone(), |x| {
            let d = u.get(x);
            for a in 0..nd {
                y[a] = x[a] as f64 + d[a];
            }
            let v = profile(&y);
            match &noise {
                Some(n) => (v + n.sample(&mut rng)).clamp(0.0, 1.0),
                None => v,
            }
        })?;
        frames.push(img);
        truth.push(u);
    }
    let times = (0..spec.frames).map(|k| k as f64 / last).collect();
    Ok(SynthSequence {
        dataset: SequenceDataset::new(frames, times)?,
        ground_truth: truth,
    })
}

pub const NDGR_MAGIC: &[u8; 4] = b"NDGR";
pub const NDGR_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// A grid read back from NDGR; the channel count decides the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Scalar(ScalarGrid),
    Vector(VectorGrid),
}

impl Grid {
    pub fn into_scalar(self) -> Option<ScalarGrid> {
        match self {
            Grid::Scalar(g) => Some(g),
            Grid::Vector(_) => None,
        }
    }

    pub fn into_vector(self) -> Option<VectorGrid> {
        match self {
            Grid::Vector(g) => Some(g),
            Grid::Scalar(_) => None,
        }
    }
}

pub fn encode_grid<F: Field>(grid: &F) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + 2 + 1 + 4 * grid.ndim() + 5 + grid.data().len() * 4);
    buf.extend_from_slice(NDGR_MAGIC);
    buf.extend_from_slice(&NDGR_VERSION.to_le_bytes());
    buf.push(grid.ndim() as u8);
    for &d in grid.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(grid.channels() as u32).to_le_bytes());
    buf.push(DTYPE_F32);
    for &v in grid.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(DataError::Truncated {
                expected: n,
                actual: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    if &bytes[..4] != NDGR_MAGIC {
        return Err(DataError::BadMagic(bytes[..4].to_vec()));
    }
    need(7)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != NDGR_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let ndim = bytes[6];
    if ndim != 2 && ndim != 3 {
        return Err(DataError::BadRank(ndim));
    }
    let head = 7 + 4 * ndim as usize + 4 + 1;
    need(head)?;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let dims32: Vec<u32> = (0..ndim as usize).map(|a| u32_at(7 + 4 * a)).collect();
    let channels = u32_at(7 + 4 * ndim as usize);
    let dtype = bytes[head - 1];
    if dtype != DTYPE_F32 {
        return Err(DataError::UnsupportedDtype(dtype));
    }
    if channels != 1 && channels != ndim as u32 {
        return Err(DataError::BadChannels { channels, ndim });
    }
    let count = dims32
        .iter()
        .try_fold(channels as usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(head))
        .ok_or_else(|| DataError::DimOverflow(dims32.clone()))?;
    need(count)?;
    if bytes.len() > count {
        return Err(DataError::TrailingBytes {
            expected: count,
            actual: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes[head..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let dims: Vec<usize> = dims32.iter().map(|&d| d as usize).collect();
    Ok(if channels == 1 {
        Grid::Scalar(ScalarGrid::new(dims, data)?)
    } else {
        Grid::Vector(VectorGrid::new(dims, data)?)
    })
}

pub fn write_grid<F: Field>(grid: &F, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_grid(grid))?;
    Ok(())
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    decode_grid(&std::fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub frames: Vec<ManifestEntry>,
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads every frame listed in the manifest (paths relative to its
/// directory), sorted by time.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<SequenceDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.frames.len() < 2 {
        return Err(DataError::TooShort(manifest.frames.len()));
    }
    if let Some(e) = manifest.frames.iter().find(|e| !e.time.is_finite()) {
        return Err(DataError::Manifest(format!(
            "entry {} has a non-finite time",
            e.path
        )));
    }
    manifest.frames.sort_by(|a, b| a.time.total_cmp(&b.time));
    for w in manifest.frames.windows(2) {
        if w[0].time == w[1].time {
            return Err(DataError::DuplicateTime {
                time: w[1].time,
                path: w[1].path.clone(),
            });
        }
    }
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut frames: Vec<ScalarGrid> = Vec::with_capacity(manifest.frames.len());
    for e in &manifest.frames {
        let grid = read_grid(dir.join(&e.path)).map_err(|source| DataError::Frame {
            path: e.path.clone(),
            source: Box::new(source),
        })?;
        let img = grid
            .into_scalar()
            .ok_or_else(|| DataError::NotAnImage(e.path.clone()))?;
        if let Some(first) = frames.first() {
            if first.dims() != img.dims() {
                return Err(DataError::MixedDims {
                    path: e.path.clone(),
                    dims: img.dims().to_vec(),
                    expected: first.dims().to_vec(),
                });
            }
        }
        frames.push(img);
    }
    SequenceDataset::new(frames, manifest.frames.iter().map(|e| e.time).collect())
}
