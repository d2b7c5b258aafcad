//! Gait features, reference datasets and their binary file format.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! magic "RGDS" | version u32 | T u64 | dt f64 | metadata_len u32 | metadata JSON
//! | T × 5 f64 frames | CRC32 of everything before it (u32)
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment};

pub const FEATURE_DIM: usize = 5;
pub const CHANNEL_NAMES: [&str; FEATURE_DIM] = ["y_com", "x_l", "y_l", "x_r", "y_r"];
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_RECORD_STEPS: usize = 2000;

const MAGIC: &[u8; 4] = b"RGDS";
/// Sanity bound on every normalised component.
pub const FEATURE_BOUND: f64 = 10.0;

#[derive(Debug, Error)]
pub enum GaitDataError {
    #[error("not a reference dataset (bad magic bytes)")]
    BadMagic,
    #[error("unknown dataset format version {0}")]
    FormatVersionUnknown(u32),
    #[error("dataset file is truncated")]
    TruncatedFile,
    #[error("dataset checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("dataset has no frames")]
    Empty,
    #[error("frame {index} violates the gait feature invariants: {values:?}")]
    InvalidFeature { index: usize, values: [f64; FEATURE_DIM] },
    #[error("metadata inconsistent with frames: {0}")]
    InconsistentMetadata(String),
    #[error("teacher fell after {step} of {requested} steps")]
    TeacherFellEarly { step: usize, requested: usize },
    #[error("episode budget ended after {step} of {requested} steps; raise max_steps")]
    EpisodeTooShort { step: usize, requested: usize },
    #[error("controller returned {got} actions, expected {expected}")]
    ControllerOutput { expected: usize, got: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `[y_COM, x_L, y_L, x_R, y_R]` divided by the mechanism's standing height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitFeature(pub [f64; FEATURE_DIM]);

impl GaitFeature {
    pub fn new(values: [f64; FEATURE_DIM]) -> Option<Self> {
        let f = Self(values);
        f.is_valid().then_some(f)
    }

    pub fn from_physical(raw: [f64; FEATURE_DIM], standing_height: f64) -> Self {
        Self(raw.map(|v| v / standing_height))
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite() && v.abs() < FEATURE_BOUND)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    /// Content hash (or other identifier) of the policy that produced the frames.
    pub teacher_checkpoint: String,
    pub target_speed: f64,
    pub frames: u64,
    pub dt: f64,
    pub normalization_height: f64,
    pub seed: u64,
    pub format_version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceDataset {
    frames: Vec<GaitFeature>,
    metadata: DatasetMetadata,
}

impl ReferenceDataset {
    pub fn new(frames: Vec<GaitFeature>, metadata: DatasetMetadata) -> Result<Self, GaitDataError> {
        if frames.is_empty() {
            return Err(GaitDataError::Empty);
        }
        if metadata.frames != frames.len() as u64 {
            return Err(GaitDataError::InconsistentMetadata(format!(
                "metadata says {} frames, found {}",
                metadata.frames,
                frames.len()
            )));
        }
        if metadata.format_version != FORMAT_VERSION {
            return Err(GaitDataError::FormatVersionUnknown(metadata.format_version));
        }
        if let Some((index, f)) = frames.iter().enumerate().find(|(_, f)| !f.is_valid()) {
            return Err(GaitDataError::InvalidFeature { index, values: f.0 });
        }
        Ok(Self { frames, metadata })
    }

    pub fn frames(&self) -> &[GaitFeature] {
        &self.frames
    }

    pub fn metadata(&self) -> &DatasetMetadata {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f.0[c]).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, GaitDataError> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::with_capacity(32 + meta.len() + self.frames.len() * FEATURE_DIM * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.metadata.dt.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for f in &self.frames {
            for v in f.0 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GaitDataError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(GaitDataError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(GaitDataError::FormatVersionUnknown(version));
        }
        let t = r.u64()?;
        let dt = r.f64()?;
        let meta_len = r.u32()? as usize;
        let meta = r.take(meta_len)?;
        let frame_bytes = usize::try_from(t)
            .ok()
            .and_then(|t| t.checked_mul(FEATURE_DIM * 8))
            .ok_or(GaitDataError::TruncatedFile)?;
        let frame_section = r.take(frame_bytes)?;
        let body_len = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(GaitDataError::InconsistentMetadata("trailing bytes after checksum".into()));
        }
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(GaitDataError::ChecksumMismatch { stored, computed });
        }
        if t == 0 {
            return Err(GaitDataError::Empty);
        }
        let metadata: DatasetMetadata = serde_json::from_slice(meta)?;
        if metadata.dt.to_bits() != dt.to_bits() {
            return Err(GaitDataError::InconsistentMetadata("header dt differs from metadata dt".into()));
        }
        let frames = frame_section
            .chunks_exact(FEATURE_DIM * 8)
            .map(|chunk| {
                let mut v = [0.0; FEATURE_DIM];
                for (c, b) in v.iter_mut().zip(chunk.chunks_exact(8)) {
                    *c = f64::from_le_bytes(b.try_into().unwrap());
                }
                GaitFeature(v)
            })
            .collect();
        Self::new(frames, metadata)
    }

    pub fn save(&self, path: &Path) -> Result<(), GaitDataError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GaitDataError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Plain-text export for plotting; `t` is the frame index.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), GaitDataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "y_com", "x_l", "y_l", "x_r", "y_r"])?;
        for (i, f) in self.frames.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(f.0.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn export_csv(&self, path: &Path) -> Result<(), GaitDataError> {
        self.write_csv(fs::File::create(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GaitDataError> {
        let end = self.pos.checked_add(n).ok_or(GaitDataError::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(GaitDataError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GaitDataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, GaitDataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, GaitDataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Everything about a recording except the frames themselves.
#[derive(Clone, Debug)]
pub struct RecordingInfo {
    pub teacher_checkpoint: String,
    pub dt: f64,
    pub normalization_height: f64,
}

/// Roll `env` out for `steps` control steps under `controller`, one feature per step.
///
/// The episode budget of `env` must be at least `steps`.
pub fn record_reference<E, C>(
    env: &mut E,
    mut controller: C,
    steps: usize,
    seed: u64,
    info: RecordingInfo,
) -> Result<ReferenceDataset, GaitDataError>
where
    E: Environment + ?Sized,
    C: FnMut(&[f64]) -> Vec<f64>,
{
    let mut obs = env.reset(seed);
    let mut frames = Vec::with_capacity(steps);
    for step in 1..=steps {
        let action = controller(&obs);
        if action.len() != env.action_dim() {
            return Err(GaitDataError::ControllerOutput { expected: env.action_dim(), got: action.len() });
        }
        let s = env.step(&action)?;
        frames.push(env.gait_feature());
        if s.terminal {
            return Err(GaitDataError::TeacherFellEarly { step, requested: steps });
        }
        if s.done && step < steps {
            return Err(GaitDataError::EpisodeTooShort { step, requested: steps });
        }
        obs = s.observation;
    }
    let metadata = DatasetMetadata {
        teacher_checkpoint: info.teacher_checkpoint,
        target_speed: env.episode_config().target_speed,
        frames: frames.len() as u64,
        dt: info.dt,
        normalization_height: info.normalization_height,
        seed,
        format_version: FORMAT_VERSION,
    };
    ReferenceDataset::new(frames, metadata)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStatistics {
    pub channels: [ChannelStats; FEATURE_DIM],
    /// Stride period of `x_L` in frames, if the signal is periodic.
    pub period: Option<usize>,
}

pub fn channel_stats(values: &[f64]) -> ChannelStats {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        // exact for constant channels, where the summed mean may round
        return ChannelStats { mean: min, std: 0.0, min, max };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ChannelStats {
        mean,
        std: var.sqrt(),
        min,
        max,
    }
}

/// Lag of the first autocorrelation peak after the first zero crossing.
///
/// Lags are searched up to half the signal length; peaks weaker than 0.3 of
/// the zero-lag value are not treated as periodicity.
pub fn estimate_period(signal: &[f64]) -> Option<usize> {
    let n = signal.len();
    if n < 4 {
        return None;
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = signal.iter().map(|v| v - mean).collect();
    let var = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var <= 1e-12 * (1.0 + mean * mean) {
        return None;
    }
    let max_lag = n / 2;
    let acf: Vec<f64> = (0..=max_lag)
        .map(|k| {
            let s: f64 = centered[..n - k].iter().zip(&centered[k..]).map(|(a, b)| a * b).sum();
            s / (n - k) as f64 / var
        })
        .collect();
    let first_negative = acf.iter().position(|&r| r < 0.0)?;
    let mut best: Option<(usize, f64)> = None;
    for k in first_negative.max(1)..max_lag {
        if acf[k] >= acf[k - 1] && acf[k] >= acf[k + 1] && acf[k] > 0.3 {
            best = Some((k, acf[k]));
            break;
        }
    }
    best.map(|(k, _)| k)
}

pub fn dataset_statistics(dataset: &ReferenceDataset) -> DatasetStatistics {
    let channels = std::array::from_fn(|c| channel_stats(&dataset.channel(c)));
    let period = estimate_period(&dataset.channel(1));
    DatasetStatistics { channels, period }
}
