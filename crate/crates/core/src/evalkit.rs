//! Student-versus-teacher gait comparison: per-channel MSE, percentage
//! reductions against a baseline, and CSV/JSON exports for plotting.
//!
//! Channel names follow the humanoid convention (vertical axis `z` for the
//! feet, `y` for the pelvis); in the planar mechanisms `pelvis_y` is the
//! normalised body height and `*_z` the normalised foot height.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment};
use crate::gaitdata::{GaitFeature, FEATURE_DIM};

pub const CHANNELS: [&str; FEATURE_DIM] = ["pelvis_y", "lfoot_x", "lfoot_z", "rfoot_x", "rfoot_z"];
pub const CHANNEL_MAPPING: &str =
    "pelvis_y=y_com, lfoot_x=x_l, lfoot_z=y_l, rfoot_x=x_r, rfoot_z=y_r (planar: z is the vertical foot coordinate)";
pub const DEFAULT_EVAL_EPISODES: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty trajectory ({0})")]
    EmptyDataset(&'static str),
    #[error("baseline MSE is zero on channel {0}; reduction undefined")]
    ZeroBaselineMse(&'static str),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    #[default]
    None,
    /// Shift the rollout by the lag that maximises the cross-correlation of `x_L`.
    Phase,
}

/// Lag `ℓ` (rollout index minus reference index) maximising the biased
/// cross-correlation of the left-foot x channel, searched over `|ℓ| ≤ n/2`.
/// The biased estimator favours the smallest shift among periodic repeats.
pub fn best_lag(reference: &[GaitFeature], rollout: &[GaitFeature]) -> isize {
    let a: Vec<f64> = reference.iter().map(|f| f.0[1]).collect();
    let b: Vec<f64> = rollout.iter().map(|f| f.0[1]).collect();
    let n = a.len().min(b.len());
    if n < 2 {
        return 0;
    }
    let centre = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| x - m).collect::<Vec<_>>()
    };
    let (a, b) = (centre(&a), centre(&b));
    let max_lag = (n / 2) as isize;
    let mut best = (0isize, f64::NEG_INFINITY);
    for lag in -max_lag..=max_lag {
        let mut sum = 0.0;
        for t in 0..a.len() {
            let u = t as isize + lag;
            if u < 0 || u as usize >= b.len() {
                continue;
            }
            sum += a[t] * b[u as usize];
        }
        if sum > best.1 + 1e-12 {
            best = (lag, sum);
        }
    }
    best.0
}

/// Per-channel mean squared difference over the shared window.
pub fn aligned_mse(reference: &[GaitFeature], rollout: &[GaitFeature], alignment: Alignment) -> Result<[f64; FEATURE_DIM], EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyDataset("reference"));
    }
    if rollout.is_empty() {
        return Err(EvalError::EmptyDataset("rollout"));
    }
    let lag = match alignment {
        Alignment::None => 0,
        Alignment::Phase => best_lag(reference, rollout),
    };
    let (r0, s0) = if lag >= 0 { (0, lag as usize) } else { ((-lag) as usize, 0) };
    let n = (reference.len() - r0).min(rollout.len() - s0);
    let mut out = [0.0; FEATURE_DIM];
    for t in 0..n {
        for (c, o) in out.iter_mut().enumerate() {
            let d = reference[r0 + t].0[c] - rollout[s0 + t].0[c];
            *o += d * d;
        }
    }
    Ok(out.map(|v| v / n as f64))
}

/// `100·(base − ours)/base`; `None` when the baseline MSE is zero.
pub fn reduction_percent(baseline: f64, ours: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (baseline - ours) / baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub channels: [String; FEATURE_DIM],
    pub channel_mapping: String,
    pub baseline_mse: [f64; FEATURE_DIM],
    pub ours_mse: [f64; FEATURE_DIM],
    /// Percent; `null` where the baseline MSE is zero.
    pub reduction: [Option<f64>; FEATURE_DIM],
    /// Mean of the five reductions; `null` if any is undefined.
    pub average_reduction: Option<f64>,
    pub baseline_std: Option<[f64; FEATURE_DIM]>,
    pub ours_std: Option<[f64; FEATURE_DIM]>,
    pub episodes: usize,
}

impl MseReport {
    pub fn from_mse(baseline: [f64; FEATURE_DIM], ours: [f64; FEATURE_DIM]) -> Self {
        let reduction: [Option<f64>; FEATURE_DIM] = std::array::from_fn(|c| reduction_percent(baseline[c], ours[c]));
        let average_reduction = reduction
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|r| r.iter().sum::<f64>() / FEATURE_DIM as f64);
        Self {
            channels: CHANNELS.map(String::from),
            channel_mapping: CHANNEL_MAPPING.into(),
            baseline_mse: baseline,
            ours_mse: ours,
            reduction,
            average_reduction,
            baseline_std: None,
            ours_std: None,
            episodes: 1,
        }
    }

    /// Channels on which the student's MSE is strictly lower than the baseline's.
    pub fn channels_improved(&self) -> usize {
        (0..FEATURE_DIM).filter(|&c| self.ours_mse[c] < self.baseline_mse[c]).count()
    }

    /// First channel whose reduction is undefined, as an error.
    pub fn require_defined(&self) -> Result<(), EvalError> {
        match self.reduction.iter().position(Option::is_none) {
            Some(c) => Err(EvalError::ZeroBaselineMse(CHANNELS[c])),
            None => Ok(()),
        }
    }
}

/// Per-channel mean and population standard deviation over episodes.
pub fn mean_std(per_episode: &[[f64; FEATURE_DIM]]) -> ([f64; FEATURE_DIM], [f64; FEATURE_DIM]) {
    let n = per_episode.len().max(1) as f64;
    let mean: [f64; FEATURE_DIM] = std::array::from_fn(|c| per_episode.iter().map(|m| m[c]).sum::<f64>() / n);
    let std = std::array::from_fn(|c| (per_episode.iter().map(|m| (m[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt());
    (mean, std)
}

/// Report from several student and baseline rollouts against one reference.
pub fn mse_report(
    reference: &[GaitFeature],
    student: &[Vec<GaitFeature>],
    baseline: &[Vec<GaitFeature>],
    alignment: Alignment,
) -> Result<MseReport, EvalError> {
    let per = |rollouts: &[Vec<GaitFeature>]| -> Result<Vec<[f64; FEATURE_DIM]>, EvalError> {
        if rollouts.is_empty() {
            return Err(EvalError::EmptyDataset("no rollouts"));
        }
        rollouts.iter().map(|r| aligned_mse(reference, r, alignment)).collect()
    };
    let (ours, ours_std) = mean_std(&per(student)?);
    let (base, base_std) = mean_std(&per(baseline)?);
    let mut report = MseReport::from_mse(base, ours);
    report.ours_std = Some(ours_std);
    report.baseline_std = Some(base_std);
    report.episodes = student.len();
    Ok(report)
}

/// Run one episode (at most `max_steps`) and collect the gait feature after
/// every step; the trajectory simply ends if the mechanism falls.
pub fn rollout_features<E: Environment + ?Sized>(
    env: &mut E,
    controller: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    max_steps: usize,
    seed: u64,
) -> Result<Vec<GaitFeature>, EvalError> {
    let mut obs = env.reset(seed);
    let mut frames = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        let step = env.step(&controller(&obs))?;
        frames.push(env.gait_feature());
        if step.done {
            break;
        }
        obs = step.observation;
    }
    Ok(frames)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

/// Write one CSV per channel (`t, teacher, <rollout names>`), a long-format
/// `overlay.csv` and, if given, `report.json`. Rows cover the shared window.
pub fn export_comparison(
    reference: &[GaitFeature],
    rollouts: &[(String, Vec<GaitFeature>)],
    report: Option<&MseReport>,
    dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let n = rollouts.iter().map(|(_, r)| r.len()).chain([reference.len()]).min().unwrap_or(0);
    let mut written = Vec::new();
    let open = |path: &Path| -> Result<csv::Writer<fs::File>, EvalError> {
        Ok(csv::Writer::from_writer(fs::File::create(path).map_err(io_err(path))?))
    };
    for (c, name) in CHANNELS.iter().enumerate() {
        let path = dir.join(format!("{name}.csv"));
        let mut w = open(&path)?;
        let mut header = vec!["t".to_string(), "teacher".to_string()];
        header.extend(rollouts.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for t in 0..n {
            let mut row = vec![t.to_string(), reference[t].0[c].to_string()];
            row.extend(rollouts.iter().map(|(_, r)| r[t].0[c].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }
    let path = dir.join("overlay.csv");
    let mut w = open(&path)?;
    let mut header = vec!["t", "source"];
    header.extend(CHANNELS);
    w.write_record(&header)?;
    let sources = std::iter::once(("teacher", reference)).chain(rollouts.iter().map(|(n, r)| (n.as_str(), r.as_slice())));
    for (name, frames) in sources {
        for (t, f) in frames.iter().take(n).enumerate() {
            let mut row = vec![t.to_string(), name.to_string()];
            row.extend(f.0.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    written.push(path);
    if let Some(report) = report {
        let path = dir.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(report)?).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
