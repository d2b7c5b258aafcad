//! Stage-2 training loop: SAC on the biped with a gait discriminator
//! supplying the imitation bonus, blended with the environment reward.

use std::collections::VecDeque;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biped_env::{BipedConfig, BipedEnv};
use crate::env::{EnvError, Environment, EpisodeConfig};
use crate::gail::{blend_reward, BlendConfig, Discriminator, DiscriminatorConfig, DiscriminatorUpdate, GailError};
use crate::gaitdata::{ReferenceDataset, FEATURE_DIM};
use crate::neural::{Checkpoint, NeuralError};
use crate::ppo::episode_seed;
use crate::sac::{ActionMode, ReplayBuffer, SacAgent, SacConfig, SacError, SacMetrics, Transition};

pub const STUDENT_KIND: &str = "sac_student";
pub const METRICS_HEADER: &str =
    "step,episodes,episode_reward,episode_len,r_env_mean,r_im_mean,blended_mean,q1_loss,q2_loss,actor_loss,alpha,entropy,disc_updates,disc_frozen";
pub const DISCRIMINATOR_HEADER: &str = "global_step,learner_updates,disc_update,train_loss,holdout_loss,penalty,gradient_gap,frozen";

#[derive(Debug, Error)]
pub enum StudentError {
    #[error("invalid student configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Gail(#[from] GailError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub seed: u64,
    pub total_steps: usize,
    /// Environment steps between metrics rows.
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    pub sac: SacConfig,
    pub discriminator: DiscriminatorConfig,
    pub blend: BlendConfig,
    pub biped: BipedConfig,
    pub episode: EpisodeConfig,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 300_000,
            log_interval: 5_000,
            checkpoint_interval: 100_000,
            sac: SacConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            blend: BlendConfig::default(),
            biped: BipedConfig::default(),
            episode: EpisodeConfig::biped(),
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<(), StudentError> {
        if self.total_steps == 0 || self.log_interval == 0 || self.checkpoint_interval == 0 {
            return Err(StudentError::InvalidConfig("total_steps, log_interval and checkpoint_interval must be >= 1".into()));
        }
        self.sac.validate()?;
        self.discriminator.validate()?;
        self.blend.validate()?;
        self.biped.validate()?;
        self.episode.validate()?;
        Ok(())
    }

    /// Seed of the reference train/holdout split.
    pub fn split_seed(&self) -> u64 {
        episode_seed(self.seed, u64::MAX)
    }
}

/// One discriminator gradient step, as seen by the training loop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscriminatorEvent {
    pub global_step: usize,
    pub learner_updates: usize,
    /// Index of this update (1-based).
    pub disc_update: usize,
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub penalty: f64,
    pub gradient_gap: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StudentMetricsRow {
    pub step: usize,
    pub episodes: usize,
    /// Mean undiscounted environment return of episodes finished in the interval.
    pub episode_reward: f64,
    pub episode_len: f64,
    pub r_env_mean: f64,
    pub r_im_mean: f64,
    pub blended_mean: f64,
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub disc_updates: usize,
    pub disc_frozen: bool,
}

pub struct StudentOutcome {
    pub agent: SacAgent,
    /// `None` in pure-reward mode (η = 1).
    pub discriminator: Option<Discriminator>,
    pub metrics: Vec<StudentMetricsRow>,
    pub disc_events: Vec<DiscriminatorEvent>,
    /// Calls made to the discriminator scheduler.
    pub schedule_calls: usize,
    pub steps: usize,
}

/// Rewards for a replay batch: `η·r_env + (1−η)·r_im` with the bonus
/// computed now from the stored features. Returns (blended, r_im).
pub fn batch_rewards(
    r_env: &[f64],
    features: ArrayView2<f64>,
    disc: Option<&Discriminator>,
    blend: &BlendConfig,
) -> Result<(Vec<f64>, Vec<f64>), NeuralError> {
    match disc {
        Some(d) if blend.uses_imitation() => {
            let r_im = d.bonus(features)?;
            let blended = r_env.iter().zip(&r_im).map(|(&e, &i)| blend_reward(e, i, blend.eta)).collect();
            Ok((blended, r_im))
        }
        _ => Ok((r_env.to_vec(), vec![0.0; r_env.len()])),
    }
}

/// Rolling window of the most recent gait frames of the current episode,
/// padded with the first frame after a reset.
struct FrameWindow {
    frames: VecDeque<[f64; FEATURE_DIM]>,
    window: usize,
}

impl FrameWindow {
    fn new(window: usize, first: [f64; FEATURE_DIM]) -> Self {
        Self { frames: std::iter::repeat_n(first, window).collect(), window }
    }

    fn push(&mut self, frame: [f64; FEATURE_DIM]) {
        self.frames.pop_front();
        self.frames.push_back(frame);
        debug_assert_eq!(self.frames.len(), self.window);
    }

    fn flat(&self) -> Vec<f64> {
        self.frames.iter().flatten().copied().collect()
    }
}

#[derive(Default)]
struct Interval {
    returns: Vec<f64>,
    lengths: Vec<usize>,
    r_env: f64,
    r_im: f64,
    blended: f64,
    sac: SacMetrics,
    updates: usize,
}

impl Interval {
    fn add_update(&mut self, m: &SacMetrics, r_env: &[f64], r_im: &[f64]) {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.r_env += mean(r_env);
        self.r_im += mean(r_im);
        self.blended += m.reward_mean;
        self.sac.q1_loss += m.q1_loss;
        self.sac.q2_loss += m.q2_loss;
        self.sac.actor_loss += m.actor_loss;
        self.sac.entropy += m.entropy;
        self.sac.alpha = m.alpha;
        self.updates += 1;
    }

    fn row(&self, step: usize, agent: &SacAgent, disc: Option<&Discriminator>) -> StudentMetricsRow {
        let n = self.updates as f64;
        let per = |v: f64| if self.updates > 0 { v / n } else { f64::NAN };
        let episodes = self.returns.len();
        let avg = |s: f64| if episodes > 0 { s / episodes as f64 } else { f64::NAN };
        StudentMetricsRow {
            step,
            episodes,
            episode_reward: avg(self.returns.iter().sum()),
            episode_len: avg(self.lengths.iter().sum::<usize>() as f64),
            r_env_mean: per(self.r_env),
            r_im_mean: per(self.r_im),
            blended_mean: per(self.blended),
            q1_loss: per(self.sac.q1_loss),
            q2_loss: per(self.sac.q2_loss),
            actor_loss: per(self.sac.actor_loss),
            alpha: agent.alpha(),
            entropy: per(self.sac.entropy),
            disc_updates: disc.map_or(0, |d| d.updates),
            disc_frozen: disc.is_some_and(|d| d.frozen),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StudentError + '_ {
    move |source| StudentError::Io { path: path.to_path_buf(), source }
}

fn csv_appender(path: &Path, header: &str) -> Result<csv::Writer<fs::File>, StudentError> {
    let fresh = !path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    if fresh {
        writeln!(file, "{header}").map_err(io_err(path))?;
    }
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

/// Build the student checkpoint: SAC networks plus, when present, the
/// discriminator under the `disc_` prefix.
pub fn student_checkpoint(agent: &SacAgent, disc: Option<&Discriminator>, config: &StudentConfig, step: usize) -> Checkpoint {
    let mut ck = Checkpoint::new(STUDENT_KIND);
    ck.metadata = serde_json::json!({ "step": step, "config": config });
    agent.write_checkpoint(&mut ck);
    if let Some(d) = disc {
        d.write_checkpoint(&mut ck, "disc_");
    }
    ck
}

/// Train a student for `config.total_steps` environment steps.
///
/// With `out_dir`, writes `metrics.csv`, `discriminator.csv` (when
/// imitation is on), `student.ckpt` at the end and `student_step_<n>.ckpt`
/// every `checkpoint_interval` steps.
pub fn train_student(config: &StudentConfig, reference: &ReferenceDataset, out_dir: Option<&Path>) -> Result<StudentOutcome, StudentError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut env = BipedEnv::new(config.biped.clone(), config.episode.clone())?;
    let (obs_dim, act_dim) = (env.observation_dim(), env.action_dim());
    let mut agent = SacAgent::new(config.sac.clone(), obs_dim, act_dim, &mut rng)?;
    let window = config.discriminator.window;
    let mut disc = if config.blend.uses_imitation() {
        Some(Discriminator::from_dataset(config.discriminator.clone(), reference, config.split_seed(), &mut rng)?)
    } else {
        None
    };
    let mut replay = ReplayBuffer::new(config.sac.replay_capacity, obs_dim, act_dim, FEATURE_DIM * window);

    let mut writers = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let metrics = csv_appender(&dir.join("metrics.csv"), METRICS_HEADER)?;
            let events = if disc.is_some() { Some(csv_appender(&dir.join("discriminator.csv"), DISCRIMINATOR_HEADER)?) } else { None };
            Some((metrics, events))
        }
        None => None,
    };

    let mut metrics = Vec::new();
    let mut disc_events = Vec::new();
    let mut interval = Interval::default();
    let mut episodes = 0u64;
    let mut obs = env.reset(episode_seed(config.seed, episodes));
    let mut frames = FrameWindow::new(window, env.gait_feature().0);
    let (mut ep_return, mut ep_len) = (0.0, 0usize);
    let mut update_budget = 0.0;
    let batch_size = config.sac.batch_size;

    for step in 1..=config.total_steps {
        let action = if step <= config.sac.warmup_steps {
            (0..act_dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
        } else {
            let view = ArrayView2::from_shape((1, obs_dim), &obs).expect("observation width");
            agent.actor.sample(view, ActionMode::Stochastic, &mut rng)?.actions.row(0).to_vec()
        };
        let s = env.step(&action)?;
        frames.push(env.gait_feature().0);
        replay.push(&Transition {
            obs: obs.clone(),
            action,
            r_env: s.reward,
            feature: frames.flat(),
            next_obs: s.observation.clone(),
            terminal: s.terminal,
        });
        ep_return += s.reward;
        ep_len += 1;
        if s.done {
            interval.returns.push(ep_return);
            interval.lengths.push(ep_len);
            episodes += 1;
            obs = env.reset(episode_seed(config.seed, episodes));
            frames = FrameWindow::new(window, env.gait_feature().0);
            (ep_return, ep_len) = (0.0, 0);
        } else {
            obs = s.observation;
        }

        if step >= config.sac.warmup_steps && replay.len() >= batch_size {
            update_budget += config.sac.updates_per_env_step;
            while update_budget >= 1.0 {
                update_budget -= 1.0;
                let batch = replay.sample(batch_size, &mut rng);
                let (rewards, r_im) = batch_rewards(&batch.r_env, batch.features.view(), disc.as_ref(), &config.blend)?;
                match agent.update(&batch, &rewards, &mut rng) {
                    Ok(m) => interval.add_update(&m, &batch.r_env, &r_im),
                    Err(SacError::NonFiniteLoss) => continue,
                    Err(e) => return Err(e.into()),
                }
                if let Some(d) = disc.as_mut() {
                    let replay_ref = &replay;
                    let fake = |n: usize, r: &mut ChaCha8Rng| replay_ref.features_at(&replay_ref.sample_indices(n, r));
                    if let Some(u) = d.scheduled_update(step, agent.updates, fake, &mut rng)? {
                        let event = event_from(step, agent.updates, d.updates, &u);
                        if let Some((_, Some(w))) = writers.as_mut() {
                            w.serialize(&event)?;
                        }
                        disc_events.push(event);
                    }
                }
            }
        }

        if step % config.log_interval == 0 || step == config.total_steps {
            let row = interval.row(step, &agent, disc.as_ref());
            log::info!(
                "step {step}: episodes {} return {:.3} len {:.1} r_env {:.4} r_im {:.4} alpha {:.4}",
                row.episodes,
                row.episode_reward,
                row.episode_len,
                row.r_env_mean,
                row.r_im_mean,
                row.alpha
            );
            if let Some((w, events)) = writers.as_mut() {
                w.serialize(&row)?;
                w.flush().map_err(|e| StudentError::Io { path: PathBuf::from("metrics.csv"), source: e })?;
                if let Some(ev) = events {
                    ev.flush().map_err(|e| StudentError::Io { path: PathBuf::from("discriminator.csv"), source: e })?;
                }
            }
            metrics.push(row);
            interval = Interval::default();
        }
        if let Some(dir) = out_dir {
            if step % config.checkpoint_interval == 0 && step != config.total_steps {
                let path = dir.join(format!("student_step_{step}.ckpt"));
                student_checkpoint(&agent, disc.as_ref(), config, step).save(&path)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        student_checkpoint(&agent, disc.as_ref(), config, config.total_steps).save(&dir.join("student.ckpt"))?;
    }
    let schedule_calls = disc.as_ref().map_or(0, |d| d.schedule_calls);
    Ok(StudentOutcome { agent, discriminator: disc, metrics, disc_events, schedule_calls, steps: config.total_steps })
}

fn event_from(global_step: usize, learner_updates: usize, disc_update: usize, u: &DiscriminatorUpdate) -> DiscriminatorEvent {
    DiscriminatorEvent {
        global_step,
        learner_updates,
        disc_update,
        train_loss: u.train_loss,
        holdout_loss: u.holdout_loss,
        penalty: u.penalty,
        gradient_gap: u.gradient_gap,
        frozen: u.frozen,
    }
}

/// Deterministic student controller restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct StudentPolicy {
    pub actor: crate::sac::SquashedGaussianActor,
    pub config: StudentConfig,
}

impl StudentPolicy {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, StudentError> {
        if ck.kind != STUDENT_KIND {
            return Err(StudentError::InvalidConfig(format!("checkpoint holds a {:?}, not a student", ck.kind)));
        }
        let config: StudentConfig = serde_json::from_value(ck.metadata["config"].clone())
            .map_err(|e| StudentError::InvalidConfig(format!("checkpoint config: {e}")))?;
        Ok(Self { actor: crate::sac::SquashedGaussianActor::from_net(ck.network("actor")?.clone()), config })
    }

    pub fn act(&self, obs: &[f64]) -> Vec<f64> {
        self.actor.act(obs).expect("observation width fixed by the checkpoint")
    }

    pub fn environment(&self) -> Result<BipedEnv, StudentError> {
        Ok(BipedEnv::new(self.config.biped.clone(), self.config.episode.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaitdata::{DatasetMetadata, GaitFeature, FORMAT_VERSION};

    fn reference(frames: usize) -> ReferenceDataset {
        let w = 2.0 * std::f64::consts::PI / 40.0;
        let rows = (0..frames)
            .map(|t| {
                let p = w * t as f64;
                GaitFeature([1.0 + 0.05 * p.sin(), 0.3 * p.cos(), -0.95, -0.3 * p.cos(), -0.95 + 0.05 * p.sin().max(0.0)])
            })
            .collect();
        let metadata = DatasetMetadata {
            teacher_checkpoint: "synthetic".into(),
            target_speed: 1.0,
            frames: frames as u64,
            dt: 1.0 / 60.0,
            normalization_height: 1.0,
            seed: 0,
            format_version: FORMAT_VERSION,
        };
        ReferenceDataset::new(rows, metadata).unwrap()
    }

    fn tiny(eta: f64, steps: usize) -> StudentConfig {
        let mut c = StudentConfig { seed: 3, total_steps: steps, log_interval: 200, ..Default::default() };
        c.sac.hidden_sizes = vec![16, 16];
        c.sac.batch_size = 32;
        c.sac.warmup_steps = 100;
        c.sac.replay_capacity = 10_000;
        c.discriminator.start_step = 300;
        c.discriminator.batch_size = 32;
        c.blend.eta = eta;
        c
    }

    #[test]
    fn blended_rewards_use_the_bonus() {
        let data = reference(50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::from_dataset(DiscriminatorConfig::default(), &data, 1, &mut rng).unwrap();
        let feats = ndarray::Array2::from_shape_fn((3, 5), |(i, j)| 0.1 * (i + j) as f64);
        let r_env = [1.0, 0.0, -1.0];
        let (blended, r_im) = batch_rewards(&r_env, feats.view(), Some(&d), &BlendConfig { eta: 0.5 }).unwrap();
        let bonus = d.bonus(feats.view()).unwrap();
        for i in 0..3 {
            assert_eq!(r_im[i], bonus[i]);
            assert!((blended[i] - (0.5 * r_env[i] + 0.5 * bonus[i])).abs() < 1e-15);
        }
        let (plain, zeros) = batch_rewards(&r_env, feats.view(), Some(&d), &BlendConfig { eta: 1.0 }).unwrap();
        assert_eq!(plain, r_env);
        assert_eq!(zeros, vec![0.0; 3]);
    }

    #[test]
    fn frame_window_pads_then_slides() {
        let mut w = FrameWindow::new(3, [1.0; 5]);
        assert_eq!(w.flat(), vec![1.0; 15]);
        w.push([2.0; 5]);
        let flat = w.flat();
        assert_eq!(&flat[..10], &[1.0; 10]);
        assert_eq!(&flat[10..], &[2.0; 5]);
    }

    #[test]
    fn discriminator_follows_the_schedule() {
        let out = train_student(&tiny(0.5, 900), &reference(200), None).unwrap();
        let d = out.discriminator.as_ref().unwrap();
        assert!(!out.disc_events.is_empty());
        for e in &out.disc_events {
            assert!(e.global_step >= 300);
            assert_eq!(e.learner_updates % 5, 0);
        }
        for pair in out.disc_events.windows(2) {
            assert_eq!(pair[1].learner_updates - pair[0].learner_updates, 5);
            assert!(!pair[0].frozen);
        }
        assert_eq!(d.updates, out.disc_events.len());
        assert_eq!(d.schedule_calls, out.agent.updates);
    }

    #[test]
    fn pure_reward_mode_skips_the_discriminator() {
        let dir = tempfile::tempdir().unwrap();
        let out = train_student(&tiny(1.0, 400), &reference(200), Some(dir.path())).unwrap();
        assert!(out.discriminator.is_none());
        assert!(out.disc_events.is_empty());
        assert!(out.metrics.iter().filter(|m| m.r_im_mean.is_finite()).all(|m| m.r_im_mean == 0.0));
        assert!(!dir.path().join("discriminator.csv").exists());
        assert!(dir.path().join("student.ckpt").exists());
    }

    #[test]
    fn training_is_reproducible_and_checkpoint_loads() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = tiny(0.5, 600);
        train_student(&cfg, &reference(200), Some(a.path())).unwrap();
        train_student(&cfg, &reference(200), Some(b.path())).unwrap();
        for f in ["metrics.csv", "discriminator.csv", "student.ckpt"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let header = fs::read_to_string(a.path().join("metrics.csv")).unwrap();
        assert_eq!(header.lines().next().unwrap(), METRICS_HEADER);
        let policy = StudentPolicy::from_checkpoint(&Checkpoint::load(&a.path().join("student.ckpt")).unwrap()).unwrap();
        assert_eq!(policy.config, cfg);
        let mut env = policy.environment().unwrap();
        let obs = env.reset(0);
        let act = policy.act(&obs);
        assert_eq!(act.len(), 6);
        assert!(act.iter().all(|a| a.abs() <= 1.0));
    }
}
