use std::fs::OpenOptions;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    compute_gae, normalize_advantages, ppo_update, GaussianPolicy, PpoConfig, PpoError, PpoOptimizers,
    RunningNormalizer, TrainingBatch, UpdateMetrics,
};
use crate::env::{EpisodeConfig, Environment, RewardMode};
use crate::neural::{Activation, Checkpoint, Init, Mlp, MlpSpec, NeuralError};
use crate::rom_env::{RomConfig, RomEnv};

pub const METRICS_HEADER: [&str; 4] = ["step", "mean_reward", "mean_speed_error", "episode_len"];
pub const TEACHER_KIND: &str = "ppo_teacher";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub seed: u64,
    pub ppo: PpoConfig,
    pub rom: RomConfig,
    pub episode: EpisodeConfig,
    /// Environment steps between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ppo: PpoConfig::default(),
            rom: RomConfig::default(),
            episode: EpisodeConfig::rom(),
            checkpoint_interval: 100_000,
        }
    }
}

/// Seed of the `index`-th episode of a run.
pub fn episode_seed(run_seed: u64, index: u64) -> u64 {
    let mut z = run_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Transitions of `num_actors` segments, stored actor-major (`actor·T + t`).
#[derive(Clone, Debug)]
pub struct Rollout {
    pub num_actors: usize,
    pub length: usize,
    /// Normalised observations the policy acted on.
    pub obs: Array2<f64>,
    pub pre_tanh: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// Environment reward, plus `γ·V(s_T)` on time-limit truncations.
    pub rewards: Vec<f64>,
    pub env_rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub terminals: Vec<bool>,
    pub speed_errors: Vec<f64>,
    pub last_values: Vec<f64>,
    pub finished_lengths: Vec<usize>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.num_actors * self.length
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Advantages (normalised) and returns for the whole batch.
    pub fn training_batch(&self, gamma: f64, lambda: f64) -> Result<TrainingBatch, PpoError> {
        let mut advantages = Vec::with_capacity(self.len());
        let mut returns = Vec::with_capacity(self.len());
        for a in 0..self.num_actors {
            let r = a * self.length..(a + 1) * self.length;
            let (adv, ret) = compute_gae(
                &self.rewards[r.clone()],
                &self.values[r.clone()],
                &self.dones[r],
                self.last_values[a],
                gamma,
                lambda,
            )?;
            advantages.extend(adv);
            returns.extend(ret);
        }
        normalize_advantages(&mut advantages);
        Ok(TrainingBatch {
            obs: self.obs.clone(),
            pre_tanh: self.pre_tanh.clone(),
            old_log_probs: self.log_probs.clone(),
            advantages,
            returns,
        })
    }
}

/// Per-actor bookkeeping that persists across rollouts.
#[derive(Clone, Debug)]
pub struct ActorSlot<E> {
    pub env: E,
    pub obs: Vec<f64>,
    pub episode_len: usize,
}

fn value_of(value: &Mlp, obs: ArrayView2<f64>) -> Result<Vec<f64>, NeuralError> {
    Ok(value.forward(obs)?.column(0).to_vec())
}

/// Step every actor `length` times under the stochastic policy.
///
/// Finished episodes are reset immediately with seeds from `next_seed`; no
/// stored transition spans a reset.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts<E: Environment, R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    value: &Mlp,
    normalizer: &mut RunningNormalizer,
    actors: &mut [ActorSlot<E>],
    length: usize,
    gamma: f64,
    next_seed: &mut dyn FnMut() -> u64,
    rng: &mut R,
) -> Result<Rollout, PpoError> {
    let n_act = actors.len();
    let obs_dim = normalizer.mean.len();
    let act_dim = policy.act_dim();
    let total = n_act * length;
    let mut out = Rollout {
        num_actors: n_act,
        length,
        obs: Array2::zeros((total, obs_dim)),
        pre_tanh: Array2::zeros((total, act_dim)),
        log_probs: vec![0.0; total],
        values: vec![0.0; total],
        rewards: vec![0.0; total],
        env_rewards: vec![0.0; total],
        dones: vec![false; total],
        terminals: vec![false; total],
        speed_errors: vec![0.0; total],
        last_values: vec![0.0; n_act],
        finished_lengths: Vec::new(),
    };
    let mut raw = Array2::zeros((n_act, obs_dim));
    for t in 0..length {
        for (a, slot) in actors.iter().enumerate() {
            raw.row_mut(a).assign(&ArrayView2::from_shape((1, obs_dim), &slot.obs).unwrap().row(0));
        }
        normalizer.update(raw.view());
        let obs = normalizer.normalize_batch(&raw);
        let sample = policy.sample(obs.view(), rng)?;
        let values = value_of(value, obs.view())?;
        for (a, slot) in actors.iter_mut().enumerate() {
            let i = a * length + t;
            out.obs.row_mut(i).assign(&obs.row(a));
            out.pre_tanh.row_mut(i).assign(&sample.pre_tanh.row(a));
            out.log_probs[i] = sample.log_probs[a];
            out.values[i] = values[a];
            let action = sample.actions.row(a).to_vec();
            let step = slot.env.step(&action)?;
            slot.episode_len += 1;
            out.env_rewards[i] = step.reward;
            out.rewards[i] = step.reward;
            out.speed_errors[i] = (step.forward_velocity - slot.env.episode_config().target_speed).abs();
            out.dones[i] = step.done;
            out.terminals[i] = step.terminal;
            if step.done {
                if !step.terminal {
                    // time limit: the state still has value
                    let last = normalizer.normalize(&step.observation);
                    let v = value.forward_vec(&last)?[0];
                    out.rewards[i] += gamma * v;
                }
                out.finished_lengths.push(slot.episode_len);
                slot.episode_len = 0;
                slot.obs = slot.env.reset(next_seed());
            } else {
                slot.obs = step.observation;
            }
        }
    }
    for (a, slot) in actors.iter().enumerate() {
        raw.row_mut(a).assign(&ndarray::ArrayView1::from(&slot.obs));
    }
    let obs = normalizer.normalize_batch(&raw);
    out.last_values = value_of(value, obs.view())?;
    Ok(out)
}

/// Learner state that a checkpoint captures.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub optimizers: PpoOptimizers,
    pub normalizer: RunningNormalizer,
    pub step: usize,
    pub episodes_started: u64,
}

impl TrainerState {
    pub fn new(config: &TeacherConfig, obs_dim: usize, act_dim: usize) -> Result<Self, PpoError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let policy = GaussianPolicy::new(obs_dim, act_dim, &config.ppo.hidden_sizes, config.ppo.init_log_std, &mut rng)?;
        let vspec = MlpSpec::new(obs_dim, &config.ppo.hidden_sizes, Activation::Relu, 1);
        let value = Mlp::new(vspec, Init::Orthogonal { hidden_gain: 2f64.sqrt(), output_gain: 1.0 }, &mut rng)?;
        let optimizers = PpoOptimizers::new(&policy, &value, config.ppo.learning_rate);
        Ok(Self { policy, value, optimizers, normalizer: RunningNormalizer::new(obs_dim), step: 0, episodes_started: 0 })
    }

    pub fn to_checkpoint(&self, config: &TeacherConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(TEACHER_KIND);
        ck.metadata = serde_json::json!({
            "step": self.step,
            "episodes_started": self.episodes_started,
            "config": config,
        });
        ck.networks.insert("policy".into(), self.policy.mean.clone());
        ck.networks.insert("value".into(), self.value.clone());
        ck.optimizers.insert("policy".into(), self.optimizers.policy.clone());
        ck.optimizers.insert("log_std".into(), self.optimizers.log_std.clone());
        ck.optimizers.insert("value".into(), self.optimizers.value.clone());
        ck.arrays.insert("log_std".into(), self.policy.log_std.clone());
        ck.arrays.insert("obs_normalizer".into(), self.normalizer.to_array());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PpoError> {
        check_kind(ck)?;
        let normalizer = RunningNormalizer::from_array(ck.array("obs_normalizer")?)
            .ok_or_else(|| PpoError::InvalidConfig("malformed observation normalizer".into()))?;
        let step = ck.metadata["step"].as_u64().unwrap_or(0) as usize;
        let episodes_started = ck.metadata["episodes_started"].as_u64().unwrap_or(0);
        Ok(Self {
            policy: GaussianPolicy { mean: ck.network("policy")?.clone(), log_std: ck.array("log_std")?.to_vec() },
            value: ck.network("value")?.clone(),
            optimizers: PpoOptimizers {
                policy: ck.optimizer("policy")?.clone(),
                log_std: ck.optimizer("log_std")?.clone(),
                value: ck.optimizer("value")?.clone(),
            },
            normalizer,
            step,
            episodes_started,
        })
    }
}

fn check_kind(ck: &Checkpoint) -> Result<(), PpoError> {
    if ck.kind != TEACHER_KIND {
        return Err(PpoError::InvalidConfig(format!("checkpoint holds a {:?}, not a teacher", ck.kind)));
    }
    Ok(())
}

/// Deterministic teacher controller: normaliser plus squashed policy mean.
#[derive(Clone, Debug)]
pub struct TeacherPolicy {
    pub policy: GaussianPolicy,
    pub normalizer: RunningNormalizer,
}

impl TeacherPolicy {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PpoError> {
        let s = TrainerState::from_checkpoint(ck)?;
        Ok(Self { policy: s.policy, normalizer: s.normalizer })
    }

    pub fn act(&self, obs: &[f64]) -> Vec<f64> {
        let x = self.normalizer.normalize(obs);
        let view = ArrayView2::from_shape((1, x.len()), &x).unwrap();
        self.policy.deterministic(view).expect("observation width fixed by the normaliser").row(0).to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub total_reward: f64,
    pub length: usize,
    /// Mean forward velocity over the episode, m/s.
    pub mean_speed: f64,
    pub fell: bool,
}

/// Run `episodes` deterministic episodes with seeds derived from `seed`.
pub fn evaluate_policy<E: Environment + ?Sized>(
    controller: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    env: &mut E,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeSummary>, PpoError> {
    let mut out = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut obs = env.reset(episode_seed(seed, k as u64));
        let (mut total, mut speed, mut len) = (0.0, 0.0, 0);
        let fell;
        loop {
            let s = env.step(&controller(&obs))?;
            total += s.reward;
            speed += s.forward_velocity;
            len += 1;
            if s.done {
                fell = s.terminal;
                break;
            }
            obs = s.observation;
        }
        out.push(EpisodeSummary { total_reward: total, length: len, mean_speed: speed / len as f64, fell });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean per-step environment reward over the batch.
    pub mean_reward: f64,
    pub mean_speed_error: f64,
    /// Mean length of the episodes that finished in the batch (NaN if none did).
    pub episode_len: f64,
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub state: TrainerState,
    pub metrics: Vec<MetricsRow>,
    pub updates: Vec<UpdateMetrics>,
}

fn save_checkpoint(state: &TrainerState, config: &TeacherConfig, dir: &Path, name: &str) -> Result<(), PpoError> {
    state.to_checkpoint(config).save(&dir.join(name))?;
    Ok(())
}

/// Collect → GAE → update until `config.ppo.total_steps` environment steps.
///
/// With `out_dir`, appends rows to `metrics.csv`, writes `teacher.ckpt` at the
/// start and end and `teacher_step_<n>.ckpt` every `checkpoint_interval` steps.
/// `resume` continues a previous run's step count and learner state.
pub fn train_teacher(
    config: &TeacherConfig,
    out_dir: Option<&Path>,
    resume: Option<TrainerState>,
) -> Result<TeacherOutcome, PpoError> {
    config.ppo.validate()?;
    config.episode.validate()?;
    config.rom.validate()?;
    let probe = RomEnv::new(config.rom.clone(), config.episode.clone())?;
    let (obs_dim, act_dim) = (probe.observation_dim(), probe.action_dim());
    let mut state = match resume {
        Some(s) => s,
        None => TrainerState::new(config, obs_dim, act_dim)?,
    };
    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let fresh = !path.exists() || std::fs::metadata(&path)?.len() == 0;
            let file = OpenOptions::new().create(true).append(true).open(&path)?;
            let mut w = csv::Writer::from_writer(file);
            if fresh {
                w.write_record(METRICS_HEADER)?;
                w.flush()?;
            }
            save_checkpoint(&state, config, dir, "teacher.ckpt")?;
            Some(w)
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(config.seed, state.step as u64));
    let mut episodes = state.episodes_started;
    let run_seed = config.seed;
    let mut next_seed = || {
        episodes += 1;
        episode_seed(run_seed, episodes)
    };
    let mut actors: Vec<ActorSlot<RomEnv>> = Vec::with_capacity(config.ppo.num_actors);
    for _ in 0..config.ppo.num_actors {
        let mut env = RomEnv::new(config.rom.clone(), config.episode.clone())?;
        let obs = env.reset(next_seed());
        actors.push(ActorSlot { env, obs, episode_len: 0 });
    }
    let mut metrics = Vec::new();
    let mut updates = Vec::new();
    let mut last_len = f64::NAN;
    let batch = config.ppo.batch_size();
    while state.step < config.ppo.total_steps {
        let rollout = collect_rollouts(
            &state.policy,
            &state.value,
            &mut state.normalizer,
            &mut actors,
            config.ppo.rollout_length,
            config.ppo.gamma,
            &mut next_seed,
            &mut rng,
        )?;
        let before = state.step;
        state.step += batch;
        let tb = rollout.training_batch(config.ppo.gamma, config.ppo.gae_lambda)?;
        let upd = ppo_update(&mut state.policy, &mut state.value, &mut state.optimizers, &tb, &config.ppo, &mut rng)?;
        let n = rollout.len() as f64;
        if !rollout.finished_lengths.is_empty() {
            last_len = rollout.finished_lengths.iter().sum::<usize>() as f64 / rollout.finished_lengths.len() as f64;
        }
        let row = MetricsRow {
            step: state.step,
            mean_reward: rollout.env_rewards.iter().sum::<f64>() / n,
            mean_speed_error: rollout.speed_errors.iter().sum::<f64>() / n,
            episode_len: last_len,
        };
        log::info!(
            "step {} reward {:.4} speed_err {:.3} ep_len {:.1} kl {:.4} std {:.3}",
            row.step,
            row.mean_reward,
            row.mean_speed_error,
            row.episode_len,
            upd.approx_kl,
            state.policy.log_std.iter().map(|l| l.exp()).sum::<f64>() / act_dim as f64
        );
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)?;
            w.flush()?;
        }
        metrics.push(row);
        updates.push(upd);
        if let Some(dir) = out_dir {
            let every = config.checkpoint_interval;
            if every > 0 && state.step / every > before / every {
                save_checkpoint(&state, config, dir, &format!("teacher_step_{}.ckpt", state.step))?;
            }
        }
    }
    drop(next_seed);
    state.episodes_started = episodes;
    if let Some(dir) = out_dir {
        save_checkpoint(&state, config, dir, "teacher.ckpt")?;
    }
    Ok(TeacherOutcome { state, metrics, updates })
}

/// Teacher configuration used for velocity tracking rather than raw speed.
pub fn tracking_config(target_speed: f64) -> TeacherConfig {
    TeacherConfig {
        episode: EpisodeConfig { target_speed, reward_mode: RewardMode::Exponential, ..EpisodeConfig::rom() },
        ..TeacherConfig::default()
    }
}
