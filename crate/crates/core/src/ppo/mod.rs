//! Clipped-surrogate policy optimisation with GAE for the ROM teacher.

mod train;

pub use train::{
    collect_rollouts, episode_seed, evaluate_policy, tracking_config, train_teacher, EpisodeSummary, Rollout, TeacherConfig, TeacherOutcome,
    TeacherPolicy, TrainerState, METRICS_HEADER,
};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvError;
use crate::neural::{clip_grad_norm, gather_rows, unused_rng, Activation, Adam, AdamConfig, Init, Mlp, MlpSpec, Mode, NeuralError};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("sequence lengths differ: {0}")]
    LengthMismatch(String),
    #[error("non-finite loss in update; parameters left unchanged")]
    NonFiniteLoss,
    #[error("invalid PPO configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("metrics log: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub num_actors: usize,
    pub rollout_length: usize,
    pub total_steps: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
    pub value_loss_coeff: f64,
    pub entropy_coeff: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub hidden_sizes: Vec<usize>,
    pub init_log_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            num_actors: 8,
            rollout_length: 128,
            total_steps: 1_000_000,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            epochs_per_batch: 4,
            minibatch_size: 256,
            value_loss_coeff: 0.5,
            entropy_coeff: 0.0,
            learning_rate: 1e-4,
            max_grad_norm: 0.5,
            hidden_sizes: vec![512, 512],
            init_log_std: 0.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let fail = |m: &str| Err(PpoError::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("gae_lambda must be in [0, 1]");
        }
        if !(self.clip_ratio > 0.0) {
            return fail("clip_ratio must be > 0");
        }
        if self.num_actors == 0 || self.rollout_length == 0 || self.minibatch_size == 0 || self.epochs_per_batch == 0 {
            return fail("num_actors, rollout_length, minibatch_size and epochs_per_batch must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return fail("learning_rate and max_grad_norm must be > 0");
        }
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            return fail("hidden sizes must be >= 1");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.num_actors * self.rollout_length
    }
}

/// Running mean and variance of observations, merged batch-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
    pub clip: f64,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim], count: 1e-4, clip: 10.0 }
    }

    pub fn update(&mut self, batch: ArrayView2<f64>) {
        let n = batch.nrows() as f64;
        if n == 0.0 {
            return;
        }
        let mean = batch.mean_axis(Axis(0)).unwrap();
        let var = batch.var_axis(Axis(0), 0.0);
        let total = self.count + n;
        for i in 0..self.mean.len() {
            let delta = mean[i] - self.mean[i];
            let m2 = self.var[i] * self.count + var[i] * n + delta * delta * self.count * n / total;
            self.mean[i] += delta * n / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(x, (m, v))| ((x - m) / (v + 1e-8).sqrt()).clamp(-self.clip, self.clip))
            .collect()
    }

    pub fn normalize_batch(&self, obs: &Array2<f64>) -> Array2<f64> {
        let mut out = obs.clone();
        for mut row in out.rows_mut() {
            let n = self.normalize(row.as_slice().unwrap());
            row.assign(&Array1::from(n));
        }
        out
    }

    /// `[mean…, var…, count]`, for checkpoints.
    pub fn to_array(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend(&self.var);
        v.push(self.count);
        v
    }

    pub fn from_array(values: &[f64]) -> Option<Self> {
        if values.len() % 2 != 1 {
            return None;
        }
        let d = values.len() / 2;
        Some(Self { mean: values[..d].to_vec(), var: values[d..2 * d].to_vec(), count: values[2 * d], clip: 10.0 })
    }
}

/// `ln(1 − tanh²(u))`, stable for large |u|.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Diagonal Gaussian over pre-squash actions `u`; actions are `tanh(u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PolicySample {
    pub pre_tanh: Array2<f64>,
    pub actions: Array2<f64>,
    /// Log-density of `pre_tanh` (the tanh Jacobian cancels in probability ratios).
    pub log_probs: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], init_log_std: f64, rng: &mut R) -> Result<Self, NeuralError> {
        let spec = MlpSpec::new(obs_dim, hidden, Activation::Relu, act_dim);
        let mean = Mlp::new(spec, Init::Orthogonal { hidden_gain: 2f64.sqrt(), output_gain: 0.01 }, rng)?;
        Ok(Self { mean, log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); act_dim] })
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    fn clamped_log_std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    pub fn gaussian_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
        u.iter()
            .zip(mean)
            .zip(log_std)
            .map(|((u, m), ls)| {
                let z = (u - m) / ls.exp();
                -0.5 * z * z - ls - 0.5 * LN_2PI
            })
            .sum()
    }

    /// Log-density of the squashed action `tanh(u)`.
    pub fn squashed_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
        Self::gaussian_log_prob(u, mean, log_std) - u.iter().map(|&u| log_one_minus_tanh_sq(u)).sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, obs: ArrayView2<f64>, rng: &mut R) -> Result<PolicySample, NeuralError> {
        let mean = self.mean.forward(obs)?;
        let log_std = self.clamped_log_std();
        let mut pre_tanh = mean.clone();
        for mut row in pre_tanh.rows_mut() {
            for (u, ls) in row.iter_mut().zip(&log_std) {
                let eps: f64 = StandardNormal.sample(rng);
                *u += ls.exp() * eps;
            }
        }
        let log_probs = pre_tanh
            .rows()
            .into_iter()
            .zip(mean.rows())
            .map(|(u, m)| Self::gaussian_log_prob(u.as_slice().unwrap(), m.as_slice().unwrap(), &log_std))
            .collect();
        let actions = pre_tanh.mapv(f64::tanh);
        Ok(PolicySample { pre_tanh, actions, log_probs })
    }

    pub fn deterministic(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        Ok(self.mean.forward(obs)?.mapv(f64::tanh))
    }

    pub fn entropy(&self) -> f64 {
        self.clamped_log_std().iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
    }
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)` and its derivative with respect to `r`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

/// Generalised advantage estimates for one actor's trajectory segment.
///
/// `dones[t]` marks that the episode ended after step `t`; `last_value` bootstraps
/// the final step when it did not.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(PpoError::LengthMismatch(format!(
            "rewards {}, values {}, dones {}",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        running = delta + gamma * lambda * not_done * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shift and scale to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    adv.iter_mut().for_each(|a| *a -= mean);
    let std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        adv.iter_mut().for_each(|a| *a /= std);
    }
}

/// Everything one PPO update consumes; rows are samples.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub obs: Array2<f64>,
    pub pre_tanh: Array2<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PpoOptimizers {
    pub policy: Adam,
    pub log_std: Adam,
    pub value: Adam,
}

impl PpoOptimizers {
    pub fn new(policy: &GaussianPolicy, value: &Mlp, learning_rate: f64) -> Self {
        let cfg = AdamConfig::with_lr(learning_rate);
        Self {
            policy: Adam::new(cfg, policy.mean.num_params()),
            log_std: Adam::new(cfg, policy.log_std.len()),
            value: Adam::new(cfg, value.num_params()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Losses and gradients of one minibatch, before any parameter changes.
struct MinibatchGrads {
    policy: Vec<f64>,
    log_std: Vec<f64>,
    value: Vec<f64>,
    policy_loss: f64,
    value_loss: f64,
    approx_kl: f64,
    clip_fraction: f64,
}

fn minibatch_grads(
    policy: &GaussianPolicy,
    value: &Mlp,
    mb: &TrainingBatch,
    cfg: &PpoConfig,
) -> Result<MinibatchGrads, PpoError> {
    let b = mb.obs.nrows();
    let bf = b as f64;
    let mut dummy = unused_rng();
    let (mean, trace) = policy.mean.forward_trace(mb.obs.view(), Mode::Train, &mut dummy)?;
    let log_std = policy.clamped_log_std();
    let act_dim = log_std.len();
    let mut d_mean = Array2::zeros(mean.raw_dim());
    let mut d_log_std = vec![0.0; act_dim];
    let (mut policy_loss, mut approx_kl, mut clipped) = (0.0, 0.0, 0usize);
    for i in 0..b {
        let u = mb.pre_tanh.row(i);
        let m = mean.row(i);
        let lp = GaussianPolicy::gaussian_log_prob(u.as_slice().unwrap(), m.as_slice().unwrap(), &log_std);
        let log_ratio = lp - mb.old_log_probs[i];
        let ratio = log_ratio.exp();
        let (obj, d_ratio) = clipped_surrogate(ratio, mb.advantages[i], cfg.clip_ratio);
        policy_loss -= obj / bf;
        approx_kl += (ratio - 1.0 - log_ratio) / bf;
        if (ratio - 1.0).abs() > cfg.clip_ratio {
            clipped += 1;
        }
        // ∂(−obj/B)/∂lp = −d_ratio·ratio/B
        let g = -d_ratio * ratio / bf;
        if g != 0.0 {
            for j in 0..act_dim {
                let sigma2 = (2.0 * log_std[j]).exp();
                let diff = u[j] - m[j];
                d_mean[[i, j]] += g * diff / sigma2;
                d_log_std[j] += g * (diff * diff / sigma2 - 1.0);
            }
        }
    }
    let entropy = policy.entropy();
    policy_loss -= cfg.entropy_coeff * entropy;
    for (j, d) in d_log_std.iter_mut().enumerate() {
        *d -= cfg.entropy_coeff;
        // clamped coordinates receive no gradient
        if policy.log_std[j] != log_std[j] {
            *d = 0.0;
        }
    }
    let policy_grads = policy.mean.backward(&trace, d_mean.view())?.params;

    let (v, vtrace) = value.forward_trace(mb.obs.view(), Mode::Train, &mut dummy)?;
    let mut d_v = Array2::zeros((b, 1));
    let mut value_loss = 0.0;
    for i in 0..b {
        let err = v[[i, 0]] - mb.returns[i];
        value_loss += err * err / bf;
        d_v[[i, 0]] = cfg.value_loss_coeff * 2.0 * err / bf;
    }
    let value_grads = value.backward(&vtrace, d_v.view())?.params;
    let total = policy_loss + cfg.value_loss_coeff * value_loss;
    if !total.is_finite() {
        return Err(PpoError::NonFiniteLoss);
    }
    Ok(MinibatchGrads {
        policy: policy_grads,
        log_std: d_log_std,
        value: value_grads,
        policy_loss,
        value_loss,
        approx_kl,
        clip_fraction: clipped as f64 / bf,
    })
}

/// Several epochs of minibatch updates on one batch. On a non-finite loss
/// every network and optimizer is restored to its state on entry.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut GaussianPolicy,
    value: &mut Mlp,
    opt: &mut PpoOptimizers,
    batch: &TrainingBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateMetrics, PpoError> {
    let saved = (policy.clone(), value.clone(), opt.clone());
    let result = run_epochs(policy, value, opt, batch, cfg, rng);
    if result.is_err() {
        (*policy, *value, *opt) = saved;
    }
    result
}

fn run_epochs<R: Rng + ?Sized>(
    policy: &mut GaussianPolicy,
    value: &mut Mlp,
    opt: &mut PpoOptimizers,
    batch: &TrainingBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateMetrics, PpoError> {
    let n = batch.obs.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut metrics = UpdateMetrics::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs_per_batch {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch_size) {
            let mb = TrainingBatch {
                obs: gather_rows(&batch.obs, chunk),
                pre_tanh: gather_rows(&batch.pre_tanh, chunk),
                old_log_probs: chunk.iter().map(|&i| batch.old_log_probs[i]).collect(),
                advantages: chunk.iter().map(|&i| batch.advantages[i]).collect(),
                returns: chunk.iter().map(|&i| batch.returns[i]).collect(),
            };
            let mut g = minibatch_grads(policy, value, &mb, cfg)?;
            // policy mean and log-std share one clipping budget
            let mut joint: Vec<f64> = g.policy.iter().chain(&g.log_std).copied().collect();
            clip_grad_norm(&mut joint, cfg.max_grad_norm);
            let (gp, gl) = joint.split_at(g.policy.len());
            clip_grad_norm(&mut g.value, cfg.max_grad_norm);
            opt.policy.step(policy.mean.params_mut(), gp)?;
            opt.log_std.step(&mut policy.log_std, gl)?;
            opt.value.step(value.params_mut(), &g.value)?;
            for ls in &mut policy.log_std {
                *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
            metrics.policy_loss += g.policy_loss;
            metrics.value_loss += g.value_loss;
            metrics.approx_kl += g.approx_kl;
            metrics.clip_fraction += g.clip_fraction;
            count += 1.0;
        }
    }
    if count > 0.0 {
        metrics.policy_loss /= count;
        metrics.value_loss /= count;
        metrics.approx_kl /= count;
        metrics.clip_fraction /= count;
    }
    metrics.entropy = policy.entropy();
    Ok(metrics)
}
