//! Entropy-regularised off-policy actor-critic with twin critics, target
//! networks, automatic temperature and a uniform replay buffer.

mod replay;

pub use replay::{ReplayBatch, ReplayBuffer, Transition};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{clip_grad_norm, unused_rng, Activation, Adam, AdamConfig, Checkpoint, Init, Mlp, MlpSpec, Mode, NeuralError};
use crate::ppo::log_one_minus_tanh_sq;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error)]
pub enum SacError {
    #[error("non-finite loss in update; networks left unchanged")]
    NonFiniteLoss,
    #[error("invalid SAC configuration: {0}")]
    InvalidConfig(String),
    #[error("replay holds {have} transitions, need {need}")]
    NotEnoughData { have: usize, need: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    /// Defaults to `−dim(action)` when absent.
    pub entropy_target: Option<f64>,
    pub auto_alpha: bool,
    pub initial_alpha: f64,
    /// Gradient updates per environment step; fractional values accumulate.
    pub updates_per_env_step: f64,
    pub warmup_steps: usize,
    pub hidden_sizes: Vec<usize>,
    /// Applied separately to actor and critic gradients; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            replay_capacity: 1_000_000,
            batch_size: 256,
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            entropy_target: None,
            auto_alpha: true,
            initial_alpha: 0.2,
            updates_per_env_step: 1.0,
            warmup_steps: 5000,
            hidden_sizes: vec![256, 256],
            max_grad_norm: 0.0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let fail = |m: &str| Err(SacError::InvalidConfig(m.into()));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail("tau must be in (0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return fail("need 1 <= batch_size <= replay_capacity");
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return fail("gamma must be in [0, 1]");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.alpha_lr > 0.0) {
            return fail("learning rates must be > 0");
        }
        if !(self.initial_alpha > 0.0) {
            return fail("initial_alpha must be > 0");
        }
        if !(self.updates_per_env_step > 0.0) || !self.updates_per_env_step.is_finite() {
            return fail("updates_per_env_step must be > 0");
        }
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            return fail("hidden sizes must be >= 1");
        }
        Ok(())
    }

    pub fn entropy_target_for(&self, act_dim: usize) -> f64 {
        self.entropy_target.unwrap_or(-(act_dim as f64))
    }
}

/// Map an unconstrained output to `[LOG_STD_MIN, LOG_STD_MAX]` and return the
/// derivative of the map.
fn squash_log_std(raw: f64) -> (f64, f64) {
    let t = raw.tanh();
    let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
    (LOG_STD_MIN + half * (t + 1.0), half * (1.0 - t * t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    Deterministic,
}

/// Actor output for a batch: squashed actions, log-probs and the pieces the
/// reparameterised gradient needs.
#[derive(Clone, Debug)]
pub struct ActorSample {
    pub actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    noise: Array2<f64>,
    std: Array2<f64>,
    dlogstd_draw: Array2<f64>,
}

/// State-dependent tanh-squashed Gaussian policy; the network emits the mean
/// and an unconstrained log-std for every action component.
#[derive(Clone, Debug, PartialEq)]
pub struct SquashedGaussianActor {
    pub net: Mlp,
    act_dim: usize,
}

impl SquashedGaussianActor {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self, NeuralError> {
        let spec = MlpSpec::new(obs_dim, hidden, Activation::Relu, 2 * act_dim);
        let net = Mlp::new(spec, Init::UniformFanIn, rng)?;
        Ok(Self { net, act_dim })
    }

    pub fn from_net(net: Mlp) -> Self {
        let act_dim = net.spec().output_dim / 2;
        Self { net, act_dim }
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    fn sample_from_output<R: Rng + ?Sized>(&self, out: &Array2<f64>, mode: ActionMode, rng: &mut R) -> ActorSample {
        let (b, k) = (out.nrows(), self.act_dim);
        let mut actions = Array2::zeros((b, k));
        let mut noise = Array2::zeros((b, k));
        let mut std = Array2::zeros((b, k));
        let mut dlogstd_draw = Array2::zeros((b, k));
        let mut log_probs = vec![0.0; b];
        for i in 0..b {
            let mut lp = 0.0;
            for j in 0..k {
                let (ls, dls) = squash_log_std(out[[i, k + j]]);
                let sigma = ls.exp();
                let eps: f64 = match mode {
                    ActionMode::Stochastic => StandardNormal.sample(rng),
                    ActionMode::Deterministic => 0.0,
                };
                let u = out[[i, j]] + sigma * eps;
                actions[[i, j]] = u.tanh();
                noise[[i, j]] = eps;
                std[[i, j]] = sigma;
                dlogstd_draw[[i, j]] = dls;
                lp += -0.5 * eps * eps - ls - 0.5 * LN_2PI - log_one_minus_tanh_sq(u);
            }
            log_probs[i] = lp;
        }
        ActorSample { actions, log_probs, noise, std, dlogstd_draw }
    }

    /// Squashed action and its log-density; deterministic mode returns
    /// `tanh(mean)` with the density at that point.
    pub fn sample<R: Rng + ?Sized>(&self, obs: ArrayView2<f64>, mode: ActionMode, rng: &mut R) -> Result<ActorSample, NeuralError> {
        let out = self.net.forward(obs)?;
        Ok(self.sample_from_output(&out, mode, rng))
    }

    pub fn act(&self, obs: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let view = ArrayView2::from_shape((1, obs.len()), obs).map_err(|_| NeuralError::DimensionMismatch {
            expected: self.net.spec().input_dim,
            got: obs.len(),
        })?;
        Ok(self.sample(view, ActionMode::Deterministic, &mut unused_rng())?.actions.row(0).to_vec())
    }
}

pub fn critic_spec(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> MlpSpec {
    MlpSpec::new(obs_dim + act_dim, hidden, Activation::Relu, 1)
}

fn joined(obs: ArrayView2<f64>, act: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[obs, act]).expect("row counts match")
}

/// `y = r + γ·(1 − done)·(min(Q1', Q2') − α·log π(a'|s'))` per sample.
pub fn soft_target(reward: f64, terminal: bool, q1_next: f64, q2_next: f64, next_log_prob: f64, alpha: f64, gamma: f64) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * (q1_next.min(q2_next) - alpha * next_log_prob)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SacMetrics {
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    /// Mean of the (possibly blended) rewards used for the targets.
    pub reward_mean: f64,
}

#[derive(Clone, Debug)]
pub struct SacAgent {
    pub config: SacConfig,
    pub actor: SquashedGaussianActor,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub actor_opt: Adam,
    pub q1_opt: Adam,
    pub q2_opt: Adam,
    pub log_alpha: f64,
    pub alpha_opt: Adam,
    pub updates: usize,
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(config: SacConfig, obs_dim: usize, act_dim: usize, rng: &mut R) -> Result<Self, SacError> {
        config.validate()?;
        let actor = SquashedGaussianActor::new(obs_dim, act_dim, &config.hidden_sizes, rng)?;
        let spec = critic_spec(obs_dim, act_dim, &config.hidden_sizes);
        let q1 = Mlp::new(spec.clone(), Init::UniformFanIn, rng)?;
        let q2 = Mlp::new(spec, Init::UniformFanIn, rng)?;
        Ok(Self {
            actor_opt: Adam::new(AdamConfig::with_lr(config.actor_lr), actor.net.num_params()),
            q1_opt: Adam::new(AdamConfig::with_lr(config.critic_lr), q1.num_params()),
            q2_opt: Adam::new(AdamConfig::with_lr(config.critic_lr), q2.num_params()),
            alpha_opt: Adam::new(AdamConfig::with_lr(config.alpha_lr), 1),
            log_alpha: config.initial_alpha.ln(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            config,
            updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Soft Bellman targets for a batch with the given rewards.
    pub fn critic_targets<R: Rng + ?Sized>(&self, batch: &ReplayBatch, rewards: &[f64], rng: &mut R) -> Result<Vec<f64>, NeuralError> {
        let next = self.actor.sample(batch.next_obs.view(), ActionMode::Stochastic, rng)?;
        let x = joined(batch.next_obs.view(), next.actions.view());
        let q1 = self.q1_target.forward(x.view())?;
        let q2 = self.q2_target.forward(x.view())?;
        let alpha = self.alpha();
        Ok((0..rewards.len())
            .map(|i| soft_target(rewards[i], batch.terminals[i], q1[[i, 0]], q2[[i, 0]], next.log_probs[i], alpha, self.config.gamma))
            .collect())
    }

    /// `mean(α·log π(a|s) − min(Q1, Q2)(s, a))` with reparameterised actions,
    /// its parameter gradient, and the sampled log-probs.
    pub fn actor_objective<R: Rng + ?Sized>(&self, obs: ArrayView2<f64>, rng: &mut R) -> Result<(f64, Vec<f64>, Vec<f64>), NeuralError> {
        let b = obs.nrows();
        let bf = b as f64;
        let mut dummy = unused_rng();
        let (out, atrace) = self.actor.net.forward_trace(obs, Mode::Train, &mut dummy)?;
        let smp = self.actor.sample_from_output(&out, ActionMode::Stochastic, rng);
        let xa = joined(obs, smp.actions.view());
        let (qa1, t1) = self.q1.forward_trace(xa.view(), Mode::Train, &mut dummy)?;
        let (qa2, t2) = self.q2.forward_trace(xa.view(), Mode::Train, &mut dummy)?;
        let ones = Array2::from_elem((b, 1), 1.0);
        let ga1 = self.q1.backward(&t1, ones.view())?.input;
        let ga2 = self.q2.backward(&t2, ones.view())?.input;
        let alpha = self.alpha();
        let k = self.actor.act_dim;
        let obs_dim = obs.ncols();
        let mut d_out = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for i in 0..b {
            let use_first = qa1[[i, 0]] <= qa2[[i, 0]];
            let qmin = if use_first { qa1[[i, 0]] } else { qa2[[i, 0]] };
            let grad_a = if use_first { ga1.slice(s![i, obs_dim..]) } else { ga2.slice(s![i, obs_dim..]) };
            loss += (alpha * smp.log_probs[i] - qmin) / bf;
            for j in 0..k {
                let a = smp.actions[[i, j]];
                let (eps, sigma) = (smp.noise[[i, j]], smp.std[[i, j]]);
                let jac = 1.0 - a * a;
                // ∂logπ/∂μ = 2a, ∂logπ/∂logσ = −1 + 2a·σε
                let d_mu = alpha * 2.0 * a - grad_a[j] * jac;
                let d_ls = alpha * (-1.0 + 2.0 * a * sigma * eps) - grad_a[j] * jac * sigma * eps;
                d_out[[i, j]] = d_mu / bf;
                d_out[[i, k + j]] = d_ls * smp.dlogstd_draw[[i, j]] / bf;
            }
        }
        let grads = self.actor.net.backward(&atrace, d_out.view())?.params;
        Ok((loss, grads, smp.log_probs))
    }

    /// One critic, actor and temperature step on `batch` with `rewards`, then
    /// a Polyak target update. On a non-finite loss nothing changes.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &ReplayBatch, rewards: &[f64], rng: &mut R) -> Result<SacMetrics, SacError> {
        let b = batch.obs.nrows();
        let bf = b as f64;
        let mut dummy = unused_rng();
        let targets = self.critic_targets(batch, rewards, rng)?;

        // critics
        let x = joined(batch.obs.view(), batch.actions.view());
        let mut critic_step = |net: &Mlp| -> Result<(f64, Vec<f64>), NeuralError> {
            let (q, trace) = net.forward_trace(x.view(), Mode::Train, &mut dummy)?;
            let mut d = Array2::zeros((b, 1));
            let mut loss = 0.0;
            for i in 0..b {
                let err = q[[i, 0]] - targets[i];
                loss += err * err / bf;
                d[[i, 0]] = 2.0 * err / bf;
            }
            Ok((loss, net.backward(&trace, d.view())?.params))
        };
        let (q1_loss, mut g1) = critic_step(&self.q1)?;
        let (q2_loss, mut g2) = critic_step(&self.q2)?;

        let (actor_loss, mut ga, log_probs) = self.actor_objective(batch.obs.view(), rng)?;
        let mean_log_prob = log_probs.iter().sum::<f64>() / bf;
        let target_entropy = self.config.entropy_target_for(self.actor.act_dim);
        let alpha_grad = -(mean_log_prob + target_entropy);

        if ![q1_loss, q2_loss, actor_loss, alpha_grad].iter().all(|v| v.is_finite()) {
            log::warn!("skipping SAC update with non-finite loss");
            return Err(SacError::NonFiniteLoss);
        }
        if self.config.max_grad_norm > 0.0 {
            for g in [&mut g1, &mut g2, &mut ga] {
                clip_grad_norm(g, self.config.max_grad_norm);
            }
        }
        let saved = (self.q1.clone(), self.q2.clone(), self.actor.clone());
        let applied = (|| -> Result<(), NeuralError> {
            self.q1_opt.step(self.q1.params_mut(), &g1)?;
            self.q2_opt.step(self.q2.params_mut(), &g2)?;
            self.actor_opt.step(self.actor.net.params_mut(), &ga)?;
            Ok(())
        })();
        if let Err(e) = applied {
            (self.q1, self.q2, self.actor) = saved;
            return Err(e.into());
        }
        if self.config.auto_alpha {
            let mut la = [self.log_alpha];
            self.alpha_opt.step(&mut la, &[alpha_grad])?;
            self.log_alpha = la[0];
        }
        self.q1_target.polyak_from(&self.q1, self.config.tau)?;
        self.q2_target.polyak_from(&self.q2, self.config.tau)?;
        self.updates += 1;
        Ok(SacMetrics {
            q1_loss,
            q2_loss,
            actor_loss,
            alpha: self.alpha(),
            entropy: -mean_log_prob,
            reward_mean: rewards.iter().sum::<f64>() / bf,
        })
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        ck.networks.insert("actor".into(), self.actor.net.clone());
        for (name, net) in [("q1", &self.q1), ("q2", &self.q2), ("q1_target", &self.q1_target), ("q2_target", &self.q2_target)] {
            ck.networks.insert(name.into(), net.clone());
        }
        for (name, opt) in [("actor", &self.actor_opt), ("q1", &self.q1_opt), ("q2", &self.q2_opt), ("log_alpha", &self.alpha_opt)] {
            ck.optimizers.insert(name.into(), opt.clone());
        }
        ck.arrays.insert("log_alpha".into(), vec![self.log_alpha, self.updates as f64]);
    }

    pub fn read_checkpoint(ck: &Checkpoint, config: SacConfig) -> Result<Self, SacError> {
        let la = ck.array("log_alpha")?;
        if la.len() != 2 {
            return Err(SacError::InvalidConfig("malformed temperature entry".into()));
        }
        Ok(Self {
            actor: SquashedGaussianActor::from_net(ck.network("actor")?.clone()),
            q1: ck.network("q1")?.clone(),
            q2: ck.network("q2")?.clone(),
            q1_target: ck.network("q1_target")?.clone(),
            q2_target: ck.network("q2_target")?.clone(),
            actor_opt: ck.optimizer("actor")?.clone(),
            q1_opt: ck.optimizer("q1")?.clone(),
            q2_opt: ck.optimizer("q2")?.clone(),
            alpha_opt: ck.optimizer("log_alpha")?.clone(),
            log_alpha: la[0],
            updates: la[1] as usize,
            config,
        })
    }
}
