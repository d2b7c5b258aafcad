//! Gait discriminator: smoothed-label BCE with input noise, dropout and a
//! gradient penalty, the imitation bonus it induces, reward blending, and the
//! gated update schedule with early freezing.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaitdata::{ReferenceDataset, FEATURE_DIM};
use crate::neural::{Activation, Adam, AdamConfig, Checkpoint, Init, Mlp, MlpSpec, Mode, NeuralError, LEAKY_RELU_SLOPE};
use crate::ppo::softplus;

/// Probability clamp used by the imitation bonus.
pub const PROB_CLIP: f64 = 1e-6;
pub const DISCRIMINATOR_KIND: &str = "gait_discriminator";

#[derive(Debug, Error)]
pub enum GailError {
    #[error("discriminator batch is empty ({0})")]
    EmptyBatch(&'static str),
    #[error("invalid discriminator configuration: {0}")]
    InvalidConfig(String),
    #[error("reference dataset has {frames} frames, too few for window {window} with a holdout split")]
    ReferenceTooSmall { frames: usize, window: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub dropout_prob: f64,
    pub input_noise_sigma: f64,
    pub label_real: f64,
    pub label_fake: f64,
    pub learning_rate: f64,
    pub gradient_penalty_coeff: f64,
    /// Learner updates between discriminator updates.
    pub update_every: usize,
    /// First global environment step at which updates may happen.
    pub start_step: usize,
    pub holdout_fraction: f64,
    /// Consecutive non-improving holdout evaluations before freezing.
    pub patience: usize,
    /// Real and fake samples per update.
    pub batch_size: usize,
    /// Consecutive frames stacked into one input.
    pub window: usize,
    /// Output-layer gain of the orthogonal initialization; 3 gives an input
    /// gradient norm near 1, where the penalty wants it.
    pub init_output_gain: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            leaky_slope: LEAKY_RELU_SLOPE,
            dropout_prob: 0.2,
            input_noise_sigma: 0.05,
            label_real: 0.9,
            label_fake: 0.1,
            learning_rate: 1e-5,
            gradient_penalty_coeff: 10.0,
            update_every: 5,
            start_step: 5000,
            holdout_fraction: 0.1,
            patience: 10,
            batch_size: 256,
            window: 1,
            init_output_gain: 3.0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<(), GailError> {
        let fail = |m: &str| Err(GailError::InvalidConfig(m.into()));
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return fail("holdout_fraction must be in (0, 1)");
        }
        if self.patience < 1 || self.update_every < 1 || self.batch_size < 1 || self.window < 1 {
            return fail("patience, update_every, batch_size and window must be >= 1");
        }
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.label_real) || !in_unit(self.label_fake) {
            return fail("labels must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout_prob) || !(self.input_noise_sigma >= 0.0) {
            return fail("dropout_prob must be in [0, 1) and input_noise_sigma >= 0");
        }
        if !(self.learning_rate > 0.0) || !(self.gradient_penalty_coeff >= 0.0) {
            return fail("learning_rate must be > 0 and gradient_penalty_coeff >= 0");
        }
        if !(self.init_output_gain > 0.0) {
            return fail("init_output_gain must be > 0");
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return fail("hidden widths must be >= 1");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        FEATURE_DIM * self.window
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec::new(self.input_dim(), &self.hidden, Activation::LeakyRelu(self.leaky_slope), 1)
            .with_dropout(self.dropout_prob)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendConfig {
    pub eta: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { eta: 0.5 }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<(), GailError> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(GailError::InvalidConfig(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }

    /// η = 1 uses the environment reward alone and never needs a discriminator.
    pub fn uses_imitation(&self) -> bool {
        self.eta < 1.0
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `−[t·ln σ(z) + (1−t)·ln(1−σ(z))]` evaluated from the logit.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    softplus(logit) - target * logit
}

/// `−ln(1 − D)` with `D` clamped to `[PROB_CLIP, 1 − PROB_CLIP]`.
pub fn imitation_bonus(prob: f64) -> f64 {
    -(1.0 - prob.clamp(PROB_CLIP, 1.0 - PROB_CLIP)).ln()
}

pub fn blend_reward(r_env: f64, r_im: f64, eta: f64) -> f64 {
    eta * r_env + (1.0 - eta) * r_im
}

/// Stack `window` consecutive frames per row; row `i` covers frames `i..i+window`.
pub fn stack_windows(frames: ArrayView2<f64>, window: usize) -> Array2<f64> {
    let n = frames.nrows().saturating_sub(window - 1);
    let d = frames.ncols();
    Array2::from_shape_fn((n, d * window), |(i, j)| frames[[i + j / d, j % d]])
}

/// Uniform per-pair interpolants `u·real + (1−u)·fake` over the first
/// `min(len)` pairs.
pub fn interpolate<R: Rng + ?Sized>(real: ArrayView2<f64>, fake: ArrayView2<f64>, rng: &mut R) -> Array2<f64> {
    let n = real.nrows().min(fake.nrows());
    let mut out = Array2::zeros((n, real.ncols()));
    for i in 0..n {
        let u: f64 = rng.random();
        for j in 0..real.ncols() {
            out[[i, j]] = u * real[[i, j]] + (1.0 - u) * fake[[i, j]];
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    /// `bce + λ·penalty`.
    pub loss: f64,
    pub bce: f64,
    pub penalty: f64,
    /// Mean `|‖∇_x D(x̂)‖ − 1|` on the interpolants.
    pub gradient_gap: f64,
    pub grads: Vec<f64>,
}

/// Discriminator loss and parameter gradient for one real and one fake batch.
///
/// Both batches receive input noise and pass through dropout; the gradient
/// penalty is taken on clean interpolants in evaluation mode. Targets and λ
/// are passed explicitly so the unsmoothed, penalty-free loss can be formed.
pub fn discriminator_loss<R: Rng + ?Sized>(
    net: &Mlp,
    real: ArrayView2<f64>,
    fake: ArrayView2<f64>,
    cfg: &DiscriminatorConfig,
    rng: &mut R,
) -> Result<LossTerms, GailError> {
    if real.nrows() == 0 {
        return Err(GailError::EmptyBatch("real"));
    }
    if fake.nrows() == 0 {
        return Err(GailError::EmptyBatch("fake"));
    }
    let (nr, nf) = (real.nrows(), fake.nrows());
    let mut x = concatenate(Axis(0), &[real, fake]).map_err(|_| NeuralError::DimensionMismatch {
        expected: real.ncols(),
        got: fake.ncols(),
    })?;
    if cfg.input_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.input_noise_sigma).expect("sigma validated");
        x.mapv_inplace(|v| v + noise.sample(rng));
    }
    let (logits, trace) = net.forward_trace(x.view(), Mode::Train, rng)?;
    let mut d_logits = Array2::zeros((nr + nf, 1));
    let mut bce = 0.0;
    for i in 0..nr + nf {
        let (target, n) = if i < nr { (cfg.label_real, nr) } else { (cfg.label_fake, nf) };
        let z = logits[[i, 0]];
        bce += bce_with_logits(z, target) / n as f64;
        d_logits[[i, 0]] = (sigmoid(z) - target) / n as f64;
    }
    let mut grads = net.backward(&trace, d_logits.view())?.params;
    let (mut penalty, mut gap) = (0.0, 0.0);
    if cfg.gradient_penalty_coeff > 0.0 {
        let xhat = interpolate(real, fake, rng);
        let term = net.input_gradient_penalty(xhat.view())?;
        penalty = term.value;
        gap = term.mean_abs_gap;
        for (g, p) in grads.iter_mut().zip(&term.params) {
            *g += cfg.gradient_penalty_coeff * p;
        }
    }
    Ok(LossTerms { loss: bce + cfg.gradient_penalty_coeff * penalty, bce, penalty, gradient_gap: gap, grads })
}

/// Eval-mode probabilities for every row.
pub fn probabilities(net: &Mlp, x: ArrayView2<f64>) -> Result<Vec<f64>, NeuralError> {
    Ok(net.forward(x)?.column(0).iter().map(|&z| sigmoid(z)).collect())
}

/// Fraction of real rows with `D > 0.5` and fake rows with `D < 0.5`.
pub fn accuracy(net: &Mlp, real: ArrayView2<f64>, fake: ArrayView2<f64>) -> Result<f64, NeuralError> {
    let pr = probabilities(net, real)?;
    let pf = probabilities(net, fake)?;
    let correct = pr.iter().filter(|&&p| p > 0.5).count() + pf.iter().filter(|&&p| p < 0.5).count();
    Ok(correct as f64 / (pr.len() + pf.len()) as f64)
}

/// Mean eval-mode `|‖∇_x D(x̂)‖ − 1|` over fresh interpolants.
pub fn gradient_gap<R: Rng + ?Sized>(net: &Mlp, real: ArrayView2<f64>, fake: ArrayView2<f64>, rng: &mut R) -> Result<f64, NeuralError> {
    let xhat = interpolate(real, fake, rng);
    Ok(net.input_gradient_penalty(xhat.view())?.mean_abs_gap)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscriminatorUpdate {
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub penalty: f64,
    pub gradient_gap: f64,
    pub frozen: bool,
}

const HOLDOUT_INTERPOLATION_SEED: u64 = 0x5eed;

/// Discriminator network, optimizer, reference split and schedule counters.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub net: Mlp,
    pub optimizer: Adam,
    /// Reference inputs used for training.
    pub train_set: Array2<f64>,
    /// Reference inputs withheld for early stopping.
    pub holdout_set: Array2<f64>,
    pub best_holdout: f64,
    pub non_improving: usize,
    pub frozen: bool,
    /// Gradient steps taken.
    pub updates: usize,
    /// Calls to [`Discriminator::scheduled_update`].
    pub schedule_calls: usize,
    /// Student features drawn at the first scheduled update and kept fixed,
    /// so successive holdout losses differ only through the network.
    pub fake_holdout: Option<Array2<f64>>,
}

impl Discriminator {
    /// Build from reference inputs (one row per stacked window), splitting off
    /// a seeded holdout subset.
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, reference: ArrayView2<f64>, split_seed: u64, rng: &mut R) -> Result<Self, GailError> {
        config.validate()?;
        let n = reference.nrows();
        let n_hold = ((n as f64) * config.holdout_fraction).round() as usize;
        if n_hold == 0 || n_hold >= n {
            return Err(GailError::ReferenceTooSmall { frames: n, window: config.window });
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
        let take = |ids: &[usize]| Array2::from_shape_fn((ids.len(), reference.ncols()), |(i, j)| reference[[ids[i], j]]);
        let holdout_set = take(&idx[..n_hold]);
        let train_set = take(&idx[n_hold..]);
        let net = Mlp::new(config.spec(), Init::Orthogonal { hidden_gain: 2f64.sqrt(), output_gain: config.init_output_gain }, rng)?;
        let optimizer = Adam::new(AdamConfig::with_lr(config.learning_rate), net.num_params());
        Ok(Self {
            config,
            net,
            optimizer,
            train_set,
            holdout_set,
            best_holdout: f64::INFINITY,
            non_improving: 0,
            frozen: false,
            updates: 0,
            schedule_calls: 0,
            fake_holdout: None,
        })
    }

    pub fn from_dataset<R: Rng + ?Sized>(config: DiscriminatorConfig, data: &ReferenceDataset, split_seed: u64, rng: &mut R) -> Result<Self, GailError> {
        let frames = data.frames();
        let flat = Array2::from_shape_fn((frames.len(), FEATURE_DIM), |(i, j)| frames[i].0[j]);
        let stacked = stack_windows(flat.view(), config.window);
        Self::new(config, stacked.view(), split_seed, rng)
    }

    /// Eval-mode `D` for each row.
    pub fn probabilities(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, NeuralError> {
        probabilities(&self.net, x)
    }

    pub fn bonus(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, NeuralError> {
        Ok(self.probabilities(x)?.into_iter().map(imitation_bonus).collect())
    }

    /// The training objective on held-out data: eval-mode smoothed BCE of
    /// the holdout reference rows and of `fake` (student features not used
    /// for the gradient step), plus `λ·penalty` on interpolants between the
    /// two. The interpolation weights are fixed so that successive
    /// evaluations differ only through the network.
    pub fn holdout_loss(&self, fake: ArrayView2<f64>) -> Result<f64, NeuralError> {
        let mean_bce = |x: ArrayView2<f64>, target: f64| -> Result<f64, NeuralError> {
            let logits = self.net.forward(x)?;
            let n = logits.nrows().max(1) as f64;
            Ok(logits.column(0).iter().map(|&z| bce_with_logits(z, target)).sum::<f64>() / n)
        };
        let real = self.holdout_set.view();
        let mut loss = mean_bce(real, self.config.label_real)?;
        if fake.nrows() > 0 {
            loss += mean_bce(fake, self.config.label_fake)?;
            if self.config.gradient_penalty_coeff > 0.0 {
                let xhat = interpolate(real, fake, &mut ChaCha8Rng::seed_from_u64(HOLDOUT_INTERPOLATION_SEED));
                loss += self.config.gradient_penalty_coeff * self.net.input_gradient_penalty(xhat.view())?.value;
            }
        }
        Ok(loss)
    }

    /// Whether an update is due: `global_step ≥ start_step`, the learner update
    /// count is a multiple of `update_every`, and the network is not frozen.
    pub fn is_due(&self, global_step: usize, learner_updates: usize) -> bool {
        !self.frozen && global_step >= self.config.start_step && learner_updates % self.config.update_every == 0
    }

    /// One gradient step on a reference batch against `fake`, followed by a
    /// holdout evaluation against `fake_holdout`.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        fake: ArrayView2<f64>,
        fake_holdout: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<DiscriminatorUpdate, GailError> {
        let b = self.config.batch_size.min(self.train_set.nrows());
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.train_set.nrows())).collect();
        let real = crate::neural::gather_rows(&self.train_set, &idx);
        let fake = fake.slice(s![..fake.nrows().min(b), ..]);
        let terms = discriminator_loss(&self.net, real.view(), fake, &self.config, rng)?;
        self.optimizer.step(self.net.params_mut(), &terms.grads)?;
        self.updates += 1;
        let holdout_loss = self.holdout_loss(fake_holdout)?;
        if holdout_loss < self.best_holdout {
            self.best_holdout = holdout_loss;
            self.non_improving = 0;
        } else {
            self.non_improving += 1;
            if self.non_improving >= self.config.patience {
                self.frozen = true;
                log::info!("discriminator frozen after {} updates", self.updates);
            }
        }
        Ok(DiscriminatorUpdate {
            train_loss: terms.loss,
            holdout_loss,
            penalty: terms.penalty,
            gradient_gap: terms.gradient_gap,
            frozen: self.frozen,
        })
    }

    /// Gate and run one update. `fake(n, rng)` draws `n` student feature
    /// rows and is only called when an update happens.
    pub fn scheduled_update<R: Rng + ?Sized>(
        &mut self,
        global_step: usize,
        learner_updates: usize,
        mut fake: impl FnMut(usize, &mut R) -> Array2<f64>,
        rng: &mut R,
    ) -> Result<Option<DiscriminatorUpdate>, GailError> {
        self.schedule_calls += 1;
        if !self.is_due(global_step, learner_updates) {
            return Ok(None);
        }
        let n = self.config.batch_size;
        let holdout = match self.fake_holdout.take() {
            Some(h) => h,
            None => fake(n, rng),
        };
        let train = fake(n, rng);
        let result = self.train_step(train.view(), holdout.view(), rng);
        self.fake_holdout = Some(holdout);
        result.map(Some)
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.networks.insert(format!("{prefix}net"), self.net.clone());
        ck.optimizers.insert(format!("{prefix}net"), self.optimizer.clone());
        ck.arrays.insert(
            format!("{prefix}state"),
            vec![
                self.best_holdout,
                self.non_improving as f64,
                if self.frozen { 1.0 } else { 0.0 },
                self.updates as f64,
                self.schedule_calls as f64,
            ],
        );
        if let Some(h) = &self.fake_holdout {
            ck.arrays.insert(format!("{prefix}fake_holdout"), h.iter().copied().collect());
        }
    }

    /// Restore network and counters; the reference split is rebuilt by the caller.
    pub fn read_checkpoint(&mut self, ck: &Checkpoint, prefix: &str) -> Result<(), GailError> {
        self.net = ck.network(&format!("{prefix}net"))?.clone();
        self.optimizer = ck.optimizer(&format!("{prefix}net"))?.clone();
        let st = ck.array(&format!("{prefix}state"))?;
        if st.len() != 5 {
            return Err(GailError::InvalidConfig("malformed discriminator state".into()));
        }
        self.best_holdout = st[0];
        self.non_improving = st[1] as usize;
        self.frozen = st[2] != 0.0;
        self.updates = st[3] as usize;
        self.schedule_calls = st[4] as usize;
        self.fake_holdout = match ck.arrays.get(&format!("{prefix}fake_holdout")) {
            Some(flat) => {
                let cols = self.config.input_dim();
                Some(Array2::from_shape_vec((flat.len() / cols, cols), flat.clone()).map_err(|_| GailError::InvalidConfig("malformed holdout snapshot".into()))?)
            }
            None => None,
        };
        Ok(())
    }
}

/// Two Gaussian clouds in 5-D whose means differ by `separation` along every
/// axis, unit variance scaled by `std`.
pub fn synthetic_pair<R: Rng + ?Sized>(n: usize, separation: f64, std: f64, rng: &mut R) -> (Array2<f64>, Array2<f64>) {
    let mut draw = |offset: f64| {
        Array2::from_shape_fn((n, FEATURE_DIM), |_| {
            let z: f64 = StandardNormal.sample(rng);
            offset + std * z
        })
    };
    let a = draw(separation / 2.0);
    let b = draw(-separation / 2.0);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn cfg_plain() -> DiscriminatorConfig {
        DiscriminatorConfig { label_real: 1.0, label_fake: 0.0, gradient_penalty_coeff: 0.0, input_noise_sigma: 0.0, dropout_prob: 0.0, ..Default::default() }
    }

    fn zero_net() -> Mlp {
        Mlp::zeros(DiscriminatorConfig::default().spec()).unwrap()
    }

    #[test]
    fn constant_half_output_gives_two_ln_two() {
        let cfg = cfg_plain();
        let x = Array2::from_elem((7, 5), 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let terms = discriminator_loss(&zero_net(), x.view(), x.view(), &cfg, &mut rng).unwrap();
        assert!((terms.loss - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn smoothed_floor_matches_binary_entropy() {
        // logit ln 9 on every input gives D = 0.9 on reals; ln(1/9) on fakes gives 0.1
        let h = |p: f64| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        let want = 2.0 * h(0.9);
        let got = bce_with_logits(9f64.ln(), 0.9) + bce_with_logits((1.0f64 / 9.0).ln(), 0.1);
        assert!((got - want).abs() < 1e-12);
        assert!((want - 0.6502).abs() < 1e-4);
    }

    #[test]
    fn bonus_values() {
        assert!((imitation_bonus(0.5) - LN_2).abs() < 1e-15);
        assert!((imitation_bonus(0.9) - 10f64.ln()).abs() < 1e-12);
        assert!(imitation_bonus(0.0) < 1e-5);
        assert!(imitation_bonus(1.0).is_finite());
        assert!((blend_reward(1.0, LN_2, 0.5) - 0.8466).abs() < 1e-4);
        assert_eq!(blend_reward(0.3, 9.0, 1.0), 0.3);
        assert_eq!(blend_reward(0.3, 9.0, 0.0), 9.0);
    }

    proptest! {
        #[test]
        fn bonus_is_nonnegative_and_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(imitation_bonus(lo) >= 0.0);
            prop_assert!(imitation_bonus(lo) <= imitation_bonus(hi));
        }

        #[test]
        fn blend_of_equal_rewards_is_identity(r in -10.0f64..10.0, eta in 0.0f64..=1.0) {
            prop_assert!((blend_reward(r, r, eta) - r).abs() < 1e-12);
        }

        #[test]
        fn interpolants_lie_between_pairs(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = synthetic_pair(8, 2.0, 1.0, &mut rng);
            let x = interpolate(a.view(), b.view(), &mut rng);
            for i in 0..8 {
                for j in 0..5 {
                    let (lo, hi) = if a[[i, j]] < b[[i, j]] { (a[[i, j]], b[[i, j]]) } else { (b[[i, j]], a[[i, j]]) };
                    prop_assert!(x[[i, j]] >= lo - 1e-12 && x[[i, j]] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_unit_gradient_has_zero_penalty() {
        let spec = MlpSpec::new(5, &[], Activation::Identity, 1);
        let mut net = Mlp::zeros(spec).unwrap();
        net.params_mut()[..5].copy_from_slice(&[0.6, 0.0, 0.8, 0.0, 0.0]);
        let cfg = DiscriminatorConfig { gradient_penalty_coeff: 10.0, ..cfg_plain() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = synthetic_pair(16, 1.0, 1.0, &mut rng);
        let terms = discriminator_loss(&net, a.view(), b.view(), &cfg, &mut rng).unwrap();
        assert!(terms.penalty < 1e-24);
        assert!((terms.loss - terms.bce).abs() < 1e-12);
    }

    #[test]
    fn empty_batches_are_rejected() {
        let x = Array2::zeros((0, 5));
        let y = Array2::zeros((3, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(discriminator_loss(&zero_net(), x.view(), y.view(), &DiscriminatorConfig::default(), &mut rng), Err(GailError::EmptyBatch("real"))));
        assert!(matches!(discriminator_loss(&zero_net(), y.view(), x.view(), &DiscriminatorConfig::default(), &mut rng), Err(GailError::EmptyBatch("fake"))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // noise and dropout off so the loss is a deterministic function of the parameters
        let cfg = DiscriminatorConfig { hidden: vec![6, 4], dropout_prob: 0.0, input_noise_sigma: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(cfg.spec(), Init::UniformFanIn, &mut rng).unwrap();
        let (a, b) = synthetic_pair(6, 1.0, 1.0, &mut rng);
        let loss_at = |net: &Mlp| discriminator_loss(net, a.view(), b.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let g = loss_at(&net).grads;
        let h = 1e-6;
        for i in 0..net.num_params() {
            let p = net.params()[i];
            net.params_mut()[i] = p + h;
            let up = loss_at(&net).loss;
            net.params_mut()[i] = p - h;
            let down = loss_at(&net).loss;
            net.params_mut()[i] = p;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn window_stacking_concatenates_consecutive_frames() {
        let f = Array2::from_shape_fn((4, 2), |(i, j)| (10 * i + j) as f64);
        let w = stack_windows(f.view(), 2);
        assert_eq!(w.shape(), &[3, 4]);
        assert_eq!(w.row(1).to_vec(), vec![10.0, 11.0, 20.0, 21.0]);
        assert_eq!(stack_windows(f.view(), 1), f);
    }

    fn small_disc(patience: usize) -> Discriminator {
        let cfg = DiscriminatorConfig { patience, batch_size: 16, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (real, _) = synthetic_pair(100, 2.0, 0.5, &mut rng);
        Discriminator::new(cfg, real.view(), 7, &mut rng).unwrap()
    }

    #[test]
    fn holdout_split_is_seeded_and_disjoint() {
        let d1 = small_disc(10);
        let d2 = small_disc(10);
        assert_eq!(d1.holdout_set, d2.holdout_set);
        assert_eq!(d1.holdout_set.nrows(), 10);
        assert_eq!(d1.train_set.nrows(), 90);
        for h in d1.holdout_set.rows() {
            assert!(d1.train_set.rows().into_iter().all(|t| t != h));
        }
    }

    #[test]
    fn holdout_loss_is_the_training_objective_on_held_out_rows() {
        let d = small_disc(10);
        let fake = Array2::from_shape_fn((12, 5), |(i, j)| 0.1 * i as f64 - 0.2 * j as f64);
        let got = d.holdout_loss(fake.view()).unwrap();
        assert_eq!(got, d.holdout_loss(fake.view()).unwrap());
        // oracle: logistic losses from probabilities, penalty from raw input gradients
        let bce = |x: ArrayView2<f64>, t: f64| {
            let p = d.probabilities(x).unwrap();
            p.iter().map(|&p| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())).sum::<f64>() / p.len() as f64
        };
        let xhat = interpolate(d.holdout_set.view(), fake.view(), &mut ChaCha8Rng::seed_from_u64(HOLDOUT_INTERPOLATION_SEED));
        let g = d.net.input_gradients(xhat.view()).unwrap();
        let penalty = g.rows().into_iter().map(|r| (r.dot(&r).sqrt() - 1.0).powi(2)).sum::<f64>() / g.nrows() as f64;
        let want = bce(d.holdout_set.view(), 0.9) + bce(fake.view(), 0.1) + 10.0 * penalty;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn schedule_gates() {
        let mut d = small_disc(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fake = |n: usize, _: &mut ChaCha8Rng| Array2::zeros((n, 5));
        assert!(d.scheduled_update(4999, 10, fake, &mut rng).unwrap().is_none());
        assert!(d.scheduled_update(6000, 7, fake, &mut rng).unwrap().is_none());
        assert!(d.scheduled_update(5000, 10, fake, &mut rng).unwrap().is_some());
        assert_eq!(d.updates, 1);
        assert_eq!(d.schedule_calls, 3);
        let snapshot = d.fake_holdout.clone().unwrap();
        let ones = |n: usize, _: &mut ChaCha8Rng| Array2::ones((n, 5));
        assert!(d.scheduled_update(5000, 15, ones, &mut rng).unwrap().is_some());
        assert_eq!(d.fake_holdout.as_ref(), Some(&snapshot));
    }

    #[test]
    fn patience_freezes_permanently() {
        let mut d = small_disc(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // an unreachable best makes every evaluation non-improving
        d.best_holdout = f64::NEG_INFINITY;
        let fake = |n: usize, _: &mut ChaCha8Rng| Array2::zeros((n, 5));
        for k in 0..3 {
            let u = d.scheduled_update(10_000, 0, fake, &mut rng).unwrap().unwrap();
            assert_eq!(u.frozen, k == 2);
        }
        let params = d.net.params().to_vec();
        for step in 0..20 {
            assert!(d.scheduled_update(10_000 + step, 0, fake, &mut rng).unwrap().is_none());
        }
        assert_eq!(d.net.params(), &params[..]);
        assert_eq!(d.updates, 3);
    }

    #[test]
    fn eval_output_is_a_probability() {
        let d = small_disc(10);
        let x = Array2::from_shape_fn((50, 5), |(i, j)| (i as f64 - 25.0) * 0.1 * (j as f64 + 1.0));
        assert!(d.probabilities(x.view()).unwrap().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn checkpoint_restores_counters() {
        let mut d = small_disc(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        d.scheduled_update(5000, 0, |n: usize, r: &mut ChaCha8Rng| Array2::from_shape_fn((n, 5), |_| rand::Rng::random::<f64>(r)), &mut rng).unwrap();
        let mut ck = Checkpoint::new("test");
        d.write_checkpoint(&mut ck, "disc_");
        let ck = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let mut e = small_disc(10);
        e.read_checkpoint(&ck, "disc_").unwrap();
        assert_eq!(e.net, d.net);
        assert_eq!((e.updates, e.best_holdout, e.frozen), (d.updates, d.best_holdout, d.frozen));
        assert_eq!(e.fake_holdout, d.fake_holdout);
    }
}
