//! Shared episodic-environment interface for the teacher (ROM) and student (biped) mechanisms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaitdata::GaitFeature;
use crate::physics2d::PhysicsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("environment stepped after the episode terminated; call reset first")]
    SteppedAfterDone,
    #[error("action has {got} components, expected {expected}")]
    ActionDimension { expected: usize, got: usize },
    #[error("action contains a non-finite component")]
    NonFiniteAction,
    #[error("invalid episode configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// `exp(−α·|v_COM − v_target|)`, bounded in (0, 1].
    Exponential,
    /// Forward component of the centre-of-mass velocity.
    RawForwardVelocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub target_speed: f64,
    pub alpha: f64,
    pub max_steps: usize,
    pub reward_mode: RewardMode,
    /// Episode terminates when the tracked height drops below this value, m.
    pub fall_height: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self::rom()
    }
}

impl EpisodeConfig {
    pub fn rom() -> Self {
        Self {
            target_speed: 1.0,
            alpha: 2.0,
            max_steps: 1000,
            reward_mode: RewardMode::RawForwardVelocity,
            fall_height: 0.4,
        }
    }

    pub fn biped() -> Self {
        Self {
            target_speed: 1.0,
            alpha: 2.0,
            max_steps: 1000,
            reward_mode: RewardMode::Exponential,
            fall_height: 0.8,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(EnvError::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.max_steps < 1 {
            return Err(EnvError::InvalidConfig("max_steps must be >= 1".into()));
        }
        if !self.target_speed.is_finite() || !self.fall_height.is_finite() {
            return Err(EnvError::InvalidConfig("target_speed and fall_height must be finite".into()));
        }
        Ok(())
    }
}

/// Velocity-tracking reward `exp(−α·|v − v_target|)`.
pub fn exponential_reward(velocity: f64, target: f64, alpha: f64) -> f64 {
    (-alpha * (velocity - target).abs()).exp()
}

pub fn reward(mode: RewardMode, velocity: f64, target: f64, alpha: f64) -> f64 {
    match mode {
        RewardMode::Exponential => exponential_reward(velocity, target, alpha),
        RewardMode::RawForwardVelocity => velocity,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Episode is over (fall or step budget).
    pub done: bool,
    /// Episode ended by a fall; no bootstrapping past this transition.
    pub terminal: bool,
    pub forward_velocity: f64,
}

/// Episodic control task with a continuous action box `[−1, 1]^n`.
pub trait Environment: Send {
    fn observation_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError>;
    fn observation(&self) -> Vec<f64>;
    /// Height-normalised gait feature of the current state.
    fn gait_feature(&self) -> GaitFeature;
    fn episode_config(&self) -> &EpisodeConfig;
    fn elapsed_steps(&self) -> usize;
    fn is_done(&self) -> bool;
}

pub(crate) fn check_action(action: &[f64], expected: usize) -> Result<(), EnvError> {
    if action.len() != expected {
        return Err(EnvError::ActionDimension { expected, got: action.len() });
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(EnvError::NonFiniteAction);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_reward_values() {
        assert_eq!(exponential_reward(1.3, 1.3, 2.0), 1.0);
        let r = exponential_reward(1.0 + std::f64::consts::LN_2, 1.0, 1.0);
        assert!((r - 0.5).abs() < 1e-15);
        assert_eq!(reward(RewardMode::RawForwardVelocity, 1.3, 0.0, 1.0), 1.3);
    }

    #[test]
    fn invalid_alpha_is_rejected() {
        let cfg = EpisodeConfig { alpha: 0.0, ..EpisodeConfig::rom() };
        assert!(cfg.validate().is_err());
        let cfg = EpisodeConfig { max_steps: 0, ..EpisodeConfig::rom() };
        assert!(cfg.validate().is_err());
    }
}
