//! Stage-2 student environment: a planar seven-link biped.
//!
//! Links: torso, and per side thigh, shin and foot. Six actuated hinges (hip,
//! knee, ankle per side). The gait feature uses the pelvis (the hip joint
//! location) as the reference point, the same role the trunk plays in the
//! ROM, and is normalised by the standing pelvis height.
//!
//! Observation layout (24 components): pelvis height, torso pitch, pelvis
//! velocity (2), torso angular velocity, joint angles (hip, knee, ankle for L
//! then R), joint rates (same order), foot contact flags L/R, ankles relative
//! to the pelvis `x_L, y_L, x_R, y_R`, target speed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvError, Environment, EpisodeConfig, Step};
use crate::gaitdata::GaitFeature;
use crate::physics2d::{Actuator, Body, RevoluteJoint, Vec2, World, WorldConfig};

pub const OBSERVATION_DIM: usize = 24;
pub const ACTION_DIM: usize = 6;

pub const JOINT_NAMES: [&str; ACTION_DIM] = ["hip_l", "knee_l", "ankle_l", "hip_r", "knee_r", "ankle_r"];

const TORSO: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub mass: f64,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BipedConfig {
    pub torso: Link,
    pub thigh: Link,
    pub shin: Link,
    pub foot: Link,
    /// Height of the ankle hinge above the sole, m.
    pub ankle_height: f64,
    /// Distance from the heel to the ankle hinge along the sole, m.
    pub heel_offset: f64,
    pub hip_torque: f64,
    pub knee_torque: f64,
    pub ankle_torque: f64,
    pub joint_damping: f64,
    pub hip_limits: (f64, f64),
    pub knee_limits: (f64, f64),
    pub ankle_limits: (f64, f64),
    /// Amplitude of the uniform reset perturbation on joint rates, rad/s.
    pub init_noise: f64,
    pub world: WorldConfig,
}

impl Default for BipedConfig {
    fn default() -> Self {
        Self {
            torso: Link { mass: 10.0, length: 0.6 },
            thigh: Link { mass: 4.0, length: 0.45 },
            shin: Link { mass: 3.0, length: 0.5 },
            foot: Link { mass: 1.0, length: 0.2 },
            ankle_height: 0.06,
            heel_offset: 0.05,
            hip_torque: 150.0,
            knee_torque: 150.0,
            ankle_torque: 60.0,
            joint_damping: 1.0,
            hip_limits: (-0.8, 1.6),
            knee_limits: (-2.4, 0.0),
            ankle_limits: (-0.7, 0.7),
            init_noise: 0.01,
            world: WorldConfig::default(),
        }
    }
}

impl BipedConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        for (key, link) in [("torso", &self.torso), ("thigh", &self.thigh), ("shin", &self.shin), ("foot", &self.foot)] {
            if !(link.mass > 0.0 && link.length > 0.0) {
                return Err(EnvError::InvalidConfig(format!("{key} mass and length must be > 0")));
            }
        }
        for (key, t) in [("hip_torque", self.hip_torque), ("knee_torque", self.knee_torque), ("ankle_torque", self.ankle_torque)] {
            if !(t > 0.0) {
                return Err(EnvError::InvalidConfig(format!("{key} must be > 0, got {t}")));
            }
        }
        if !(self.heel_offset >= 0.0 && self.heel_offset <= self.foot.length) {
            return Err(EnvError::InvalidConfig("heel_offset must lie within the foot".into()));
        }
        self.world.validate()?;
        Ok(())
    }

    /// Pelvis height in the upright standing pose; the gait-feature normaliser.
    pub fn nominal_standing_height(&self) -> f64 {
        self.ankle_height + self.shin.length + self.thigh.length
    }

    fn torques(&self) -> [f64; ACTION_DIM] {
        [self.hip_torque, self.knee_torque, self.ankle_torque, self.hip_torque, self.knee_torque, self.ankle_torque]
    }
}

fn rod_inertia(link: &Link, width: f64) -> f64 {
    link.mass * (link.length * link.length + width * width) / 12.0
}

/// Body indices of one leg.
#[derive(Clone, Copy, Debug)]
struct LegBodies {
    thigh: usize,
    shin: usize,
    foot: usize,
}

/// Build the biped upright with the soles flat on the ground and the pelvis above the origin.
pub fn build_world(config: &BipedConfig) -> Result<World, EnvError> {
    config.validate()?;
    let mut world = World::new(config.world.clone())?;
    let ground = config.world.ground_height;
    let pelvis = Vec2::new(0.0, ground + config.nominal_standing_height());
    let half_torso = 0.5 * config.torso.length;
    world.add_body(Body::dynamic(
        "torso",
        config.torso.mass,
        rod_inertia(&config.torso, 0.2),
        pelvis + Vec2::new(0.0, half_torso),
        0.0,
    ));
    let foot_half = 0.5 * config.foot.length;
    let half_height = 0.5 * config.ankle_height;
    // foot frame origin at the sole midpoint raised by half the ankle height
    let ankle_local = Vec2::new(config.heel_offset - foot_half, half_height);
    let sole = vec![Vec2::new(-foot_half, -half_height), Vec2::new(foot_half, -half_height)];
    let mut legs = Vec::new();
    for side in ["l", "r"] {
        let hip = pelvis;
        let thigh = world.add_body(Body::dynamic(
            &format!("thigh_{side}"),
            config.thigh.mass,
            rod_inertia(&config.thigh, 0.1),
            hip - Vec2::new(0.0, 0.5 * config.thigh.length),
            0.0,
        ));
        let knee = hip - Vec2::new(0.0, config.thigh.length);
        let shin = world.add_body(Body::dynamic(
            &format!("shin_{side}"),
            config.shin.mass,
            rod_inertia(&config.shin, 0.08),
            knee - Vec2::new(0.0, 0.5 * config.shin.length),
            0.0,
        ));
        let ankle = knee - Vec2::new(0.0, config.shin.length);
        let foot = world.add_body(
            Body::dynamic(
                &format!("foot_{side}"),
                config.foot.mass,
                rod_inertia(&config.foot, config.ankle_height),
                ankle - ankle_local,
                0.0,
            )
            .with_contact_points(sole.clone()),
        );
        legs.push(LegBodies { thigh, shin, foot });
    }
    for (side, leg) in ["l", "r"].iter().zip(&legs) {
        let hinge = |name: &str, a: usize, b: usize, la: Vec2, lb: Vec2, limits: (f64, f64), torque: f64| RevoluteJoint {
            name: format!("{name}_{side}"),
            body_a: a,
            body_b: b,
            local_anchor_a: la,
            local_anchor_b: lb,
            reference_angle: 0.0,
            limits: Some(limits),
            torque_limit: torque,
            damping: config.joint_damping,
        };
        let ht = 0.5 * config.thigh.length;
        let hs = 0.5 * config.shin.length;
        let joints = [
            hinge("hip", TORSO, leg.thigh, Vec2::new(0.0, -half_torso), Vec2::new(0.0, ht), config.hip_limits, config.hip_torque),
            hinge("knee", leg.thigh, leg.shin, Vec2::new(0.0, -ht), Vec2::new(0.0, hs), config.knee_limits, config.knee_torque),
            hinge("ankle", leg.shin, leg.foot, Vec2::new(0.0, -hs), ankle_local, config.ankle_limits, config.ankle_torque),
        ];
        for j in joints {
            let idx = world.add_joint(j);
            world.add_actuator(Actuator::Joint(idx));
        }
    }
    Ok(world)
}

fn pelvis(world: &World) -> (Vec2, Vec2) {
    let torso = world.body(TORSO);
    let anchor = world.joints[0].local_anchor_a;
    let p = torso.world_point(anchor);
    (p, torso.velocity_at(p))
}

fn ankle(world: &World, side: usize) -> Vec2 {
    // ankle hinge is the third joint of each leg
    let j = &world.joints[3 * side + 2];
    world.body(j.body_b).world_point(j.local_anchor_b)
}

/// Pelvis height and both ankles relative to the pelvis, in metres.
pub fn extract_gait_feature(world: &World) -> [f64; 5] {
    let (p, _) = pelvis(world);
    let l = ankle(world, 0) - p;
    let r = ankle(world, 1) - p;
    [p.y - world.config.ground_height, l.x, l.y, r.x, r.y]
}

pub fn observe(world: &World, target_speed: f64) -> Vec<f64> {
    let (p, v) = pelvis(world);
    let torso = world.body(TORSO).state;
    let mut obs = Vec::with_capacity(OBSERVATION_DIM);
    obs.push(p.y - world.config.ground_height);
    obs.push(torso.angle);
    obs.push(v.x);
    obs.push(v.y);
    obs.push(torso.angular_velocity);
    obs.extend((0..ACTION_DIM).map(|j| world.joint_angle(j)));
    obs.extend((0..ACTION_DIM).map(|j| world.joint_rate(j)));
    for side in 0..2 {
        let foot = world.joints[3 * side + 2].body_b;
        obs.push(if world.body_in_contact(foot) { 1.0 } else { 0.0 });
    }
    for side in 0..2 {
        let a = ankle(world, side) - p;
        obs.push(a.x);
        obs.push(a.y);
    }
    obs.push(target_speed);
    obs
}

#[derive(Clone, Debug)]
pub struct BipedEnv {
    config: BipedConfig,
    episode: EpisodeConfig,
    world: World,
    steps: usize,
    done: bool,
}

impl BipedEnv {
    pub fn new(config: BipedConfig, episode: EpisodeConfig) -> Result<Self, EnvError> {
        episode.validate()?;
        let world = build_world(&config)?;
        Ok(Self { config, episode, world, steps: 0, done: false })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn config(&self) -> &BipedConfig {
        &self.config
    }

    pub fn standing_height(&self) -> f64 {
        self.config.nominal_standing_height()
    }

    pub fn root_height(&self) -> f64 {
        pelvis(&self.world).0.y - self.world.config.ground_height
    }

    pub fn torso_height(&self) -> f64 {
        self.world.body(TORSO).state.position.y - self.world.config.ground_height
    }

    /// Horizontal velocity of the whole-body centre of mass.
    pub fn forward_velocity(&self) -> f64 {
        self.world.center_of_mass().1.x
    }

    pub fn feet_in_contact(&self) -> [bool; 2] {
        let foot = |side: usize| self.world.joints[3 * side + 2].body_b;
        [self.world.body_in_contact(foot(0)), self.world.body_in_contact(foot(1))]
    }
}

impl Environment for BipedEnv {
    fn observation_dim(&self) -> usize {
        OBSERVATION_DIM
    }

    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut world = build_world(&self.config).expect("validated biped config");
        let noise = self.config.init_noise;
        if noise > 0.0 {
            // perturb joint rates by spinning each child link; the pose stays exactly upright
            let children: Vec<usize> = world.joints.iter().map(|j| j.body_b).collect();
            for child in children {
                let w: f64 = rng.random_range(-noise..=noise);
                world.body_mut(child).state.angular_velocity += w;
            }
        }
        self.world = world;
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        if self.done {
            return Err(EnvError::SteppedAfterDone);
        }
        env::check_action(action, ACTION_DIM)?;
        let scale = self.config.torques();
        let torques: Vec<f64> = action.iter().zip(scale).map(|(a, s)| a.clamp(-1.0, 1.0) * s).collect();
        self.world.step(&torques)?;
        self.steps += 1;
        let v = self.forward_velocity();
        let reward = env::reward(self.episode.reward_mode, v, self.episode.target_speed, self.episode.alpha);
        let fell = self.torso_height() < self.episode.fall_height;
        let done = fell || self.steps >= self.episode.max_steps;
        self.done = done;
        Ok(Step { observation: self.observation(), reward, done, terminal: fell, forward_velocity: v })
    }

    fn observation(&self) -> Vec<f64> {
        observe(&self.world, self.episode.target_speed)
    }

    fn gait_feature(&self) -> GaitFeature {
        GaitFeature::from_physical(extract_gait_feature(&self.world), self.standing_height())
    }

    fn episode_config(&self) -> &EpisodeConfig {
        &self.episode
    }

    fn elapsed_steps(&self) -> usize {
        self.steps
    }

    fn is_done(&self) -> bool {
        self.done
    }
}
