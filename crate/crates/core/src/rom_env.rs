//! Stage-1 environment: a point trunk on two massless spring legs with torque-driven hips.
//!
//! The trunk translates in the sagittal plane without pitching. Each foot is a
//! light point-mass proxy so that swing dynamics are well posed. Observation
//! layout (20 components):
//!
//! | idx | quantity |
//! |-----|----------|
//! | 0 | trunk height `y_COM` |
//! | 1–2 | trunk velocity `v_x, v_y` |
//! | 3–4 | spring lengths L, R |
//! | 5–6 | spring length rates L, R |
//! | 7–8 | hip angles L, R |
//! | 9–10 | hip angular velocities L, R |
//! | 11–14 | feet relative to trunk `x_L, y_L, x_R, y_R` |
//! | 15–18 | foot velocities relative to trunk |
//! | 19 | target speed |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvError, Environment, EpisodeConfig, Step};
use crate::gaitdata::GaitFeature;
use crate::physics2d::{Actuator, Body, LegMount, SpringLegParams, Vec2, World, WorldConfig};

pub const OBSERVATION_DIM: usize = 20;
pub const ACTION_DIM: usize = 2;

pub const OBSERVATION_LABELS: [&str; OBSERVATION_DIM] = [
    "y_com", "v_x", "v_y", "length_l", "length_r", "length_rate_l", "length_rate_r", "hip_l",
    "hip_r", "hip_rate_l", "hip_rate_r", "x_l", "y_l", "x_r", "y_r", "vx_l", "vy_l", "vx_r",
    "vy_r", "target_speed",
];

const TRUNK: usize = 0;
const FOOT_L: usize = 1;
const FOOT_R: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RomConfig {
    pub body_mass: f64,
    pub rest_length: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub hip_torque_limit: f64,
    pub hip_damping: f64,
    pub hip_limit: f64,
    /// Foot proxy mass as a fraction of the trunk mass.
    pub foot_mass_ratio: f64,
    /// Half the angle between the legs in the initial standing pose, rad.
    pub stance_half_angle: f64,
    /// Amplitude of the uniform reset perturbation on hip angles and trunk velocity.
    pub init_noise: f64,
    pub world: WorldConfig,
}

impl Default for RomConfig {
    fn default() -> Self {
        Self {
            body_mass: 10.0,
            rest_length: 1.0,
            stiffness: 2000.0,
            damping: 10.0,
            hip_torque_limit: 100.0,
            hip_damping: 5.0,
            hip_limit: 1.2,
            foot_mass_ratio: 1e-3,
            stance_half_angle: 0.15,
            init_noise: 0.01,
            world: WorldConfig::default(),
        }
    }
}

impl RomConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("body_mass", self.body_mass),
            ("rest_length", self.rest_length),
            ("stiffness", self.stiffness),
            ("hip_torque_limit", self.hip_torque_limit),
            ("hip_limit", self.hip_limit),
            ("foot_mass_ratio", self.foot_mass_ratio),
        ];
        for (key, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(EnvError::InvalidConfig(format!("{key} must be > 0, got {value}")));
            }
        }
        for (key, value) in [("damping", self.damping), ("hip_damping", self.hip_damping), ("init_noise", self.init_noise)] {
            if !(value >= 0.0) {
                return Err(EnvError::InvalidConfig(format!("{key} must be >= 0, got {value}")));
            }
        }
        self.world.validate()?;
        Ok(())
    }

    /// Static spring length with the trunk weight shared by both legs.
    pub fn standing_leg_length(&self) -> f64 {
        let g = -self.world.gravity.y;
        let axial = 0.5 * self.body_mass * g / self.stance_half_angle.cos();
        self.rest_length - axial / self.stiffness
    }

    /// Trunk height in the nominal standing pose; the gait-feature normaliser.
    pub fn nominal_standing_height(&self) -> f64 {
        self.standing_leg_length() * self.stance_half_angle.cos()
    }

    fn leg_params(&self) -> SpringLegParams {
        SpringLegParams {
            rest_length: self.rest_length,
            stiffness: self.stiffness,
            damping: self.damping,
            hip_torque_limit: self.hip_torque_limit,
            hip_damping: self.hip_damping,
            hip_limits: Some((-self.hip_limit, self.hip_limit)),
        }
    }
}

/// Trunk height and both feet relative to the trunk, in metres.
pub fn extract_gait_feature(world: &World) -> [f64; 5] {
    let trunk = world.body(TRUNK).state.position;
    let ground = world.config.ground_height;
    let l = world.body(FOOT_L).state.position - trunk;
    let r = world.body(FOOT_R).state.position - trunk;
    [trunk.y - ground, l.x, l.y, r.x, r.y]
}

/// Build the ROM mechanism in a standing pose with hips at the given angles.
pub fn build_world(config: &RomConfig, hip_angles: [f64; 2]) -> Result<World, EnvError> {
    config.validate()?;
    let mut world = World::new(config.world.clone())?;
    let ground = config.world.ground_height;
    let height = config.nominal_standing_height();
    let trunk = Vec2::new(0.0, ground + height);
    world.add_body(Body::point_mass("trunk", config.body_mass, trunk));
    let foot_mass = config.foot_mass_ratio * config.body_mass;
    for (name, angle) in [("foot_l", hip_angles[0]), ("foot_r", hip_angles[1])] {
        // keep the foot on the ground; the spring absorbs the length change
        let length = height / angle.cos();
        let foot = trunk + Vec2::new(length * angle.sin(), -height);
        let foot = Vec2::new(foot.x, ground);
        world.add_body(Body::point_mass(name, foot_mass, foot).with_contact_points(vec![Vec2::ZERO]));
    }
    for (name, foot) in [("leg_l", FOOT_L), ("leg_r", FOOT_R)] {
        let leg = world.add_leg(LegMount {
            name: name.into(),
            hip_body: TRUNK,
            hip_anchor: Vec2::ZERO,
            foot_body: foot,
            params: config.leg_params(),
        });
        world.add_actuator(Actuator::Hip(leg));
    }
    Ok(world)
}

pub fn observe(world: &World, target_speed: f64) -> Vec<f64> {
    let trunk = world.body(TRUNK).state;
    let ground = world.config.ground_height;
    let left = world.leg_state(0);
    let right = world.leg_state(1);
    let rel = |foot: usize| {
        let s = world.body(foot).state;
        (s.position - trunk.position, s.linear_velocity - trunk.linear_velocity)
    };
    let (pl, vl) = rel(FOOT_L);
    let (pr, vr) = rel(FOOT_R);
    vec![
        trunk.position.y - ground,
        trunk.linear_velocity.x,
        trunk.linear_velocity.y,
        left.current_length,
        right.current_length,
        left.length_rate,
        right.length_rate,
        left.hip_angle,
        right.hip_angle,
        left.hip_angular_velocity,
        right.hip_angular_velocity,
        pl.x,
        pl.y,
        pr.x,
        pr.y,
        vl.x,
        vl.y,
        vr.x,
        vr.y,
        target_speed,
    ]
}

#[derive(Clone, Debug)]
pub struct RomEnv {
    config: RomConfig,
    episode: EpisodeConfig,
    world: World,
    steps: usize,
    done: bool,
}

impl RomEnv {
    pub fn new(config: RomConfig, episode: EpisodeConfig) -> Result<Self, EnvError> {
        episode.validate()?;
        let half = config.stance_half_angle;
        let world = build_world(&config, [half, -half])?;
        Ok(Self { config, episode, world, steps: 0, done: false })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn config(&self) -> &RomConfig {
        &self.config
    }

    pub fn standing_height(&self) -> f64 {
        self.config.nominal_standing_height()
    }

    pub fn forward_velocity(&self) -> f64 {
        self.world.body(TRUNK).state.linear_velocity.x
    }

    pub fn body_height(&self) -> f64 {
        self.world.body(TRUNK).state.position.y - self.world.config.ground_height
    }

    pub fn trunk_x(&self) -> f64 {
        self.world.body(TRUNK).state.position.x
    }
}

impl Environment for RomEnv {
    fn observation_dim(&self) -> usize {
        OBSERVATION_DIM
    }

    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = self.config.init_noise;
        let mut jitter = || if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
        let half = self.config.stance_half_angle;
        let hips = [half + jitter(), -half + jitter()];
        let vx = jitter();
        let vy = jitter();
        // config was validated in `new`
        let mut world = build_world(&self.config, hips).expect("validated ROM config");
        world.body_mut(TRUNK).state.linear_velocity = Vec2::new(vx, vy);
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
        let limit = self.config.hip_torque_limit;
        let torques: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0) * limit).collect();
        self.world.step(&torques)?;
        self.steps += 1;
        let v = self.forward_velocity();
        let reward = env::reward(self.episode.reward_mode, v, self.episode.target_speed, self.episode.alpha);
        let fell = self.body_height() < self.episode.fall_height;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::RewardMode;
    use crate::physics2d::mechanical_energy;

    fn episode_alpha() -> f64 {
        EpisodeConfig::rom().alpha
    }

    fn env() -> RomEnv {
        RomEnv::new(RomConfig::default(), EpisodeConfig::rom()).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = env();
        let mut b = env();
        assert_eq!(a.reset(7), b.reset(7));
    }

    #[test]
    fn reset_perturbs_only_joint_states() {
        let mut e = env();
        let a = e.reset(1);
        let b = e.reset(2);
        assert_eq!(a.len(), OBSERVATION_DIM);
        // trunk height, target speed and the feet heights are fixed by construction
        for idx in [0, 12, 14, 19] {
            assert_eq!(a[idx], b[idx], "component {}", OBSERVATION_LABELS[idx]);
        }
        for idx in [1, 2, 7, 8] {
            assert_ne!(a[idx], b[idx], "component {}", OBSERVATION_LABELS[idx]);
        }
    }

    #[test]
    fn observation_matches_forward_kinematics() {
        let mut e = env();
        for seed in 0..5 {
            let mut obs = e.reset(seed);
            for _ in 0..30 {
                for (side, (len, hip, x, y)) in [(3, 7, 11, 12), (4, 8, 13, 14)].into_iter().enumerate() {
                    let fx = obs[len] * obs[hip].sin();
                    let fy = -obs[len] * obs[hip].cos();
                    assert!((fx - obs[x]).abs() < 1e-9, "side {side}");
                    assert!((fy - obs[y]).abs() < 1e-9, "side {side}");
                }
                let step = e.step(&[0.3, -0.2]).unwrap();
                obs = step.observation;
                if step.done {
                    break;
                }
            }
        }
    }

    #[test]
    fn exponential_reward_is_one_at_target() {
        let episode = EpisodeConfig { reward_mode: RewardMode::Exponential, target_speed: 0.0, ..EpisodeConfig::rom() };
        let cfg = RomConfig { init_noise: 0.0, ..RomConfig::default() };
        let mut e = RomEnv::new(cfg, episode).unwrap();
        e.reset(0);
        let step = e.step(&[0.0, 0.0]).unwrap();
        // symmetric stance: horizontal motion only from solver round-off
        assert!(step.forward_velocity.abs() < 1e-6);
        assert_eq!(step.reward, env::exponential_reward(step.forward_velocity, 0.0, episode_alpha()));
        assert!(step.reward > 1.0 - 1e-5);
    }

    #[test]
    fn raw_mode_reward_is_forward_velocity() {
        let mut e = env();
        e.reset(3);
        let step = e.step(&[0.5, 0.5]).unwrap();
        assert_eq!(step.reward, step.forward_velocity);
    }

    #[test]
    fn episode_respects_max_steps_and_rejects_extra_steps() {
        let episode = EpisodeConfig { max_steps: 5, ..EpisodeConfig::rom() };
        let mut e = RomEnv::new(RomConfig::default(), episode).unwrap();
        e.reset(0);
        for i in 0..5 {
            let s = e.step(&[0.0, 0.0]).unwrap();
            assert_eq!(s.done, i == 4);
        }
        assert_eq!(e.step(&[0.0, 0.0]).unwrap_err(), EnvError::SteppedAfterDone);
    }

    #[test]
    fn symmetric_vertical_stance_feature() {
        let cfg = RomConfig { stance_half_angle: 0.0, init_noise: 0.0, ..RomConfig::default() };
        let world = build_world(&cfg, [0.0, 0.0]).unwrap();
        let f = extract_gait_feature(&world);
        let d = cfg.nominal_standing_height();
        assert_eq!(f, [d, 0.0, -d, 0.0, -d]);
    }

    #[test]
    fn feature_sign_convention() {
        let cfg = RomConfig::default();
        let mut world = build_world(&cfg, [0.0, 0.0]).unwrap();
        let trunk = world.body(TRUNK).state.position;
        world.body_mut(FOOT_L).state.position.x = trunk.x + 0.3;
        let f = extract_gait_feature(&world);
        assert!((f[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn standing_pose_is_quasi_static() {
        let cfg = RomConfig { init_noise: 0.0, ..RomConfig::default() };
        let mut e = RomEnv::new(cfg, EpisodeConfig::rom()).unwrap();
        e.reset(0);
        let h0 = e.body_height();
        for _ in 0..120 {
            e.step(&[0.0, 0.0]).unwrap();
        }
        assert!((e.body_height() - h0).abs() < 1e-3, "{} vs {}", e.body_height(), h0);
        assert!(e.world().body_in_contact(FOOT_L) && e.world().body_in_contact(FOOT_R));
    }

    #[test]
    fn flight_phase_conserves_energy() {
        let cfg = RomConfig {
            damping: 0.0,
            hip_damping: 0.0,
            world: WorldConfig { dt: 1e-3, substeps: 1, ..WorldConfig::default() },
            ..RomConfig::default()
        };
        let mut world = build_world(&cfg, [0.2, -0.1]).unwrap();
        for b in world.bodies.iter_mut() {
            b.state.position.y += 20.0;
            b.state.linear_velocity = Vec2::new(1.0, 2.0);
        }
        // excite the leg modes
        world.bodies[FOOT_L].state.linear_velocity += Vec2::new(0.3, -0.2);
        world.bodies[FOOT_R].state.linear_velocity += Vec2::new(-0.2, 0.1);
        let e0 = mechanical_energy(&world);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            world.step(&[0.0, 0.0]).unwrap();
            worst = worst.max(((mechanical_energy(&world) - e0) / e0).abs());
        }
        assert!(world.contacts().iter().all(|c| !c.in_contact));
        assert!(worst < 0.01, "relative drift {worst}");
    }
}
