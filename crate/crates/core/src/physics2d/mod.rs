//! Deterministic planar rigid-body dynamics.
//!
//! Bodies are integrated with semi-implicit Euler over a configurable number
//! of substeps per control step. Revolute joints, joint limits and ground
//! contacts are velocity-level constraints solved by sequential impulses with
//! Baumgarte stabilisation. Spring legs are force elements: the elastic term
//! is explicit, the viscous terms (axial damper, hip damper) are applied
//! implicitly so that light foot proxies stay stable at the default substep.

mod math;

pub use math::Vec2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("non-finite state detected on body `{body}`")]
    NonFiniteState { body: String },
    #[error("torque vector has {got} entries, world has {expected} actuators")]
    TorqueDimensionMismatch { expected: usize, got: usize },
    #[error("spring leg length {length} is below the minimum clamp {min}")]
    DegenerateLeg { length: f64, min: f64 },
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
}

/// Vertical band below the ground within which a point still counts as touching.
pub const CONTACT_TOLERANCE: f64 = 1e-4;

/// Ratio of the minimum admissible spring length to its rest length.
pub const MIN_LENGTH_RATIO: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub gravity: Vec2,
    pub dt: f64,
    pub substeps: u32,
    pub ground_height: f64,
    pub friction: f64,
    pub baumgarte: f64,
    pub velocity_iterations: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            gravity: Vec2::new(0.0, -9.81),
            dt: 1.0 / 60.0,
            substeps: 8,
            ground_height: 0.0,
            friction: 1.0,
            baumgarte: 0.2,
            velocity_iterations: 12,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(PhysicsError::InvalidConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.substeps < 1 {
            return Err(PhysicsError::InvalidConfig("substeps must be >= 1".into()));
        }
        if !(self.friction >= 0.0) {
            return Err(PhysicsError::InvalidConfig("friction must be >= 0".into()));
        }
        if !self.gravity.is_finite() || !self.ground_height.is_finite() {
            return Err(PhysicsError::InvalidConfig("gravity and ground height must be finite".into()));
        }
        Ok(())
    }

    pub fn substep_dt(&self) -> f64 {
        self.dt / self.substeps as f64
    }
}

/// Pose and velocity of one planar body.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidBodyState {
    pub position: Vec2,
    pub angle: f64,
    pub linear_velocity: Vec2,
    pub angular_velocity: f64,
    pub mass: f64,
    pub inertia: f64,
}

impl RigidBodyState {
    pub fn at_rest(position: Vec2, angle: f64, mass: f64, inertia: f64) -> Self {
        Self { position, angle, linear_velocity: Vec2::ZERO, angular_velocity: 0.0, mass, inertia }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite()
            && self.angle.is_finite()
            && self.linear_velocity.is_finite()
            && self.angular_velocity.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub name: String,
    pub state: RigidBodyState,
    pub is_static: bool,
    /// Orientation is held constant (the ROM trunk, point feet).
    pub fixed_rotation: bool,
    /// Ground-contact probe points in body coordinates.
    pub contact_points: Vec<Vec2>,
}

impl Body {
    pub fn dynamic(name: &str, mass: f64, inertia: f64, position: Vec2, angle: f64) -> Self {
        Self {
            name: name.to_string(),
            state: RigidBodyState::at_rest(position, angle, mass, inertia),
            is_static: false,
            fixed_rotation: false,
            contact_points: Vec::new(),
        }
    }

    /// Non-rotating body; the inertia is a placeholder satisfying `inertia > 0`.
    pub fn point_mass(name: &str, mass: f64, position: Vec2) -> Self {
        Self {
            name: name.to_string(),
            state: RigidBodyState::at_rest(position, 0.0, mass, mass),
            is_static: false,
            fixed_rotation: true,
            contact_points: Vec::new(),
        }
    }

    pub fn anchor(name: &str, position: Vec2) -> Self {
        Self {
            name: name.to_string(),
            state: RigidBodyState::at_rest(position, 0.0, 1.0, 1.0),
            is_static: true,
            fixed_rotation: true,
            contact_points: Vec::new(),
        }
    }

    pub fn with_contact_points(mut self, points: Vec<Vec2>) -> Self {
        self.contact_points = points;
        self
    }

    pub fn inv_mass(&self) -> f64 {
        if self.is_static {
            0.0
        } else {
            1.0 / self.state.mass
        }
    }

    pub fn inv_inertia(&self) -> f64 {
        if self.is_static || self.fixed_rotation {
            0.0
        } else {
            1.0 / self.state.inertia
        }
    }

    pub fn world_point(&self, local: Vec2) -> Vec2 {
        self.state.position + local.rotate(self.state.angle)
    }

    pub fn velocity_at(&self, world_point: Vec2) -> Vec2 {
        let r = world_point - self.state.position;
        self.state.linear_velocity + r.perp() * self.state.angular_velocity
    }
}

/// Hinge between two bodies. The joint angle is `angle_b - angle_a - reference_angle`.
#[derive(Clone, Debug, PartialEq)]
pub struct RevoluteJoint {
    pub name: String,
    pub body_a: usize,
    pub body_b: usize,
    pub local_anchor_a: Vec2,
    pub local_anchor_b: Vec2,
    pub reference_angle: f64,
    pub limits: Option<(f64, f64)>,
    pub torque_limit: f64,
    /// Viscous joint friction, N·m·s/rad.
    pub damping: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpringLegParams {
    pub rest_length: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub hip_torque_limit: f64,
    /// Viscous hip friction, N·m·s/rad.
    pub hip_damping: f64,
    /// Range of the hip angle relative to the trunk, measured from the downward vertical.
    pub hip_limits: Option<(f64, f64)>,
}

/// Massless linear spring from a hip point on `hip_body` to the point body `foot_body`.
#[derive(Clone, Debug, PartialEq)]
pub struct LegMount {
    pub name: String,
    pub hip_body: usize,
    pub hip_anchor: Vec2,
    pub foot_body: usize,
    pub params: SpringLegParams,
}

/// Kinematic snapshot of a spring leg.
///
/// `hip_angle` is measured from the trunk's downward axis; positive swings the
/// foot towards +x. `axis` is the unit vector from hip to foot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpringLeg {
    pub rest_length: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub current_length: f64,
    pub length_rate: f64,
    pub hip_angle: f64,
    pub hip_angular_velocity: f64,
    pub hip_torque_limit: f64,
    pub axis: Vec2,
}

/// Axial spring-damper force acting on the foot, `k·(rest − l) − c·l̇` along the leg axis.
pub fn spring_force(leg: &SpringLeg) -> Result<Vec2, PhysicsError> {
    let min = MIN_LENGTH_RATIO * leg.rest_length;
    if !(leg.current_length >= min) {
        return Err(PhysicsError::DegenerateLeg { length: leg.current_length, min });
    }
    let magnitude =
        leg.stiffness * (leg.rest_length - leg.current_length) - leg.damping * leg.length_rate;
    Ok(leg.axis * magnitude)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Actuator {
    Joint(usize),
    Hip(usize),
}

/// Ground contact bookkeeping for one probe point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactState {
    pub body: usize,
    pub local_point: Vec2,
    pub in_contact: bool,
    pub contact_point: Vec2,
    /// Mean normal force over the last control step, N.
    pub normal_force: f64,
    pub friction_coefficient: f64,
}

#[derive(Clone, Copy)]
struct Jac {
    body: usize,
    lin: Vec2,
    ang: f64,
}

#[derive(Clone, Copy)]
struct Row {
    a: Jac,
    b: Option<Jac>,
}

struct LegFrame {
    length: f64,
    radial: Row,
    hip: Row,
    hip_angle: f64,
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub bodies: Vec<Body>,
    pub joints: Vec<RevoluteJoint>,
    pub legs: Vec<LegMount>,
    pub actuators: Vec<Actuator>,
    contacts: Vec<ContactState>,
    time: f64,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self, PhysicsError> {
        config.validate()?;
        Ok(Self {
            config,
            bodies: Vec::new(),
            joints: Vec::new(),
            legs: Vec::new(),
            actuators: Vec::new(),
            contacts: Vec::new(),
            time: 0.0,
        })
    }

    pub fn add_body(&mut self, body: Body) -> usize {
        let index = self.bodies.len();
        for &p in &body.contact_points {
            self.contacts.push(ContactState {
                body: index,
                local_point: p,
                in_contact: false,
                contact_point: body.world_point(p),
                normal_force: 0.0,
                friction_coefficient: self.config.friction,
            });
        }
        self.bodies.push(body);
        self.refresh_contacts();
        index
    }

    pub fn add_joint(&mut self, joint: RevoluteJoint) -> usize {
        self.joints.push(joint);
        self.joints.len() - 1
    }

    pub fn add_leg(&mut self, leg: LegMount) -> usize {
        self.legs.push(leg);
        self.legs.len() - 1
    }

    pub fn add_actuator(&mut self, actuator: Actuator) -> usize {
        self.actuators.push(actuator);
        self.actuators.len() - 1
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn contacts(&self) -> &[ContactState] {
        &self.contacts
    }

    pub fn body(&self, index: usize) -> &Body {
        &self.bodies[index]
    }

    pub fn body_mut(&mut self, index: usize) -> &mut Body {
        &mut self.bodies[index]
    }

    /// Whether any contact probe of `body` is touching the ground.
    pub fn body_in_contact(&self, body: usize) -> bool {
        self.contacts.iter().any(|c| c.body == body && c.in_contact)
    }

    pub fn joint_angle(&self, joint: usize) -> f64 {
        let j = &self.joints[joint];
        self.bodies[j.body_b].state.angle - self.bodies[j.body_a].state.angle - j.reference_angle
    }

    pub fn joint_rate(&self, joint: usize) -> f64 {
        let j = &self.joints[joint];
        self.bodies[j.body_b].state.angular_velocity - self.bodies[j.body_a].state.angular_velocity
    }

    pub fn torque_limit(&self, actuator: usize) -> f64 {
        match self.actuators[actuator] {
            Actuator::Joint(j) => self.joints[j].torque_limit,
            Actuator::Hip(l) => self.legs[l].params.hip_torque_limit,
        }
    }

    /// Kinematic state of leg `index`.
    pub fn leg_state(&self, index: usize) -> SpringLeg {
        let mount = &self.legs[index];
        let hip = &self.bodies[mount.hip_body];
        let foot = &self.bodies[mount.foot_body];
        let hip_point = hip.world_point(mount.hip_anchor);
        let d = foot.state.position - hip_point;
        let length = d.norm();
        let rel_v = foot.state.linear_velocity - hip.velocity_at(hip_point);
        let axis = if length > 0.0 { d / length } else { Vec2::new(0.0, -1.0) };
        let hip_angle = d.x.atan2(-d.y) - hip.state.angle;
        let hip_rate = if length > 0.0 {
            d.cross(rel_v) / (length * length) - hip.state.angular_velocity
        } else {
            0.0
        };
        SpringLeg {
            rest_length: mount.params.rest_length,
            stiffness: mount.params.stiffness,
            damping: mount.params.damping,
            current_length: length,
            length_rate: rel_v.dot(axis),
            hip_angle,
            hip_angular_velocity: hip_rate,
            hip_torque_limit: mount.params.hip_torque_limit,
            axis,
        }
    }

    /// Mass-weighted centre of the dynamic bodies.
    pub fn center_of_mass(&self) -> (Vec2, Vec2) {
        let mut m = 0.0;
        let mut p = Vec2::ZERO;
        let mut v = Vec2::ZERO;
        for b in self.bodies.iter().filter(|b| !b.is_static) {
            m += b.state.mass;
            p += b.state.position * b.state.mass;
            v += b.state.linear_velocity * b.state.mass;
        }
        (p / m, v / m)
    }

    pub fn step(&mut self, torques: &[f64]) -> Result<(), PhysicsError> {
        if torques.len() != self.actuators.len() {
            return Err(PhysicsError::TorqueDimensionMismatch {
                expected: self.actuators.len(),
                got: torques.len(),
            });
        }
        if let Some(b) = self.bodies.iter().find(|b| !b.state.is_finite()) {
            return Err(PhysicsError::NonFiniteState { body: b.name.clone() });
        }
        let applied: Vec<f64> = torques
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let limit = self.torque_limit(i);
                if t.is_nan() {
                    t
                } else {
                    t.clamp(-limit, limit)
                }
            })
            .collect();
        let h = self.config.substep_dt();
        let mut normal_impulse = vec![0.0; self.contacts.len()];
        for _ in 0..self.config.substeps {
            self.substep(h, &applied, &mut normal_impulse)?;
        }
        self.time += self.config.dt;
        if let Some(b) = self.bodies.iter().find(|b| !b.state.is_finite()) {
            return Err(PhysicsError::NonFiniteState { body: b.name.clone() });
        }
        self.refresh_contacts();
        let dt = self.config.dt;
        for (c, impulse) in self.contacts.iter_mut().zip(normal_impulse) {
            c.normal_force = if c.in_contact { impulse / dt } else { 0.0 };
        }
        Ok(())
    }

    fn refresh_contacts(&mut self) {
        let ground = self.config.ground_height;
        for c in &mut self.contacts {
            let p = self.bodies[c.body].world_point(c.local_point);
            c.contact_point = p;
            c.in_contact = p.y - ground <= CONTACT_TOLERANCE;
            if !c.in_contact {
                c.normal_force = 0.0;
            }
        }
    }

    fn leg_frame(&self, index: usize) -> Result<LegFrame, PhysicsError> {
        let mount = &self.legs[index];
        let hip = &self.bodies[mount.hip_body];
        let foot = &self.bodies[mount.foot_body];
        let hip_point = hip.world_point(mount.hip_anchor);
        let r = hip_point - hip.state.position;
        let d = foot.state.position - hip_point;
        let length = d.norm();
        let min = MIN_LENGTH_RATIO * mount.params.rest_length;
        if !(length >= min) {
            return Err(PhysicsError::DegenerateLeg { length, min });
        }
        let axis = d / length;
        // direction of increasing hip angle
        let tangent = Vec2::new(-axis.y, axis.x);
        let radial = Row {
            a: Jac { body: mount.foot_body, lin: axis, ang: 0.0 },
            b: Some(Jac { body: mount.hip_body, lin: -axis, ang: -r.cross(axis) }),
        };
        let hip_row = Row {
            a: Jac { body: mount.foot_body, lin: tangent / length, ang: 0.0 },
            b: Some(Jac {
                body: mount.hip_body,
                lin: -tangent / length,
                ang: -r.cross(tangent) / length - 1.0,
            }),
        };
        Ok(LegFrame {
            length,
            radial,
            hip: hip_row,
            hip_angle: d.x.atan2(-d.y) - hip.state.angle,
        })
    }

    fn row_velocity(&self, row: &Row) -> f64 {
        let part = |j: &Jac| {
            let s = &self.bodies[j.body].state;
            j.lin.dot(s.linear_velocity) + j.ang * s.angular_velocity
        };
        part(&row.a) + row.b.as_ref().map_or(0.0, part)
    }

    fn row_mass(&self, row: &Row) -> f64 {
        let part = |j: &Jac| {
            let b = &self.bodies[j.body];
            b.inv_mass() * j.lin.norm_squared() + b.inv_inertia() * j.ang * j.ang
        };
        part(&row.a) + row.b.as_ref().map_or(0.0, part)
    }

    fn apply_row_impulse(&mut self, row: &Row, lambda: f64) {
        let mut apply = |j: &Jac| {
            let b = &mut self.bodies[j.body];
            let (im, ii) = (b.inv_mass(), b.inv_inertia());
            b.state.linear_velocity += j.lin * (im * lambda);
            b.state.angular_velocity += ii * j.ang * lambda;
        };
        apply(&row.a);
        if let Some(j) = &row.b {
            apply(j);
        }
    }

    fn accumulate_row_force(row: &Row, f: f64, forces: &mut [Vec2], torques: &mut [f64]) {
        forces[row.a.body] += row.a.lin * f;
        torques[row.a.body] += row.a.ang * f;
        if let Some(j) = &row.b {
            forces[j.body] += j.lin * f;
            torques[j.body] += j.ang * f;
        }
    }

    fn substep(&mut self, h: f64, torques: &[f64], normal_impulse: &mut [f64]) -> Result<(), PhysicsError> {
        let n = self.bodies.len();
        let mut forces = vec![Vec2::ZERO; n];
        let mut body_torques = vec![0.0; n];
        for (i, b) in self.bodies.iter().enumerate() {
            if !b.is_static {
                forces[i] += self.config.gravity * b.state.mass;
            }
        }

        let frames = (0..self.legs.len()).map(|i| self.leg_frame(i)).collect::<Result<Vec<_>, _>>()?;
        for (mount, frame) in self.legs.iter().zip(&frames) {
            let elastic = mount.params.stiffness * (mount.params.rest_length - frame.length);
            Self::accumulate_row_force(&frame.radial, elastic, &mut forces, &mut body_torques);
        }
        for (i, actuator) in self.actuators.iter().enumerate() {
            let tau = torques[i];
            match *actuator {
                Actuator::Joint(j) => {
                    let joint = &self.joints[j];
                    body_torques[joint.body_b] += tau;
                    body_torques[joint.body_a] -= tau;
                }
                Actuator::Hip(l) => {
                    Self::accumulate_row_force(&frames[l].hip, tau, &mut forces, &mut body_torques);
                }
            }
        }

        for (i, b) in self.bodies.iter_mut().enumerate() {
            let (im, ii) = (b.inv_mass(), b.inv_inertia());
            b.state.linear_velocity += forces[i] * (im * h);
            b.state.angular_velocity += body_torques[i] * ii * h;
        }

        self.solve_constraints(h, &frames, normal_impulse);

        for b in self.bodies.iter_mut().filter(|b| !b.is_static) {
            b.state.position += b.state.linear_velocity * h;
            if !b.fixed_rotation {
                b.state.angle += b.state.angular_velocity * h;
            } else {
                b.state.angular_velocity = 0.0;
            }
        }
        self.project_out_of_ground();
        Ok(())
    }

    fn solve_constraints(&mut self, h: f64, frames: &[LegFrame], normal_impulse: &mut [f64]) {
        let beta = self.config.baumgarte;
        let ground = self.config.ground_height;

        struct JointRow {
            a: usize,
            b: usize,
            ra: Vec2,
            rb: Vec2,
            bias: Vec2,
        }
        let joint_rows: Vec<JointRow> = self
            .joints
            .iter()
            .map(|j| {
                let (ba, bb) = (&self.bodies[j.body_a], &self.bodies[j.body_b]);
                let ra = j.local_anchor_a.rotate(ba.state.angle);
                let rb = j.local_anchor_b.rotate(bb.state.angle);
                let error = (bb.state.position + rb) - (ba.state.position + ra);
                JointRow { a: j.body_a, b: j.body_b, ra, rb, bias: error * (beta / h) }
            })
            .collect();

        // one-sided angular rows: (row, target velocity, accumulated impulse)
        let mut limit_rows: Vec<(Row, f64, f64)> = Vec::new();
        let margin = 0.1;
        for (ji, j) in self.joints.iter().enumerate() {
            if let Some((lo, hi)) = j.limits {
                let angle = self.joint_angle(ji);
                let lower = Row {
                    a: Jac { body: j.body_a, lin: Vec2::ZERO, ang: -1.0 },
                    b: Some(Jac { body: j.body_b, lin: Vec2::ZERO, ang: 1.0 }),
                };
                let upper = Row {
                    a: Jac { body: j.body_a, lin: Vec2::ZERO, ang: 1.0 },
                    b: Some(Jac { body: j.body_b, lin: Vec2::ZERO, ang: -1.0 }),
                };
                let gap_lo = angle - lo;
                if gap_lo < margin {
                    limit_rows.push((lower, separation_target(gap_lo, beta, h), 0.0));
                }
                let gap_hi = hi - angle;
                if gap_hi < margin {
                    limit_rows.push((upper, separation_target(gap_hi, beta, h), 0.0));
                }
            }
        }
        for (mount, frame) in self.legs.iter().zip(frames) {
            if let Some((lo, hi)) = mount.params.hip_limits {
                let gap_lo = frame.hip_angle - lo;
                if gap_lo < margin {
                    limit_rows.push((frame.hip, separation_target(gap_lo, beta, h), 0.0));
                }
                let gap_hi = hi - frame.hip_angle;
                if gap_hi < margin {
                    let row = negate_row(&frame.hip);
                    limit_rows.push((row, separation_target(gap_hi, beta, h), 0.0));
                }
            }
        }

        // viscous dampers as soft rows: the converged impulse is the implicit
        // damper λ = −c·h·v⁺ with v⁺ coupled to contacts and joints
        let mut damper_rows: Vec<(Row, f64, f64)> = Vec::new();
        for (mount, frame) in self.legs.iter().zip(frames) {
            if mount.params.damping > 0.0 {
                damper_rows.push((frame.radial, 1.0 / (mount.params.damping * h), 0.0));
            }
            if mount.params.hip_damping > 0.0 {
                damper_rows.push((frame.hip, 1.0 / (mount.params.hip_damping * h), 0.0));
            }
        }
        for j in self.joints.iter().filter(|j| j.damping > 0.0) {
            let row = Row {
                a: Jac { body: j.body_a, lin: Vec2::ZERO, ang: -1.0 },
                b: Some(Jac { body: j.body_b, lin: Vec2::ZERO, ang: 1.0 }),
            };
            damper_rows.push((row, 1.0 / (j.damping * h), 0.0));
        }

        struct ContactRow {
            index: usize,
            normal: Row,
            tangent: Row,
            target: f64,
            mu: f64,
            lambda_n: f64,
            lambda_t: f64,
        }
        let mut contact_rows: Vec<ContactRow> = Vec::new();
        for (ci, c) in self.contacts.iter().enumerate() {
            let body = &self.bodies[c.body];
            if body.is_static {
                continue;
            }
            let p = body.world_point(c.local_point);
            let gap = p.y - ground;
            let approach = (body.velocity_at(p).y * h).min(0.0);
            if gap + approach > 0.05 {
                continue;
            }
            let r = p - body.state.position;
            let n = Vec2::new(0.0, 1.0);
            let t = Vec2::new(1.0, 0.0);
            contact_rows.push(ContactRow {
                index: ci,
                normal: Row { a: Jac { body: c.body, lin: n, ang: r.cross(n) }, b: None },
                tangent: Row { a: Jac { body: c.body, lin: t, ang: r.cross(t) }, b: None },
                target: separation_target(gap, beta, h),
                mu: c.friction_coefficient,
                lambda_n: 0.0,
                lambda_t: 0.0,
            });
        }

        for _ in 0..self.config.velocity_iterations {
            for (row, gamma, acc) in damper_rows.iter_mut() {
                let k = self.row_mass(row);
                let v = self.row_velocity(row);
                let delta = -(v + *gamma * *acc) / (k + *gamma);
                *acc += delta;
                self.apply_row_impulse(row, delta);
            }
            for jr in &joint_rows {
                self.solve_point_joint(jr.a, jr.b, jr.ra, jr.rb, jr.bias);
            }
            for (row, target, acc) in limit_rows.iter_mut() {
                let k = self.row_mass(row);
                if k <= 0.0 {
                    continue;
                }
                let v = self.row_velocity(row);
                let delta = -(v - *target) / k;
                let new_acc = (*acc + delta).max(0.0);
                let applied = new_acc - *acc;
                *acc = new_acc;
                self.apply_row_impulse(row, applied);
            }
            for cr in contact_rows.iter_mut() {
                let kn = self.row_mass(&cr.normal);
                let vn = self.row_velocity(&cr.normal);
                let new_n = (cr.lambda_n - (vn - cr.target) / kn).max(0.0);
                let applied = new_n - cr.lambda_n;
                cr.lambda_n = new_n;
                self.apply_row_impulse(&cr.normal, applied);

                let kt = self.row_mass(&cr.tangent);
                let vt = self.row_velocity(&cr.tangent);
                let bound = cr.mu * cr.lambda_n;
                let new_t = (cr.lambda_t - vt / kt).clamp(-bound, bound);
                let applied = new_t - cr.lambda_t;
                cr.lambda_t = new_t;
                self.apply_row_impulse(&cr.tangent, applied);
            }
        }
        for cr in &contact_rows {
            normal_impulse[cr.index] += cr.lambda_n;
        }
    }

    fn solve_point_joint(&mut self, a: usize, b: usize, ra: Vec2, rb: Vec2, bias: Vec2) {
        let (ma, ia) = (self.bodies[a].inv_mass(), self.bodies[a].inv_inertia());
        let (mb, ib) = (self.bodies[b].inv_mass(), self.bodies[b].inv_inertia());
        let sa = &self.bodies[a].state;
        let sb = &self.bodies[b].state;
        let cdot = (sb.linear_velocity + rb.perp() * sb.angular_velocity)
            - (sa.linear_velocity + ra.perp() * sa.angular_velocity);
        let k11 = ma + mb + ia * ra.y * ra.y + ib * rb.y * rb.y;
        let k12 = -ia * ra.x * ra.y - ib * rb.x * rb.y;
        let k22 = ma + mb + ia * ra.x * ra.x + ib * rb.x * rb.x;
        let det = k11 * k22 - k12 * k12;
        if det.abs() < 1e-300 {
            return;
        }
        let rhs = -(cdot + bias);
        let impulse = Vec2::new((k22 * rhs.x - k12 * rhs.y) / det, (k11 * rhs.y - k12 * rhs.x) / det);
        let sa = &mut self.bodies[a].state;
        sa.linear_velocity -= impulse * ma;
        sa.angular_velocity -= ia * ra.cross(impulse);
        let sb = &mut self.bodies[b].state;
        sb.linear_velocity += impulse * mb;
        sb.angular_velocity += ib * rb.cross(impulse);
    }

    fn project_out_of_ground(&mut self) {
        let ground = self.config.ground_height;
        for b in self.bodies.iter_mut().filter(|b| !b.is_static) {
            let depth = b
                .contact_points
                .iter()
                .map(|&p| ground - b.world_point(p).y)
                .fold(0.0_f64, f64::max);
            if depth > 0.0 {
                b.state.position.y += depth;
            }
        }
    }
}

/// Velocity bound for a one-sided constraint with signed gap: speculative when
/// open, Baumgarte push-out when violated.
fn separation_target(gap: f64, beta: f64, h: f64) -> f64 {
    if gap >= 0.0 {
        -gap / h
    } else {
        -beta * gap / h
    }
}

fn negate_row(row: &Row) -> Row {
    let neg = |j: &Jac| Jac { body: j.body, lin: -j.lin, ang: -j.ang };
    Row { a: neg(&row.a), b: row.b.as_ref().map(neg) }
}

/// Kinetic + gravitational + spring potential energy, with the ground as datum.
pub fn mechanical_energy(world: &World) -> f64 {
    let g = world.config.gravity;
    let datum = Vec2::new(0.0, world.config.ground_height);
    let mut energy = 0.0;
    for b in world.bodies.iter().filter(|b| !b.is_static) {
        let s = &b.state;
        energy += 0.5 * s.mass * s.linear_velocity.norm_squared();
        if !b.fixed_rotation {
            energy += 0.5 * s.inertia * s.angular_velocity * s.angular_velocity;
        }
        energy -= s.mass * g.dot(s.position - datum);
    }
    for (i, mount) in world.legs.iter().enumerate() {
        let leg = world.leg_state(i);
        let stretch = leg.current_length - mount.params.rest_length;
        energy += 0.5 * mount.params.stiffness * stretch * stretch;
    }
    energy
}
