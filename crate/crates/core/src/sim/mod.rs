//! Rigid-link physics of a passive soft finger mounted on a position-controlled
//! cylindrical arm.
//!
//! The finger is a chain of point-mass links joined by torsional springs with
//! alternating flexion/extension and adduction/abduction axes. The arm is
//! kinematic and exactly follows its setpoint. Contact against the ground and
//! planar boxes uses penalty springs (see [`contact`]).
//!
//! Integration is semi-implicit Euler at a fixed 1 ms step. The joint springs
//! and dampers are taken implicitly in the velocity update, which keeps the
//! light distal links stable with the default damping.

mod contact;
pub mod kinematics;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::config::SimConfig;
pub use kinematics::{forward_kinematics, ArmFrames, ArmGeometry, Kinematics, LinkFrame, Vec3};

/// Physics step length in seconds.
pub const PHYSICS_DT: f64 = 1e-3;

/// Rotary base joint range (radians).
pub const Q1_RANGE: (f64, f64) = (3.0 * PI / 4.0, 5.0 * PI / 4.0);
/// Vertical prismatic joint range (meters).
pub const Q2_RANGE: (f64, f64) = (-1.0, 0.0);
/// Sliding prismatic joint range (meters).
pub const Q3_RANGE: (f64, f64) = (0.0, 1.5);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("simulation became unstable at t = {time:.3} s: {detail}")]
    Instability { time: f64, detail: String },
    #[error("arm setpoint outside the workspace: {0:?}")]
    OutOfWorkspace(Command),
    #[error("time step must be positive and finite, got {0}")]
    InvalidTimestep(f64),
}

/// Joint axis family of a finger joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    FlexionExtension,
    AdductionAbduction,
}

impl AxisKind {
    /// Alternating pattern starting with flexion/extension at the base.
    pub fn alternating(n: usize) -> Vec<AxisKind> {
        (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    AxisKind::FlexionExtension
                } else {
                    AxisKind::AdductionAbduction
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerConfig {
    pub n_joints: usize,
    pub link_length: f64,
    pub link_mass: f64,
    pub spring_k: f64,
    pub joint_damping: f64,
    /// Contact sphere radius at each link center.
    pub radius: f64,
    /// Mount rotation about the arm's tangential axis (0 = hanging down).
    pub mount_tilt: f64,
    pub axis_pattern: Vec<AxisKind>,
}

impl FingerConfig {
    /// Indices of the flexion/extension joints.
    pub fn fe_joints(&self) -> Vec<usize> {
        self.joints_of(AxisKind::FlexionExtension)
    }

    /// Indices of the adduction/abduction joints.
    pub fn aa_joints(&self) -> Vec<usize> {
        self.joints_of(AxisKind::AdductionAbduction)
    }

    fn joints_of(&self, kind: AxisKind) -> Vec<usize> {
        self.axis_pattern
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == kind)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactParams {
    pub penalty_stiffness: f64,
    pub penalty_damping: f64,
    pub friction_mu: f64,
}

/// Arm joint values: rotary base `q1` (rad), vertical slide `q2` (m),
/// radial slide `q3` (m). Also used for joint rates and accelerations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ArmState {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl ArmState {
    pub fn to_array(self) -> [f64; 3] {
        [self.q1, self.q2, self.q3]
    }
}

/// Target arm joint values. Commands double as the action `a_t` of the
/// perception model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Command {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl Command {
    /// Rest configuration of the arm at the start of every episode.
    pub const REST: Command = Command {
        q1: PI,
        q2: -0.5,
        q3: 0.75,
    };

    pub fn new(q1: f64, q2: f64, q3: f64) -> Self {
        Command { q1, q2, q3 }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Command::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.q1, self.q2, self.q3]
    }

    pub fn is_within_workspace(&self) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v >= lo && v <= hi;
        inside(self.q1, Q1_RANGE) && inside(self.q2, Q2_RANGE) && inside(self.q3, Q3_RANGE)
    }

    /// Affine map of each joint range onto [-1, 1].
    pub fn normalized(&self) -> [f64; 3] {
        let n = |v: f64, (lo, hi): (f64, f64)| 2.0 * (v - lo) / (hi - lo) - 1.0;
        [n(self.q1, Q1_RANGE), n(self.q2, Q2_RANGE), n(self.q3, Q3_RANGE)]
    }

    pub fn as_arm(&self) -> ArmState {
        ArmState {
            q1: self.q1,
            q2: self.q2,
            q3: self.q3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerState {
    pub angles: Vec<f64>,
    pub angular_velocities: Vec<f64>,
}

impl FingerState {
    pub fn at_rest(n: usize) -> Self {
        FingerState {
            angles: vec![0.0; n],
            angular_velocities: vec![0.0; n],
        }
    }
}

/// A box resting on the ground, moving in the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBody {
    pub half_extents: [f64; 3],
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub wz: f64,
    pub mass: f64,
}

impl BoxBody {
    pub fn new(half_extents: [f64; 3], x: f64, y: f64, yaw: f64, mass: f64) -> Self {
        BoxBody {
            half_extents,
            x,
            y,
            yaw,
            vx: 0.0,
            vy: 0.0,
            wz: 0.0,
            mass,
        }
    }

    fn yaw_inertia(&self) -> f64 {
        let [hx, hy, _] = self.half_extents;
        self.mass * (4.0 * hx * hx + 4.0 * hy * hy) / 12.0
    }
}

/// Planar force and yaw torque applied to a box by the finger.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxWrench {
    pub fx: f64,
    pub fy: f64,
    /// Vertical force on the box (negative pushes it into the ground).
    pub fz: f64,
    pub torque: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactForces {
    /// Total normal force magnitude on each finger link.
    pub per_link_normal: Vec<f64>,
    pub box_wrenches: Vec<BoxWrench>,
}

/// Full simulation state.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub arm: ArmState,
    pub arm_velocity: ArmState,
    pub finger: FingerState,
    pub boxes: Vec<BoxBody>,
    /// Gravity magnitude, directed along -z.
    pub gravity: f64,
    pub time: f64,
    pub finger_cfg: FingerConfig,
    pub contact: ContactParams,
    pub geometry: ArmGeometry,
    pub box_ground_mu: f64,
}

impl World {
    /// Arm at rest, straight finger, no boxes.
    pub fn new(cfg: &SimConfig) -> Self {
        let finger_cfg = cfg.finger_config();
        World {
            arm: Command::REST.as_arm(),
            arm_velocity: ArmState::default(),
            finger: FingerState::at_rest(finger_cfg.n_joints),
            boxes: Vec::new(),
            gravity: cfg.world.gravity,
            time: 0.0,
            finger_cfg,
            contact: cfg.contact_params(),
            geometry: ArmGeometry {
                column_height: cfg.world.column_height,
                arm_offset: cfg.world.arm_offset,
            },
            box_ground_mu: cfg.boxes.ground_mu,
        }
    }

    /// Places `cfg.boxes.count` boxes uniformly in the annulus below the
    /// arm's workspace.
    /// Places `cfg.boxes.count` boxes uniformly over the spawn annulus inside
    /// the q1 sector. Placements overlapping another box or the resting finger
    /// are redrawn.
    pub fn spawn_boxes<R: Rng>(&mut self, cfg: &SimConfig, rng: &mut R) {
        let b = &cfg.boxes;
        let rest = self.kinematics().arm.tip;
        let keep_out = self.finger_cfg.radius + 0.05;
        for _ in 0..b.count {
            for attempt in 0.. {
                let side = |rng: &mut R| 0.5 * rng.random_range(b.side_min..=b.side_max);
                let half = [side(rng), side(rng), side(rng)];
                // uniform over the annulus area
                let r2 = rng.random_range(
                    b.spawn_radius_min * b.spawn_radius_min..=b.spawn_radius_max * b.spawn_radius_max,
                );
                let r = r2.sqrt();
                let theta = rng.random_range(Q1_RANGE.0..=Q1_RANGE.1);
                let yaw = rng.random_range(-PI..PI);
                let candidate = BoxBody::new(half, r * theta.cos(), r * theta.sin(), yaw, b.mass);
                let reach = half[0].hypot(half[1]);
                let clear_of_finger =
                    (candidate.x - rest.x).hypot(candidate.y - rest.y) > reach + keep_out;
                let clear_of_boxes = self.boxes.iter().all(|o| {
                    (candidate.x - o.x).hypot(candidate.y - o.y)
                        > reach + o.half_extents[0].hypot(o.half_extents[1])
                });
                // give up on separation rather than loop forever in a crowded annulus
                if (clear_of_finger && clear_of_boxes) || attempt == 1000 {
                    self.boxes.push(candidate);
                    break;
                }
            }
        }
    }

    pub fn kinematics(&self) -> Kinematics {
        forward_kinematics(&self.arm, &self.finger.angles, &self.finger_cfg, &self.geometry)
    }

    fn chain(&self, arm_accel: &ArmState) -> kinematics::ChainState {
        kinematics::chain_state(
            &self.arm,
            &self.arm_velocity,
            arm_accel,
            &self.finger.angles,
            &self.finger.angular_velocities,
            &self.finger_cfg,
            &self.geometry,
        )
    }

    /// Kinetic + gravitational + spring energy of the finger plus box kinetic
    /// energy. Gravitational energy is measured from the ground plane.
    pub fn mechanical_energy(&self) -> f64 {
        let chain = self.chain(&ArmState::default());
        let m = self.finger_cfg.link_mass;
        let kinetic: f64 = chain.velocities.iter().map(|v| 0.5 * m * v.norm_squared()).sum();
        let potential: f64 = chain.centers.iter().map(|c| m * self.gravity * c.z).sum();
        let spring: f64 = self
            .finger
            .angles
            .iter()
            .map(|q| 0.5 * self.finger_cfg.spring_k * q * q)
            .sum();
        let boxes: f64 = self
            .boxes
            .iter()
            .map(|b| 0.5 * b.mass * (b.vx * b.vx + b.vy * b.vy) + 0.5 * b.yaw_inertia() * b.wz * b.wz)
            .sum();
        kinetic + potential + spring + boxes
    }

    /// Minimum clearance between any link's contact sphere and the ground or
    /// a box; negative when something penetrates.
    pub fn min_clearance(&self) -> f64 {
        let r = self.finger_cfg.radius;
        let k = self.kinematics();
        let mut best = f64::INFINITY;
        for link in &k.links {
            best = best.min(link.center.z - r);
            for b in &self.boxes {
                best = best.min(contact::box_clearance(link.center, r, b).0);
            }
        }
        best
    }

    fn resolve_contacts(&self, chain: &kinematics::ChainState) -> (Vec<f64>, Vec<Vec3>, Vec<BoxWrench>) {
        let n = self.finger.angles.len();
        let r = self.finger_cfg.radius;
        let mut normals = vec![0.0; n];
        let mut forces = vec![Vec3::zeros(); n];
        let mut wrenches = vec![BoxWrench::default(); self.boxes.len()];
        for i in 0..n {
            let (c, v) = (chain.centers[i], chain.velocities[i]);
            let ground = contact::ground_touch(c, v, r, &self.contact);
            let boxes = self
                .boxes
                .iter()
                .enumerate()
                .filter_map(|(bi, b)| contact::box_touch(bi, c, v, r, b, &self.contact));
            for touch in ground.into_iter().chain(boxes) {
                normals[i] += touch.normal_magnitude;
                forces[i] += touch.force;
                if let Some((bi, point)) = touch.on_box {
                    let b = &self.boxes[bi];
                    let arm_x = point.x - b.x;
                    let arm_y = point.y - b.y;
                    let w = &mut wrenches[bi];
                    w.fx -= touch.force.x;
                    w.fy -= touch.force.y;
                    w.fz -= touch.force.z;
                    w.torque -= arm_x * touch.force.y - arm_y * touch.force.x;
                }
            }
        }
        (normals, forces, wrenches)
    }

    /// Advances the world by one step with the arm moved to `setpoint`.
    pub fn step(&mut self, setpoint: &Command, dt: f64) -> Result<(), SimError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SimError::InvalidTimestep(dt));
        }
        if !setpoint.is_within_workspace() {
            return Err(SimError::OutOfWorkspace(*setpoint));
        }

        // Kinematic arm: exact tracking of the setpoint.
        let target = setpoint.as_arm();
        let new_vel = ArmState {
            q1: (target.q1 - self.arm.q1) / dt,
            q2: (target.q2 - self.arm.q2) / dt,
            q3: (target.q3 - self.arm.q3) / dt,
        };
        let arm_accel = ArmState {
            q1: (new_vel.q1 - self.arm_velocity.q1) / dt,
            q2: (new_vel.q2 - self.arm_velocity.q2) / dt,
            q3: (new_vel.q3 - self.arm_velocity.q3) / dt,
        };
        self.arm = target;
        self.arm_velocity = new_vel;

        let n = self.finger.angles.len();
        let cfg = &self.finger_cfg;
        let m = cfg.link_mass;
        let chain = self.chain(&arm_accel);
        let (_, contact_forces, wrenches) = self.resolve_contacts(&chain);

        // Generalized forces: J^T (F - m * bias) with gravity and contact in F.
        let gravity = Vec3::new(0.0, 0.0, -self.gravity * m);
        let link_force: Vec<Vec3> = (0..n)
            .map(|i| gravity + contact_forces[i] - chain.bias[i] * m)
            .collect();
        let mut tau = DVector::<f64>::zeros(n);
        let mut mass = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let row = &chain.jacobian[i * n..i * n + i + 1];
            for j in 0..=i {
                tau[j] += row[j].dot(&link_force[i]);
                for k in 0..=j {
                    mass[(j, k)] += m * row[j].dot(&row[k]);
                }
            }
        }

        // (M + dt*C + dt^2*K) v' = M v + dt (tau - K q)
        let (k, c) = (cfg.spring_k, cfg.joint_damping);
        let v = DVector::from_column_slice(&self.finger.angular_velocities);
        for j in 0..n {
            for kk in 0..j {
                mass[(kk, j)] = mass[(j, kk)];
            }
        }
        let mut rhs = &mass * &v;
        for j in 0..n {
            rhs[j] += dt * (tau[j] - k * self.finger.angles[j]);
            mass[(j, j)] += dt * c + dt * dt * k;
        }
        let chol = mass.cholesky().ok_or_else(|| SimError::Instability {
            time: self.time,
            detail: "joint-space inertia is not positive definite".into(),
        })?;
        let v_next = chol.solve(&rhs);

        for j in 0..n {
            self.finger.angular_velocities[j] = v_next[j];
            self.finger.angles[j] += dt * v_next[j];
        }

        self.integrate_boxes(&wrenches, dt);
        self.time += dt;
        self.check_finite()
    }

    fn integrate_boxes(&mut self, wrenches: &[BoxWrench], dt: f64) {
        let g = self.gravity;
        let mu = self.box_ground_mu;
        for (b, w) in self.boxes.iter_mut().zip(wrenches) {
            let inertia = b.yaw_inertia();
            b.vx += dt * w.fx / b.mass;
            b.vy += dt * w.fy / b.mass;
            b.wz += dt * w.torque / inertia;

            // Coulomb ground friction, never reversing the motion.
            let normal = b.mass * g + (-w.fz).max(0.0);
            let dv = dt * mu * normal / b.mass;
            let speed = (b.vx * b.vx + b.vy * b.vy).sqrt();
            if speed <= dv {
                b.vx = 0.0;
                b.vy = 0.0;
            } else {
                let s = (speed - dv) / speed;
                b.vx *= s;
                b.vy *= s;
            }
            let lever = (b.half_extents[0] + b.half_extents[1]) / 3.0;
            let dw = dt * mu * normal * lever / inertia;
            b.wz = if b.wz.abs() <= dw { 0.0 } else { b.wz - dw * b.wz.signum() };

            b.x += dt * b.vx;
            b.y += dt * b.vy;
            b.yaw += dt * b.wz;
        }
    }

    fn check_finite(&self) -> Result<(), SimError> {
        for (i, (&q, &w)) in self
            .finger
            .angles
            .iter()
            .zip(&self.finger.angular_velocities)
            .enumerate()
        {
            if !q.is_finite() || !w.is_finite() || q.abs() >= PI {
                return Err(SimError::Instability {
                    time: self.time,
                    detail: format!("finger joint {i}: angle {q}, rate {w}"),
                });
            }
        }
        let box_ok = self.boxes.iter().all(|b| {
            [b.x, b.y, b.yaw, b.vx, b.vy, b.wz].iter().all(|v| v.is_finite())
        });
        if !box_ok {
            return Err(SimError::Instability {
                time: self.time,
                detail: "box state is not finite".into(),
            });
        }
        Ok(())
    }
}

/// Per-link normal contact forces of the current state, plus the wrench each
/// box receives from the finger.
pub fn contact_forces(world: &World) -> ContactForces {
    let chain = world.chain(&ArmState::default());
    let (per_link_normal, _, box_wrenches) = world.resolve_contacts(&chain);
    ContactForces {
        per_link_normal,
        box_wrenches,
    }
}

/// Value-semantics wrapper around [`World::step`].
pub fn step(world: &World, setpoint: &Command, dt: f64) -> Result<World, SimError> {
    let mut next = world.clone();
    next.step(setpoint, dt)?;
    Ok(next)
}
