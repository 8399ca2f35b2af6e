//! Cylindrical-arm and finger-chain kinematics.
//!
//! The arm places the finger mount at radius `arm_offset + q3`, azimuth `q1`
//! and height `column_height + q2`. The finger hangs from the mount as a chain
//! of equal links; joint `k` rotates link `k` about an axis fixed in link
//! `k - 1` (or in the mount frame for `k = 0`).

use nalgebra::{Matrix3, Rotation3, Vector3};

use super::{ArmState, AxisKind, FingerConfig};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Fixed dimensions of the rigid arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmGeometry {
    /// Carriage height when `q2 = 0`.
    pub column_height: f64,
    /// Radial distance of the finger mount when `q3 = 0`.
    pub arm_offset: f64,
}

/// Pose of one finger link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkFrame {
    /// Joint position at the proximal end.
    pub origin: Vec3,
    pub center: Vec3,
    /// Distal end, which is also the next link's origin.
    pub end: Vec3,
    /// Link orientation; the third column points from origin to end.
    pub rotation: Mat3,
}

/// Segments of the rigid arm, used for rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmFrames {
    pub column_base: Vec3,
    pub column_top: Vec3,
    pub carriage: Vec3,
    /// Finger mount point at the end of the sliding arm.
    pub tip: Vec3,
    /// Orientation of the finger mount (before any finger joint).
    pub mount_rotation: Mat3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub arm: ArmFrames,
    pub links: Vec<LinkFrame>,
}

fn local_axis(kind: AxisKind) -> Vec3 {
    match kind {
        AxisKind::FlexionExtension => Vec3::y(),
        AxisKind::AdductionAbduction => Vec3::x(),
    }
}

fn radial(q1: f64) -> Vec3 {
    Vec3::new(q1.cos(), q1.sin(), 0.0)
}

fn tangential(q1: f64) -> Vec3 {
    Vec3::new(-q1.sin(), q1.cos(), 0.0)
}

/// Mount orientation: local x radial, local z straight down, then tilted
/// about local y by `tilt`.
fn mount_rotation(q1: f64, tilt: f64) -> Mat3 {
    let base = Mat3::from_columns(&[radial(q1), -tangential(q1), -Vec3::z()]);
    base * Rotation3::from_axis_angle(&Vector3::y_axis(), tilt).into_inner()
}

fn arm_frames(arm: &ArmState, geom: &ArmGeometry, tilt: f64) -> ArmFrames {
    let height = geom.column_height + arm.q2;
    let r = geom.arm_offset + arm.q3;
    ArmFrames {
        column_base: Vec3::zeros(),
        column_top: Vec3::new(0.0, 0.0, geom.column_height),
        carriage: Vec3::new(0.0, 0.0, height),
        tip: radial(arm.q1) * r + Vec3::new(0.0, 0.0, height),
        mount_rotation: mount_rotation(arm.q1, tilt),
    }
}

/// Link frames of the arm and the finger chain.
pub fn forward_kinematics(
    arm: &ArmState,
    angles: &[f64],
    cfg: &FingerConfig,
    geom: &ArmGeometry,
) -> Kinematics {
    let frames = arm_frames(arm, geom, cfg.mount_tilt);
    let mut links = Vec::with_capacity(angles.len());
    let mut rot = frames.mount_rotation;
    let mut origin = frames.tip;
    for (k, &q) in angles.iter().enumerate() {
        let axis = local_axis(cfg.axis_pattern[k]);
        rot *= Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), q).into_inner();
        let dir = rot.column(2).into_owned();
        let end = origin + dir * cfg.link_length;
        links.push(LinkFrame {
            origin,
            center: origin + dir * (0.5 * cfg.link_length),
            end,
            rotation: rot,
        });
        origin = end;
    }
    Kinematics { arm: frames, links }
}

/// Velocity-level quantities of the chain needed by the dynamics.
#[derive(Debug, Clone)]
pub(crate) struct ChainState {
    pub centers: Vec<Vec3>,
    /// World velocity of each link center.
    pub velocities: Vec<Vec3>,
    /// Acceleration of each link center when all finger joint accelerations
    /// are zero (arm motion, centripetal and Coriolis terms).
    pub bias: Vec<Vec3>,
    /// `jacobian[i * n + j]` = d(center_i)/d(q_j); zero for `j > i`.
    pub jacobian: Vec<Vec3>,
}

/// Arm joint rates or accelerations, in the same layout as [`ArmState`].
pub(crate) fn chain_state(
    arm: &ArmState,
    arm_rate: &ArmState,
    arm_accel: &ArmState,
    angles: &[f64],
    rates: &[f64],
    cfg: &FingerConfig,
    geom: &ArmGeometry,
) -> ChainState {
    let n = angles.len();
    let q1 = arm.q1;
    let r = geom.arm_offset + arm.q3;
    let (er, et, ez) = (radial(q1), tangential(q1), Vec3::z());

    // Mount point motion.
    let tip = er * r + ez * (geom.column_height + arm.q2);
    let tip_vel = er * arm_rate.q3 + et * (r * arm_rate.q1) + ez * arm_rate.q2;
    let tip_acc = er * (arm_accel.q3 - r * arm_rate.q1 * arm_rate.q1)
        + et * (r * arm_accel.q1 + 2.0 * arm_rate.q3 * arm_rate.q1)
        + ez * arm_accel.q2;

    let mut omega = ez * arm_rate.q1;
    let mut alpha = ez * arm_accel.q1;
    let mut rot = mount_rotation(q1, cfg.mount_tilt);
    let mut origin = tip;
    let mut o_vel = tip_vel;
    let mut o_acc = tip_acc;

    let mut origins = Vec::with_capacity(n);
    let mut axes = Vec::with_capacity(n);
    let mut centers = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    let mut bias = Vec::with_capacity(n);

    for k in 0..n {
        let local = local_axis(cfg.axis_pattern[k]);
        let u = rot * local;
        let spin = u * rates[k];
        alpha += omega.cross(&spin);
        omega += spin;
        rot *= Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(local), angles[k])
            .into_inner();
        let dir = rot.column(2).into_owned();

        let half = dir * (0.5 * cfg.link_length);
        let full = dir * cfg.link_length;
        let center = origin + half;
        centers.push(center);
        velocities.push(o_vel + omega.cross(&half));
        bias.push(o_acc + alpha.cross(&half) + omega.cross(&omega.cross(&half)));
        origins.push(origin);
        axes.push(u);

        o_acc += alpha.cross(&full) + omega.cross(&omega.cross(&full));
        o_vel += omega.cross(&full);
        origin += full;
    }

    let mut jacobian = vec![Vec3::zeros(); n * n];
    for i in 0..n {
        for j in 0..=i {
            jacobian[i * n + j] = axes[j].cross(&(centers[i] - origins[j]));
        }
    }

    ChainState {
        centers,
        velocities,
        bias,
        jacobian,
    }
}
