//! Penalty contact between finger links and the ground plane or boxes.
//!
//! Every finger link carries a contact sphere at its center. Penetration `d`
//! against a surface produces a normal force `max(0, k*d + c*d_dot)` and a
//! viscous tangential force capped by Coulomb's `mu * normal`.

use super::kinematics::Vec3;
use super::{BoxBody, ContactParams};

/// Contact resolved for one link against one surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Touch {
    /// Total force on the link.
    pub force: Vec3,
    pub normal_magnitude: f64,
    /// Box index and world contact point when the surface is a box.
    pub on_box: Option<(usize, Vec3)>,
}

/// Force on a sphere from a surface with outward normal `n`, penetration
/// `depth` and sphere velocity relative to the surface `rel_vel`.
fn penalty(depth: f64, n: Vec3, rel_vel: Vec3, params: &ContactParams) -> Option<(Vec3, f64)> {
    if depth <= 0.0 {
        return None;
    }
    let depth_rate = -rel_vel.dot(&n);
    let fn_mag = params.penalty_stiffness * depth + params.penalty_damping * depth_rate;
    if fn_mag <= 0.0 {
        return None;
    }
    let mut force = n * fn_mag;
    let v_t = rel_vel - n * rel_vel.dot(&n);
    let speed = v_t.norm();
    if speed > 0.0 {
        // viscous regularization of Coulomb friction
        let ft = (params.penalty_damping * speed).min(params.friction_mu * fn_mag);
        force -= v_t * (ft / speed);
    }
    Some((force, fn_mag))
}

pub(crate) fn ground_touch(center: Vec3, vel: Vec3, radius: f64, params: &ContactParams) -> Option<Touch> {
    penalty(radius - center.z, Vec3::z(), vel, params).map(|(force, normal_magnitude)| Touch {
        force,
        normal_magnitude,
        on_box: None,
    })
}

/// Signed clearance between a sphere and a box (negative when penetrating),
/// the outward unit normal and the contact point on the box surface.
pub(crate) fn box_clearance(center: Vec3, radius: f64, b: &BoxBody) -> (f64, Vec3, Vec3) {
    let (s, c) = b.yaw.sin_cos();
    let box_center = Vec3::new(b.x, b.y, b.half_extents[2]);
    let d = center - box_center;
    // world -> box frame
    let local = Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
    let h = Vec3::from(b.half_extents);
    let clamped = Vec3::new(
        local.x.clamp(-h.x, h.x),
        local.y.clamp(-h.y, h.y),
        local.z.clamp(-h.z, h.z),
    );
    let delta = local - clamped;
    let dist = delta.norm();
    let (clearance, n_local, point_local) = if dist > 0.0 {
        (dist - radius, delta / dist, clamped)
    } else {
        // center inside the box: push out through the nearest face
        let gaps = [h.x - local.x.abs(), h.y - local.y.abs(), h.z - local.z.abs()];
        let axis = (0..3)
            .min_by(|&i, &j| gaps[i].total_cmp(&gaps[j]))
            .expect("three axes");
        let sign = if local[axis] >= 0.0 { 1.0 } else { -1.0 };
        let mut n = Vec3::zeros();
        n[axis] = sign;
        let mut p = local;
        p[axis] = sign * h[axis];
        (-gaps[axis] - radius, n, p)
    };
    let to_world = |v: Vec3| Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z);
    (clearance, to_world(n_local), box_center + to_world(point_local))
}

pub(crate) fn box_touch(
    index: usize,
    center: Vec3,
    vel: Vec3,
    radius: f64,
    b: &BoxBody,
    params: &ContactParams,
) -> Option<Touch> {
    let (clearance, n, point) = box_clearance(center, radius, b);
    if clearance >= 0.0 {
        return None;
    }
    let arm = point - Vec3::new(b.x, b.y, b.half_extents[2]);
    let box_vel = Vec3::new(b.vx - b.wz * arm.y, b.vy + b.wz * arm.x, 0.0);
    penalty(-clearance, n, vel - box_vel, params).map(|(force, normal_magnitude)| Touch {
        force,
        normal_magnitude,
        on_box: Some((index, point)),
    })
}
