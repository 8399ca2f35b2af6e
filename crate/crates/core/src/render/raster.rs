use crate::sim::Vec3;

use super::{CameraSpec, Frame, Rgb, BACKGROUND, IMAGE_SIZE};

/// Primitives closer than this to the camera plane are clipped.
const NEAR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub vertices: [Vec3; 3],
    pub color: Rgb,
}

/// A thick segment. Capsules have round ends, cylinders are cut flat at the
/// endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
    pub color: Rgb,
    pub round_ends: bool,
}

impl Capsule {
    pub fn capsule(a: Vec3, b: Vec3, radius: f64, color: Rgb) -> Self {
        Capsule {
            a,
            b,
            radius,
            color,
            round_ends: true,
        }
    }

    pub fn cylinder(a: Vec3, b: Vec3, radius: f64, color: Rgb) -> Self {
        Capsule {
            round_ends: false,
            ..Capsule::capsule(a, b, radius, color)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub triangles: Vec<Triangle>,
    pub capsules: Vec<Capsule>,
}

/// Pinhole camera in pixel units.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub origin: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    pub focal: f64,
}

impl View {
    pub fn new(cam: &CameraSpec) -> Self {
        let origin = Vec3::from(cam.position);
        let forward = (Vec3::from(cam.look_at) - origin).normalize();
        let world_up = if forward.cross(&Vec3::z()).norm() < 1e-9 {
            Vec3::y()
        } else {
            Vec3::z()
        };
        let right = forward.cross(&world_up).normalize();
        let up = right.cross(&forward);
        View {
            origin,
            right,
            up,
            forward,
            focal: 0.5 * IMAGE_SIZE as f64 / (0.5 * cam.vertical_fov).tan(),
        }
    }

    /// World point -> camera coordinates (x right, y up, z depth).
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = p - self.origin;
        Vec3::new(d.dot(&self.right), d.dot(&self.up), d.dot(&self.forward))
    }

    /// Camera coordinates -> continuous pixel coordinates (col, row).
    pub fn project(&self, c: Vec3) -> (f64, f64) {
        let half = 0.5 * IMAGE_SIZE as f64;
        (half + self.focal * c.x / c.z, half - self.focal * c.y / c.z)
    }
}

struct Target {
    frame: Frame,
    depth: Vec<f64>,
}

impl Target {
    fn plot(&mut self, row: usize, col: usize, z: f64, color: Rgb) {
        let i = row * IMAGE_SIZE + col;
        if z < self.depth[i] {
            self.depth[i] = z;
            self.frame.set(row, col, color);
        }
    }
}

/// Inclusive pixel range covering `[lo, hi]` in continuous coordinates,
/// sampling at pixel centers.
fn pixel_span(lo: f64, hi: f64) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(IMAGE_SIZE as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

fn clip_polygon(poly: &[Vec3]) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        let (pin, qin) = (p.z >= NEAR, q.z >= NEAR);
        if pin {
            out.push(p);
        }
        if pin != qin {
            let t = (NEAR - p.z) / (q.z - p.z);
            out.push(p + (q - p) * t);
        }
    }
    out
}

impl Scene {
    pub fn add_quad(&mut self, corners: [Vec3; 4], color: Rgb) {
        self.triangles.push(Triangle {
            vertices: [corners[0], corners[1], corners[2]],
            color,
        });
        self.triangles.push(Triangle {
            vertices: [corners[0], corners[2], corners[3]],
            color,
        });
    }

    /// Box with the given center, half extents and rotation about +z.
    pub fn add_box(&mut self, center: Vec3, half: [f64; 3], yaw: f64, color: Rgb) {
        let (s, c) = yaw.sin_cos();
        let corner = |sx: f64, sy: f64, sz: f64| {
            let (x, y) = (sx * half[0], sy * half[1]);
            center + Vec3::new(c * x - s * y, s * x + c * y, sz * half[2])
        };
        let faces = [
            [(-1., -1., -1.), (1., -1., -1.), (1., 1., -1.), (-1., 1., -1.)],
            [(-1., -1., 1.), (1., -1., 1.), (1., 1., 1.), (-1., 1., 1.)],
            [(-1., -1., -1.), (1., -1., -1.), (1., -1., 1.), (-1., -1., 1.)],
            [(-1., 1., -1.), (1., 1., -1.), (1., 1., 1.), (-1., 1., 1.)],
            [(-1., -1., -1.), (-1., 1., -1.), (-1., 1., 1.), (-1., -1., 1.)],
            [(1., -1., -1.), (1., 1., -1.), (1., 1., 1.), (1., -1., 1.)],
        ];
        for f in faces {
            self.add_quad(f.map(|(x, y, z)| corner(x, y, z)), color);
        }
    }

    pub fn rasterize(&self, cam: &CameraSpec) -> Frame {
        let view = View::new(cam);
        let mut target = Target {
            frame: Frame::filled(BACKGROUND),
            depth: vec![f64::INFINITY; IMAGE_SIZE * IMAGE_SIZE],
        };
        for t in &self.triangles {
            draw_triangle(&mut target, &view, t);
        }
        for c in &self.capsules {
            draw_capsule(&mut target, &view, c);
        }
        target.frame
    }
}

fn draw_triangle(target: &mut Target, view: &View, tri: &Triangle) {
    let cam: Vec<Vec3> = tri.vertices.iter().map(|&v| view.to_camera(v)).collect();
    let poly = clip_polygon(&cam);
    if poly.len() < 3 {
        return;
    }
    let screen: Vec<(f64, f64, f64)> = poly
        .iter()
        .map(|&c| {
            let (x, y) = view.project(c);
            (x, y, 1.0 / c.z)
        })
        .collect();
    for k in 1..screen.len() - 1 {
        fill_triangle(target, [screen[0], screen[k], screen[k + 1]], tri.color);
    }
}

fn edge(a: (f64, f64, f64), b: (f64, f64, f64), px: f64, py: f64) -> f64 {
    (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
}

fn fill_triangle(target: &mut Target, v: [(f64, f64, f64); 3], color: Rgb) {
    let area = edge(v[0], v[1], v[2].0, v[2].1);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    let min_x = v.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = v.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = v.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = v.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (Some((c0, c1)), Some((r0, r1))) = (pixel_span(min_x, max_x), pixel_span(min_y, max_y))
    else {
        return;
    };
    for row in r0..=r1 {
        let py = row as f64 + 0.5;
        for col in c0..=c1 {
            let px = col as f64 + 0.5;
            // barycentric weights, sign-normalized so inside means >= 0
            let w0 = edge(v[1], v[2], px, py) / area;
            let w1 = edge(v[2], v[0], px, py) / area;
            let w2 = edge(v[0], v[1], px, py) / area;
            if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
                let inv_z = w0 * v[0].2 + w1 * v[1].2 + w2 * v[2].2;
                target.plot(row, col, 1.0 / inv_z, color);
            }
        }
    }
}

fn draw_capsule(target: &mut Target, view: &View, cap: &Capsule) {
    let (mut a, mut b) = (view.to_camera(cap.a), view.to_camera(cap.b));
    if a.z < NEAR && b.z < NEAR {
        return;
    }
    if a.z < NEAR {
        a += (b - a) * ((NEAR - a.z) / (b.z - a.z));
    } else if b.z < NEAR {
        b += (a - b) * ((NEAR - b.z) / (a.z - b.z));
    }
    let (sa, sb) = (view.project(a), view.project(b));
    let (ra, rb) = (view.focal * cap.radius / a.z, view.focal * cap.radius / b.z);
    let reach = ra.max(rb);
    let (Some((c0, c1)), Some((r0, r1))) = (
        pixel_span(sa.0.min(sb.0) - reach, sa.0.max(sb.0) + reach),
        pixel_span(sa.1.min(sb.1) - reach, sa.1.max(sb.1) + reach),
    ) else {
        return;
    };
    let d = (sb.0 - sa.0, sb.1 - sa.1);
    let len2 = d.0 * d.0 + d.1 * d.1;
    for row in r0..=r1 {
        let py = row as f64 + 0.5;
        for col in c0..=c1 {
            let px = col as f64 + 0.5;
            let mut t = if len2 > 0.0 {
                ((px - sa.0) * d.0 + (py - sa.1) * d.1) / len2
            } else {
                0.0
            };
            if cap.round_ends {
                t = t.clamp(0.0, 1.0);
            } else if !(0.0..=1.0).contains(&t) {
                continue;
            }
            let (cx, cy) = (sa.0 + t * d.0, sa.1 + t * d.1);
            let dist2 = (px - cx).powi(2) + (py - cy).powi(2);
            let r = ra + t * (rb - ra);
            if dist2 <= r * r {
                let inv_z = (1.0 - t) / a.z + t / b.z;
                target.plot(row, col, 1.0 / inv_z - cap.radius, cap.color);
            }
        }
    }
}
