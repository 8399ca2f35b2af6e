//! Deterministic software rasterizer for the exocentric 64x64 RGB camera.
//!
//! Scenes are flat-shaded: each primitive has one color, visibility is
//! resolved with a per-pixel depth buffer, and pixels are sampled at their
//! centers. Triangles cover the ground and boxes; arm and finger segments are
//! drawn as screen-space cylinder and capsule silhouettes.

mod raster;

use std::io::{self, Write};
use std::path::Path;

use crate::sim::{Vec3, World};
pub use raster::{Capsule, Scene, Triangle};

/// Image width and height in pixels.
pub const IMAGE_SIZE: usize = 64;
/// Number of values in one frame (`64 * 64 * 3`).
pub const FRAME_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * 3;

pub type Rgb = [f32; 3];

pub const BACKGROUND: Rgb = [0.80, 0.88, 0.96];
pub const GROUND: Rgb = [0.5, 0.5, 0.5];
pub const ARM: Rgb = [0.15, 0.3, 0.85];
pub const FINGER: Rgb = [0.1, 0.75, 0.2];
const BOX_COLORS: [Rgb; 4] = [
    [0.9, 0.12, 0.1],
    [0.75, 0.3, 0.15],
    [0.65, 0.05, 0.3],
    [0.95, 0.45, 0.4],
];

/// Color used for the `i`-th box of a scene.
pub fn box_color(i: usize) -> Rgb {
    BOX_COLORS[i % BOX_COLORS.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSpec {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub vertical_fov: f64,
}

/// Sizes used when turning a world into drawable primitives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderStyle {
    pub finger_radius: f64,
    pub arm_radius: f64,
    pub column_radius: f64,
    /// Half side of the square ground patch centered on the origin.
    pub ground_half_extent: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle {
            finger_radius: 0.035,
            arm_radius: 0.04,
            column_radius: 0.06,
            ground_half_extent: 3.0,
        }
    }
}

/// Camera observation, row-major `[row][col][channel]` with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Vec<f32>,
}

impl Frame {
    pub fn filled(color: Rgb) -> Self {
        let mut pixels = Vec::with_capacity(FRAME_LEN);
        for _ in 0..IMAGE_SIZE * IMAGE_SIZE {
            pixels.extend_from_slice(&color);
        }
        Frame { pixels }
    }

    /// Builds a frame from raw values; `None` unless there are exactly
    /// [`FRAME_LEN`] values, all in [0, 1].
    pub fn from_pixels(pixels: Vec<f32>) -> Option<Self> {
        (pixels.len() == FRAME_LEN && pixels.iter().all(|v| (0.0..=1.0).contains(v)))
            .then_some(Frame { pixels })
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        (bytes.len() == FRAME_LEN).then(|| Frame {
            pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    /// 8-bit quantization used by the dataset format.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> Rgb {
        let i = (row * IMAGE_SIZE + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, row: usize, col: usize, c: Rgb) {
        let i = (row * IMAGE_SIZE + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn write_ppm<W: Write>(&self, out: W) -> io::Result<()> {
        write_ppm(out, IMAGE_SIZE, IMAGE_SIZE, &self.to_bytes())
    }
}

/// Frame difference `next - prev`, same layout as [`Frame`], values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowFrame {
    pixels: Vec<f32>,
}

impl FlowFrame {
    pub fn zeros() -> Self {
        FlowFrame {
            pixels: vec![0.0; FRAME_LEN],
        }
    }

    /// Wraps raw values, clamping them into [-1, 1]. `None` for a wrong length.
    pub fn from_values(mut pixels: Vec<f32>) -> Option<Self> {
        if pixels.len() != FRAME_LEN {
            return None;
        }
        for v in &mut pixels {
            *v = v.clamp(-1.0, 1.0);
        }
        Some(FlowFrame { pixels })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Affine map [-1, 1] -> [0, 255]; zero flow becomes mid gray.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round() as u8)
            .collect()
    }

    pub fn write_ppm<W: Write>(&self, out: W) -> io::Result<()> {
        write_ppm(out, IMAGE_SIZE, IMAGE_SIZE, &self.to_bytes())
    }
}

pub fn frame_diff(prev: &Frame, next: &Frame) -> FlowFrame {
    FlowFrame {
        pixels: next
            .pixels
            .iter()
            .zip(&prev.pixels)
            .map(|(n, p)| n - p)
            .collect(),
    }
}

/// Binary PPM (P6, 8-bit) writer for interleaved RGB bytes.
pub fn write_ppm<W: Write>(mut out: W, width: usize, height: usize, rgb: &[u8]) -> io::Result<()> {
    assert_eq!(rgb.len(), width * height * 3, "RGB buffer size mismatch");
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.write_all(rgb)
}

/// Several equally sized RGB images placed side by side.
pub fn hstack(images: &[Vec<u8>], width: usize, height: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(images.len() * width * height * 3);
    for row in 0..height {
        for img in images {
            out.extend_from_slice(&img[row * width * 3..(row + 1) * width * 3]);
        }
    }
    out
}

pub fn save_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(rgb.len() + 16);
    write_ppm(&mut buf, width, height, rgb)?;
    std::fs::write(path, buf)
}

impl Scene {
    /// Ground, boxes, arm and finger of a world.
    pub fn from_world(world: &World, style: &RenderStyle) -> Scene {
        let mut scene = Scene::default();
        let g = style.ground_half_extent;
        scene.add_quad(
            [
                Vec3::new(-g, -g, 0.0),
                Vec3::new(g, -g, 0.0),
                Vec3::new(g, g, 0.0),
                Vec3::new(-g, g, 0.0),
            ],
            GROUND,
        );
        for (i, b) in world.boxes.iter().enumerate() {
            scene.add_box(
                Vec3::new(b.x, b.y, b.half_extents[2]),
                b.half_extents,
                b.yaw,
                box_color(i),
            );
        }
        let k = world.kinematics();
        scene.capsules.push(Capsule::cylinder(
            k.arm.column_base,
            k.arm.column_top,
            style.column_radius,
            ARM,
        ));
        scene.capsules.push(Capsule::cylinder(
            k.arm.carriage,
            k.arm.tip,
            style.arm_radius,
            ARM,
        ));
        for link in &k.links {
            scene.capsules.push(Capsule::capsule(
                link.origin,
                link.end,
                style.finger_radius,
                FINGER,
            ));
        }
        scene
    }
}

/// Renders the world as seen from `cam`.
pub fn render(world: &World, cam: &CameraSpec, style: &RenderStyle) -> Frame {
    Scene::from_world(world, style).rasterize(cam)
}
