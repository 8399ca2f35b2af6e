//! Episode execution and multi-modal recording.
//!
//! An episode tracks a list of arm commands. Each command is reached with a
//! smooth step over one second of 1 kHz physics, and a [`Sample`] is recorded
//! every 100 physics steps (10 Hz), giving ten samples per command.

mod format;
mod stats;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::SimConfig;
use crate::render::{self, Frame, RenderStyle, FRAME_LEN};
use crate::sim::{self, SimError, World, PHYSICS_DT, Q1_RANGE, Q2_RANGE, Q3_RANGE};

pub use crate::sim::Command;
pub use format::{file_size, header_size, record_size, FORMAT_VERSION, MAGIC};
pub use stats::{compute_norm_stats, NormStats, ACTION_OFFSET, FORCE_OFFSET, N_CHANNELS, Q_OFFSET};

/// Number of finger joints (and links) recorded per sample.
pub const N_JOINTS: usize = 20;
/// Physics steps per command segment (one second).
pub const STEPS_PER_COMMAND: usize = 1000;
/// Physics steps between recorded samples (10 Hz).
pub const STEPS_PER_SAMPLE: usize = 100;
pub const SAMPLES_PER_COMMAND: usize = STEPS_PER_COMMAND / STEPS_PER_SAMPLE;
/// Seconds between consecutive samples.
pub const SAMPLE_PERIOD: f64 = STEPS_PER_SAMPLE as f64 * PHYSICS_DT;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a dataset file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset format version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset file is truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dataset checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("dataset is empty")]
    Empty,
    #[error("smooth_step parameter {0} is outside [0, 1]")]
    Domain(f64),
    #[error("simulation failed after {completed} samples: {source}")]
    Simulation { completed: usize, source: SimError },
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Empty,
    Cluttered,
}

impl Scenario {
    pub fn code(self) -> u8 {
        match self {
            Scenario::Empty => 0,
            Scenario::Cluttered => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Scenario::Empty),
            1 => Some(Scenario::Cluttered),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Empty => "empty",
            Scenario::Cluttered => "cluttered",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "empty" => Ok(Scenario::Empty),
            "cluttered" => Ok(Scenario::Cluttered),
            other => Err(format!("unknown scenario `{other}` (expected empty or cluttered)")),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One 10 Hz observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: u32,
    /// Target of the command segment that produced this sample (raw units).
    pub action: [f32; 3],
    /// `action` mapped onto [-1, 1] per joint range.
    pub action_normalized: [f32; 3],
    pub arm_q: [f32; 3],
    pub finger_q: [f32; N_JOINTS],
    /// Normal contact force per finger link (N).
    pub forces: [f32; N_JOINTS],
    /// 8-bit RGB camera frame, present iff the dataset records vision.
    pub frame: Option<Vec<u8>>,
}

impl Sample {
    pub fn new(
        index: u32,
        action: [f32; 3],
        arm_q: [f32; 3],
        finger_q: [f32; N_JOINTS],
        forces: [f32; N_JOINTS],
        frame: Option<Vec<u8>>,
    ) -> Self {
        let cmd = Command::from_array(action.map(f64::from));
        Sample {
            index,
            action,
            action_normalized: cmd.normalized().map(|v| v as f32),
            arm_q,
            finger_q,
            forces,
            frame,
        }
    }

    pub fn command(&self) -> Command {
        Command::from_array(self.action.map(f64::from))
    }

    /// Camera frame with values in [0, 1].
    pub fn frame(&self) -> Option<Frame> {
        self.frame.as_deref().and_then(Frame::from_bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenario: Scenario,
    pub seed: u64,
    pub has_vision: bool,
    pub samples: Vec<Sample>,
    /// Verbatim configuration file used to generate the data.
    pub config: String,
    pub stats: NormStats,
}

impl Dataset {
    /// Assembles a dataset and computes its normalization statistics.
    pub fn new(
        scenario: Scenario,
        seed: u64,
        has_vision: bool,
        samples: Vec<Sample>,
        config: String,
    ) -> Result<Self, DatasetError> {
        for (i, s) in samples.iter().enumerate() {
            if s.frame.is_some() != has_vision {
                return Err(DatasetError::InvalidEpisode(format!(
                    "sample {i} frame presence disagrees with has_vision = {has_vision}"
                )));
            }
            if let Some(f) = &s.frame {
                if f.len() != FRAME_LEN {
                    return Err(DatasetError::InvalidEpisode(format!(
                        "sample {i} frame has {} bytes",
                        f.len()
                    )));
                }
            }
            if i > 0 && s.index <= samples[i - 1].index {
                return Err(DatasetError::InvalidEpisode(format!(
                    "sample {i} is out of order"
                )));
            }
        }
        let stats = compute_norm_stats(&samples)?;
        Ok(Dataset {
            scenario,
            seed,
            has_vision,
            samples,
            config,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First index of the held-out block (last 10% of samples).
    pub fn split_index(&self) -> usize {
        self.samples.len() * 9 / 10
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DatasetError> {
        format::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DatasetError> {
        format::load(path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        format::decode(bytes)
    }
}

/// Cubic smooth step `x0 + (x1 - x0) * (3u^2 - 2u^3)`; zero slope at both ends.
pub fn smooth_step(x0: f64, x1: f64, u: f64) -> Result<f64, DatasetError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(DatasetError::Domain(u));
    }
    let s = u * u * (3.0 - 2.0 * u);
    // blended form keeps both endpoints exact in floating point
    Ok(x0 * (1.0 - s) + x1 * s)
}

/// `n` uniform random arm targets inside the workspace ranges.
pub fn generate_commands(n: usize, seed: u64) -> Vec<Command> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Command::new(
                rng.random_range(Q1_RANGE.0..=Q1_RANGE.1),
                rng.random_range(Q2_RANGE.0..=Q2_RANGE.1),
                rng.random_range(Q3_RANGE.0..=Q3_RANGE.1),
            )
        })
        .collect()
}

/// Seed of the box placement stream, kept apart from the command stream.
fn scene_seed(seed: u64) -> u64 {
    seed ^ 0x5851_f42d_4c95_7f2d
}

/// Initial world of an episode: arm at rest, boxes for cluttered scenes.
pub fn initial_world(scenario: Scenario, cfg: &SimConfig, seed: u64) -> World {
    let mut world = World::new(cfg);
    if scenario == Scenario::Cluttered {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed));
        world.spawn_boxes(cfg, &mut rng);
    }
    world
}

pub fn render_style(cfg: &SimConfig) -> RenderStyle {
    RenderStyle {
        finger_radius: cfg.finger.render_radius,
        ..RenderStyle::default()
    }
}

/// Runs the commands from the rest configuration and records a sample every
/// 0.1 s.
pub fn run_episode(
    scenario: Scenario,
    commands: &[Command],
    cfg: &SimConfig,
    seed: u64,
    with_vision: bool,
) -> Result<Dataset, DatasetError> {
    run_episode_with(scenario, commands, cfg, seed, with_vision, |_, _| {})
}

/// As [`run_episode`], calling `observe(world, sample)` at every sample instant.
pub fn run_episode_with(
    scenario: Scenario,
    commands: &[Command],
    cfg: &SimConfig,
    seed: u64,
    with_vision: bool,
    mut observe: impl FnMut(&World, &Sample),
) -> Result<Dataset, DatasetError> {
    if commands.is_empty() {
        return Err(DatasetError::InvalidEpisode("no commands".into()));
    }
    if let Some(bad) = commands.iter().find(|c| !c.is_within_workspace()) {
        return Err(DatasetError::InvalidEpisode(format!(
            "command outside the workspace: {bad:?}"
        )));
    }
    let camera = cfg.camera();
    let style = render_style(cfg);
    let mut world = initial_world(scenario, cfg, seed);
    let mut samples = Vec::with_capacity(commands.len() * SAMPLES_PER_COMMAND);
    let mut start = Command::REST;

    for target in commands {
        for step in 1..=STEPS_PER_COMMAND {
            let u = step as f64 / STEPS_PER_COMMAND as f64;
            let setpoint = Command::new(
                smooth_step(start.q1, target.q1, u)?,
                smooth_step(start.q2, target.q2, u)?,
                smooth_step(start.q3, target.q3, u)?,
            );
            world
                .step(&setpoint, PHYSICS_DT)
                .map_err(|source| DatasetError::Simulation {
                    completed: samples.len(),
                    source,
                })?;
            if step % STEPS_PER_SAMPLE == 0 {
                let sample = record(&world, target, samples.len() as u32, with_vision, &camera, &style);
                observe(&world, &sample);
                samples.push(sample);
            }
        }
        start = *target;
    }
    Dataset::new(scenario, seed, with_vision, samples, cfg.source().to_owned())
}

fn record(
    world: &World,
    target: &Command,
    index: u32,
    with_vision: bool,
    camera: &render::CameraSpec,
    style: &RenderStyle,
) -> Sample {
    let forces = sim::contact_forces(world).per_link_normal;
    let finger_q: [f32; N_JOINTS] = std::array::from_fn(|i| world.finger.angles[i] as f32);
    let forces: [f32; N_JOINTS] = std::array::from_fn(|i| forces[i] as f32);
    let frame = with_vision.then(|| render::render(world, camera, style).to_bytes());
    Sample::new(
        index,
        target.to_array().map(|v| v as f32),
        world.arm.to_array().map(|v| v as f32),
        finger_q,
        forces,
        frame,
    )
}

#[cfg(test)]
mod tests;
