//! Simulation configuration file.
//!
//! The configuration is a small TOML document (see `configs/default.toml`).
//! The raw text is kept next to the parsed values so datasets can embed the
//! exact file they were generated with.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::CameraSpec;
use crate::sim::{AxisKind, ContactParams, FingerConfig};

/// The configuration shipped with the crate.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config value `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerSection {
    pub n_joints: usize,
    pub link_length: f64,
    pub link_mass: f64,
    pub spring_k: f64,
    pub joint_damping: f64,
    pub radius: f64,
    pub mount_tilt: f64,
    pub render_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactSection {
    pub penalty_stiffness: f64,
    pub penalty_damping: f64,
    pub friction_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub gravity: f64,
    pub column_height: f64,
    pub arm_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub count: usize,
    pub side_min: f64,
    pub side_max: f64,
    pub mass: f64,
    pub ground_mu: f64,
    pub spawn_radius_min: f64,
    pub spawn_radius_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub vertical_fov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub quasi_static_velocity_bound: f64,
    pub quasi_static_angle_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    finger: FingerSection,
    contact: ContactSection,
    world: WorldSection,
    boxes: BoxSection,
    camera: CameraSection,
    sampling: SamplingSection,
}

/// Parsed configuration plus the text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub finger: FingerSection,
    pub contact: ContactSection,
    pub world: WorldSection,
    pub boxes: BoxSection,
    pub camera: CameraSection,
    pub sampling: SamplingSection,
    source: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("bundled config is valid")
    }
}

impl SimConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        let cfg = SimConfig {
            finger: raw.finger,
            contact: raw.contact,
            world: raw.world,
            boxes: raw.boxes,
            camera: raw.camera,
            sampling: raw.sampling,
            source: text.to_owned(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// The verbatim text this configuration was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    fn validate(&self) -> Result<(), ConfigError> {
        fn positive(key: &'static str, v: f64) -> Result<(), ConfigError> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    reason: format!("must be positive, got {v}"),
                })
            }
        }
        fn non_negative(key: &'static str, v: f64) -> Result<(), ConfigError> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    reason: format!("must be non-negative, got {v}"),
                })
            }
        }
        if self.finger.n_joints != 20 {
            return Err(ConfigError::Invalid {
                key: "finger.n_joints",
                reason: format!("the finger has 20 joints, got {}", self.finger.n_joints),
            });
        }
        positive("finger.link_length", self.finger.link_length)?;
        positive("finger.link_mass", self.finger.link_mass)?;
        positive("finger.spring_k", self.finger.spring_k)?;
        non_negative("finger.joint_damping", self.finger.joint_damping)?;
        positive("finger.radius", self.finger.radius)?;
        positive("finger.render_radius", self.finger.render_radius)?;
        non_negative("contact.penalty_stiffness", self.contact.penalty_stiffness)?;
        non_negative("contact.penalty_damping", self.contact.penalty_damping)?;
        non_negative("contact.friction_mu", self.contact.friction_mu)?;
        non_negative("world.gravity", self.world.gravity)?;
        positive("world.column_height", self.world.column_height)?;
        non_negative("world.arm_offset", self.world.arm_offset)?;
        positive("boxes.side_min", self.boxes.side_min)?;
        positive("boxes.mass", self.boxes.mass)?;
        non_negative("boxes.ground_mu", self.boxes.ground_mu)?;
        if self.boxes.side_max < self.boxes.side_min {
            return Err(ConfigError::Invalid {
                key: "boxes.side_max",
                reason: "smaller than side_min".into(),
            });
        }
        if self.boxes.spawn_radius_max < self.boxes.spawn_radius_min {
            return Err(ConfigError::Invalid {
                key: "boxes.spawn_radius_max",
                reason: "smaller than spawn_radius_min".into(),
            });
        }
        positive("camera.vertical_fov", self.camera.vertical_fov)?;
        if self.camera.position == self.camera.look_at {
            return Err(ConfigError::Invalid {
                key: "camera.look_at",
                reason: "coincides with camera.position".into(),
            });
        }
        positive(
            "sampling.quasi_static_velocity_bound",
            self.sampling.quasi_static_velocity_bound,
        )?;
        positive(
            "sampling.quasi_static_angle_step",
            self.sampling.quasi_static_angle_step,
        )?;
        Ok(())
    }

    pub fn finger_config(&self) -> FingerConfig {
        FingerConfig {
            n_joints: self.finger.n_joints,
            link_length: self.finger.link_length,
            link_mass: self.finger.link_mass,
            spring_k: self.finger.spring_k,
            joint_damping: self.finger.joint_damping,
            radius: self.finger.radius,
            mount_tilt: self.finger.mount_tilt,
            axis_pattern: AxisKind::alternating(self.finger.n_joints),
        }
    }

    pub fn contact_params(&self) -> ContactParams {
        ContactParams {
            penalty_stiffness: self.contact.penalty_stiffness,
            penalty_damping: self.contact.penalty_damping,
            friction_mu: self.contact.friction_mu,
        }
    }

    pub fn camera(&self) -> CameraSpec {
        CameraSpec {
            position: self.camera.position,
            look_at: self.camera.look_at,
            vertical_fov: self.camera.vertical_fov,
        }
    }
}
