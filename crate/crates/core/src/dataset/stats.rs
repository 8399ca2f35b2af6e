use super::{DatasetError, Sample, N_JOINTS};

/// Channel layout: finger angles, then link forces, then the raw action.
pub const Q_OFFSET: usize = 0;
pub const FORCE_OFFSET: usize = N_JOINTS;
pub const ACTION_OFFSET: usize = 2 * N_JOINTS;
pub const N_CHANNELS: usize = 2 * N_JOINTS + 3;

/// Standard deviations below this are treated as zero.
const MIN_STD: f64 = 1e-8;

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: [f32; N_CHANNELS],
    pub std: [f32; N_CHANNELS],
    /// Channels whose spread was degenerate; their std is set to 1.
    pub clamped: [bool; N_CHANNELS],
}

impl NormStats {
    pub fn standardize(&self, offset: usize, values: &[f32]) -> Vec<f32> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[offset + i]) / self.std[offset + i])
            .collect()
    }

    pub fn destandardize(&self, offset: usize, values: &[f32]) -> Vec<f32> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[offset + i] + self.mean[offset + i])
            .collect()
    }
}

/// All 43 statistics channels of a sample.
pub fn channels(s: &Sample) -> [f32; N_CHANNELS] {
    let mut c = [0.0; N_CHANNELS];
    c[Q_OFFSET..FORCE_OFFSET].copy_from_slice(&s.finger_q);
    c[FORCE_OFFSET..ACTION_OFFSET].copy_from_slice(&s.forces);
    c[ACTION_OFFSET..].copy_from_slice(&s.action);
    c
}

/// Population mean and standard deviation of every channel.
pub fn compute_norm_stats(samples: &[Sample]) -> Result<NormStats, DatasetError> {
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    let n = samples.len() as f64;
    let mut sum = [0.0f64; N_CHANNELS];
    for s in samples {
        for (acc, v) in sum.iter_mut().zip(channels(s)) {
            *acc += v as f64;
        }
    }
    let mean = sum.map(|x| x / n);
    let mut sq = [0.0f64; N_CHANNELS];
    for s in samples {
        for (i, v) in channels(s).into_iter().enumerate() {
            sq[i] += (v as f64 - mean[i]).powi(2);
        }
    }
    let std = sq.map(|x| (x / n).sqrt());
    let clamped = std.map(|s| s < MIN_STD);
    Ok(NormStats {
        mean: mean.map(|m| m as f32),
        std: std.map(|s| if s < MIN_STD { 1.0 } else { s as f32 }),
        clamped,
    })
}
