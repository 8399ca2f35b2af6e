//! Turning recorded samples into network tensors.

use std::ops::Range;

use crate::dataset::{Dataset, NormStats, Sample, FORCE_OFFSET, N_JOINTS, Q_OFFSET};
use crate::nn::Tensor;
use crate::render::{FRAME_LEN, IMAGE_SIZE};

use super::{ModelError, ObservationBundle, TARGET_DIM};

const PLANE: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Starts `t` of the transitions `(t, t + 1)` that lie inside `range` and are
/// consecutive time steps of the same episode.
pub fn pair_starts(ds: &Dataset, range: Range<usize>) -> Vec<usize> {
    let end = range.end.min(ds.len());
    (range.start..end.saturating_sub(1))
        .filter(|&t| ds.samples[t + 1].index == ds.samples[t].index + 1)
        .collect()
}

/// Training transitions from the leading 90% block and held-out transitions
/// from the trailing 10% block. No transition straddles the boundary.
pub fn split_pairs(ds: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let split = ds.split_index();
    (pair_starts(ds, 0..split), pair_starts(ds, split..ds.len()))
}

/// Interleaved 8-bit RGB to planar `[3, 64, 64]` values in [0, 1].
pub(crate) fn push_frame_chw(bytes: &[u8], out: &mut Vec<f32>) {
    debug_assert_eq!(bytes.len(), FRAME_LEN);
    for ch in 0..3 {
        out.extend((0..PLANE).map(|p| bytes[p * 3 + ch] as f32 / 255.0));
    }
}

/// Planar frame difference `next - prev`, matching [`crate::render::frame_diff`].
pub(crate) fn push_flow_chw(prev: &[u8], next: &[u8], out: &mut Vec<f32>) {
    for ch in 0..3 {
        out.extend((0..PLANE).map(|p| {
            let i = p * 3 + ch;
            next[i] as f32 / 255.0 - prev[i] as f32 / 255.0
        }));
    }
}

/// Planar `[3, 64, 64]` back to interleaved layout.
pub(crate) fn chw_to_hwc(chw: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; FRAME_LEN];
    for ch in 0..3 {
        for p in 0..PLANE {
            out[p * 3 + ch] = chw[ch * PLANE + p];
        }
    }
    out
}

/// Standardized next-step targets: finger angles then link forces.
pub(crate) fn push_targets(stats: &NormStats, s: &Sample, out: &mut Vec<f32>) {
    out.extend(stats.standardize(Q_OFFSET, &s.finger_q));
    out.extend(stats.standardize(FORCE_OFFSET, &s.forces));
}

/// Encoder inputs for a batch of observations.
pub(crate) struct Inputs {
    pub q: Tensor<f32>,
    pub frames: Option<Tensor<f32>>,
}

pub(crate) fn observation_inputs(stats: &NormStats, obs: &[ObservationBundle], vision: bool) -> Result<Inputs, ModelError> {
    let b = obs.len();
    let mut q = Vec::with_capacity(b * N_JOINTS);
    let mut frames = Vec::with_capacity(if vision { b * FRAME_LEN } else { 0 });
    for (i, o) in obs.iter().enumerate() {
        q.extend(stats.standardize(Q_OFFSET, &o.finger_q));
        match (&o.frame, vision) {
            (Some(f), true) => {
                for ch in 0..3 {
                    frames.extend((0..PLANE).map(|p| f.pixels()[p * 3 + ch]));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(ModelError::Modality(format!(
                    "observation {i} carries a frame but the model is proprioceptive only"
                )))
            }
            (None, true) => {
                return Err(ModelError::Modality(format!(
                    "observation {i} has no frame but the model needs vision"
                )))
            }
        }
    }
    Ok(Inputs {
        q: Tensor::new(vec![b, N_JOINTS], q)?,
        frames: vision
            .then(|| Tensor::new(vec![b, 3, IMAGE_SIZE, IMAGE_SIZE], frames))
            .transpose()?,
    })
}

/// A training or evaluation batch of transitions.
pub(crate) struct Batch {
    pub inputs: Inputs,
    pub action: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub flow: Option<Tensor<f32>>,
}

pub(crate) fn transition_batch(ds: &Dataset, stats: &NormStats, starts: &[usize], vision: bool) -> Result<Batch, ModelError> {
    let b = starts.len();
    let mut q = Vec::with_capacity(b * N_JOINTS);
    let mut action = Vec::with_capacity(b * 3);
    let mut targets = Vec::with_capacity(b * TARGET_DIM);
    let mut frames = Vec::new();
    let mut flow = Vec::new();
    for &t in starts {
        let (now, next) = (&ds.samples[t], &ds.samples[t + 1]);
        q.extend(stats.standardize(Q_OFFSET, &now.finger_q));
        action.extend_from_slice(&next.action_normalized);
        push_targets(stats, next, &mut targets);
        if vision {
            let (Some(f0), Some(f1)) = (&now.frame, &next.frame) else {
                return Err(ModelError::Modality(format!("sample {t} has no frame")));
            };
            push_frame_chw(f0, &mut frames);
            push_flow_chw(f0, f1, &mut flow);
        }
    }
    let img = |v| Tensor::new(vec![b, 3, IMAGE_SIZE, IMAGE_SIZE], v);
    Ok(Batch {
        inputs: Inputs {
            q: Tensor::new(vec![b, N_JOINTS], q)?,
            frames: vision.then(|| img(frames)).transpose()?,
        },
        action: Tensor::new(vec![b, 3], action)?,
        targets: Tensor::new(vec![b, TARGET_DIM], targets)?,
        flow: vision.then(|| img(flow)).transpose()?,
    })
}
