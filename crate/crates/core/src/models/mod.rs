//! Conditional VAE perception models.
//!
//! * P1 encodes finger angles alone.
//! * P2 fuses a camera frame with finger angles and additionally predicts the
//!   next frame difference.
//!
//! Both decode a latent sample concatenated with the normalized action into
//! the next finger angles and link forces. [`ReconModel`] trains a separate
//! decoder on a frozen encoder to probe what the latent retains.

mod data;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, NormStats, Sample, FORCE_OFFSET, N_JOINTS, Q_OFFSET};
use crate::nn::{
    conv_out, load_params, save_params, Adam, AdamConfig, Graph, LayerSpec, ModelFile, NnError,
    NodeId, ParamSet, Tensor,
};
use crate::render::{FlowFrame, Frame, FRAME_LEN, IMAGE_SIZE};
use crate::sim::Command;

pub use data::{pair_starts, split_pairs};
use data::{chw_to_hwc, observation_inputs, transition_batch, Batch, Inputs};

pub const P1_LATENTS: [usize; 3] = [2, 4, 16];
pub const P2_LATENTS: [usize; 3] = [16, 64, 128];
pub const HIDDEN_WIDTH: usize = 256;
pub const CONV_CHANNELS: usize = 8;
pub const ACTION_DIM: usize = 3;
/// Next finger angles followed by next link forces.
pub const TARGET_DIM: usize = 2 * N_JOINTS;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("latent size {latent} is not one of {allowed:?} for {variant} (pass the override flag to allow any size)")]
    InvalidLatent {
        variant: Variant,
        latent: usize,
        allowed: &'static [usize],
    },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("modality mismatch: {0}")]
    Modality(String),
    #[error("dataset too small: {0}")]
    TooSmall(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("action {0:?} is outside the arm workspace")]
    ActionOutOfRange([f64; 3]),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("bad model descriptor: {0}")]
    Descriptor(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    P1,
    P2,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::P1 => "p1",
            Variant::P2 => "p2",
        }
    }

    /// Latent sizes studied for this variant.
    pub fn latent_sizes(self) -> &'static [usize] {
        match self {
            Variant::P1 => &P1_LATENTS,
            Variant::P2 => &P2_LATENTS,
        }
    }

    pub fn uses_vision(self) -> bool {
        self == Variant::P2
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(Variant::P1),
            "p2" => Ok(Variant::P2),
            other => Err(format!("unknown architecture `{other}` (expected p1 or p2)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub variant: Variant,
    pub latent: usize,
    pub hidden: usize,
    pub conv_channels: usize,
}

impl ArchSpec {
    /// Standard widths. The latent size must be one of the variant's studied
    /// sizes unless `allow_any_latent` is set.
    pub fn new(variant: Variant, latent: usize, allow_any_latent: bool) -> Result<Self> {
        if !allow_any_latent && !variant.latent_sizes().contains(&latent) {
            return Err(ModelError::InvalidLatent {
                variant,
                latent,
                allowed: variant.latent_sizes(),
            });
        }
        let arch = ArchSpec {
            variant,
            latent,
            hidden: HIDDEN_WIDTH,
            conv_channels: CONV_CHANNELS,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.hidden == 0 || self.conv_channels == 0 {
            return Err(ModelError::InvalidArch(format!("{self:?} has a zero width")));
        }
        Ok(())
    }

    pub fn encoder_output_len(&self) -> usize {
        2 * self.latent
    }

    pub fn decoder_input_len(&self) -> usize {
        self.latent + ACTION_DIM
    }

    /// Side of the encoder's convolution output for a 64x64 frame.
    pub fn conv_side(&self) -> usize {
        conv_out(IMAGE_SIZE).expect("frame larger than kernel")
    }

    fn conv_features(&self) -> usize {
        self.conv_channels * self.conv_side() * self.conv_side()
    }

    /// Size of the observation fed to the encoder.
    pub fn observation_len(&self) -> usize {
        match self.variant {
            Variant::P1 => N_JOINTS,
            Variant::P2 => N_JOINTS + FRAME_LEN,
        }
    }

    pub fn label(&self) -> String {
        format!("{}-L{}", self.variant, self.latent)
    }
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    arch: ArchSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Train on the leading 90% and report validation on the trailing 10%.
    /// When false every transition is used for training.
    pub holdout: bool,
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 1024,
            max_epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
            holdout: true,
        }
    }

    /// Laptop-scale hyperparameters.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 50,
            ..Self::paper(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Reconstruction term of the loss, averaged over the epoch's examples.
    pub train_mse: f64,
    pub train_kl: f64,
    /// Reconstruction term on held-out transitions in mean mode; `None`
    /// without a held-out block.
    pub val_mse: Option<f64>,
}

impl EpochStats {
    pub fn total(&self) -> f64 {
        self.train_mse + self.train_kl
    }
}

pub fn write_history_csv<W: Write>(history: &[EpochStats], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,train_mse,train_kl,val_mse")?;
    for h in history {
        let val = h.val_mse.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", h.epoch, h.train_mse, h.train_kl, val)?;
    }
    Ok(())
}

/// Latent Gaussian produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
}

impl LatentDistribution {
    pub fn sigma(&self) -> Vec<f32> {
        self.logvar.iter().map(|l| (0.5 * l).exp()).collect()
    }
}

/// What the encoder sees at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBundle {
    pub finger_q: [f32; N_JOINTS],
    pub frame: Option<Frame>,
}

impl ObservationBundle {
    /// Observation of `s` for `variant`; `None` if P2 is asked for a sample
    /// without a frame.
    pub fn from_sample(s: &Sample, variant: Variant) -> Option<Self> {
        let frame = match variant {
            Variant::P1 => None,
            Variant::P2 => Some(s.frame()?),
        };
        Some(ObservationBundle {
            finger_q: s.finger_q,
            frame,
        })
    }

    pub fn variant(&self) -> Variant {
        if self.frame.is_some() {
            Variant::P2
        } else {
            Variant::P1
        }
    }
}

/// Next-step prediction in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub finger_q: [f32; N_JOINTS],
    pub forces: [f32; N_JOINTS],
    pub flow: Option<FlowFrame>,
}

/// Reconstruction term and KL of a batch, plus the loss node.
struct LossNodes {
    recon: NodeId,
    kl: NodeId,
    total: NodeId,
}

fn dense(g: &mut Graph<f32>, p: &ParamSet<f32>, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param_named(p, &format!("{name}.w"))?;
    let b = g.param_named(p, &format!("{name}.b"))?;
    Ok(g.linear(x, w, b)?)
}

fn dense_relu(g: &mut Graph<f32>, p: &ParamSet<f32>, name: &str, x: NodeId) -> Result<NodeId> {
    let y = dense(g, p, name, x)?;
    Ok(g.relu(y))
}

/// Sum over the channels of one example's squared error, averaged over the
/// batch.
fn per_example_sse(g: &mut Graph<f32>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let per_example = g.value(pred).len() / g.value(pred).shape()[0].max(1);
    let m = g.mse(pred, target)?;
    Ok(g.scale(m, per_example as f32))
}

/// Encoder `f`, predictive decoder `p` and the normalization they were
/// trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub arch: ArchSpec,
    pub params: ParamSet<f32>,
    pub stats: NormStats,
}

impl FusionModel {
    /// Seeded Glorot-uniform initialization.
    pub fn build(arch: ArchSpec, stats: NormStats, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (l, h, cc) = (arch.latent, arch.hidden, arch.conv_channels);
        let fc = |inputs, outputs| LayerSpec::FullyConnected { inputs, outputs };
        let enc_in = match arch.variant {
            Variant::P1 => N_JOINTS,
            Variant::P2 => {
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: cc,
                }
                .init_params("enc.conv", &mut p, &mut rng)?;
                arch.conv_features() + N_JOINTS
            }
        };
        fc(enc_in, h).init_params("enc.fc1", &mut p, &mut rng)?;
        fc(h, h).init_params("enc.fc2", &mut p, &mut rng)?;
        fc(h, 2 * l).init_params("enc.head", &mut p, &mut rng)?;
        fc(l + ACTION_DIM, h).init_params("dec.fc1", &mut p, &mut rng)?;
        fc(h, h).init_params("dec.fc2", &mut p, &mut rng)?;
        fc(h, TARGET_DIM).init_params("dec.out", &mut p, &mut rng)?;
        if arch.variant == Variant::P2 {
            fc(h, arch.conv_features()).init_params("dec.flow_fc", &mut p, &mut rng)?;
            LayerSpec::TransposedConv2d {
                in_channels: cc,
                out_channels: 3,
            }
            .init_params("dec.flow_deconv", &mut p, &mut rng)?;
        }
        Ok(FusionModel {
            arch,
            params: p,
            stats,
        })
    }

    /// Names of the encoder's tensors.
    pub fn encoder_params(&self) -> Vec<&str> {
        self.params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("enc."))
            .collect()
    }

    fn encoder_graph(&self, g: &mut Graph<f32>, inputs: Inputs) -> Result<(NodeId, NodeId)> {
        let p = &self.params;
        let b = inputs.q.shape()[0];
        let q = g.input(inputs.q);
        let x = match (self.arch.variant, inputs.frames) {
            (Variant::P1, None) => q,
            (Variant::P2, Some(frames)) => {
                let img = g.input(frames);
                let w = g.param_named(p, "enc.conv.w")?;
                let bias = g.param_named(p, "enc.conv.b")?;
                let c = g.conv2d(img, w, bias)?;
                let c = g.relu(c);
                let flat = g.reshape(c, vec![b, self.arch.conv_features()])?;
                g.concat(flat, q)?
            }
            (v, _) => return Err(ModelError::Modality(format!("inputs do not match {v}"))),
        };
        let h = dense_relu(g, p, "enc.fc1", x)?;
        let h = dense_relu(g, p, "enc.fc2", h)?;
        let stats = dense(g, p, "enc.head", h)?;
        let l = self.arch.latent;
        Ok((g.slice(stats, 0, l)?, g.slice(stats, l, l)?))
    }

    /// Returns the `[B, 40]` angle/force head and, for P2, the
    /// `[B, 3, 64, 64]` flow head.
    fn decoder_graph(&self, g: &mut Graph<f32>, z: NodeId, action: Tensor<f32>) -> Result<(NodeId, Option<NodeId>)> {
        let p = &self.params;
        let b = action.shape()[0];
        let a = g.input(action);
        let x = g.concat(z, a)?;
        let h = dense_relu(g, p, "dec.fc1", x)?;
        let h = dense_relu(g, p, "dec.fc2", h)?;
        let out = dense(g, p, "dec.out", h)?;
        let flow = if self.arch.variant == Variant::P2 {
            let f = dense_relu(g, p, "dec.flow_fc", h)?;
            let side = self.arch.conv_side();
            let f = g.reshape(f, vec![b, self.arch.conv_channels, side, side])?;
            let w = g.param_named(p, "dec.flow_deconv.w")?;
            let bias = g.param_named(p, "dec.flow_deconv.b")?;
            Some(g.conv_transpose2d(f, w, bias)?)
        } else {
            None
        };
        Ok((out, flow))
    }

    fn check_observations(&self, obs: &[ObservationBundle]) -> Result<()> {
        for (i, o) in obs.iter().enumerate() {
            if o.variant() != self.arch.variant {
                return Err(ModelError::Modality(format!(
                    "observation {i} is {} but the model is {}",
                    o.variant(),
                    self.arch.variant
                )));
            }
        }
        Ok(())
    }

    /// Deterministic latent distribution for each observation.
    pub fn encode_batch(&self, obs: &[ObservationBundle]) -> Result<Vec<LatentDistribution>> {
        self.check_observations(obs)?;
        let inputs = observation_inputs(&self.stats, obs, self.arch.variant.uses_vision())?;
        let mut g = Graph::new();
        let (mu, lv) = self.encoder_graph(&mut g, inputs)?;
        let l = self.arch.latent;
        Ok((0..obs.len())
            .map(|i| LatentDistribution {
                mu: g.value(mu).data()[i * l..(i + 1) * l].to_vec(),
                logvar: g.value(lv).data()[i * l..(i + 1) * l].to_vec(),
            })
            .collect())
    }

    pub fn encode(&self, obs: &ObservationBundle) -> Result<LatentDistribution> {
        Ok(self.encode_batch(std::slice::from_ref(obs))?.remove(0))
    }

    /// Decoder applied to latent samples; `eps = None` is mean mode.
    pub fn predict_batch(&self, obs: &[ObservationBundle], actions: &[Command], eps: Option<&[f32]>) -> Result<Vec<Prediction>> {
        self.check_observations(obs)?;
        if obs.len() != actions.len() {
            return Err(ModelError::Nn(NnError::Shape(format!(
                "{} observations but {} actions",
                obs.len(),
                actions.len()
            ))));
        }
        let mut action = Vec::with_capacity(actions.len() * ACTION_DIM);
        for a in actions {
            if !a.is_within_workspace() {
                return Err(ModelError::ActionOutOfRange(a.to_array()));
            }
            action.extend(a.normalized().map(|v| v as f32));
        }
        let inputs = observation_inputs(&self.stats, obs, self.arch.variant.uses_vision())?;
        let action = Tensor::new(vec![obs.len(), ACTION_DIM], action)?;
        let (out, flow, g) = self.forward(inputs, action, eps)?;
        Ok(self.unpack(&g, out, flow))
    }

    pub fn predict(&self, obs: &ObservationBundle, action: &Command, eps: Option<&[f32]>) -> Result<Prediction> {
        Ok(self
            .predict_batch(std::slice::from_ref(obs), std::slice::from_ref(action), eps)?
            .remove(0))
    }

    /// Mean-mode predictions for the transitions starting at `starts`.
    pub fn predict_transitions(&self, ds: &Dataset, starts: &[usize]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(starts.len());
        for chunk in starts.chunks(EVAL_CHUNK) {
            let batch = self.batch(ds, chunk)?;
            let (o, f, g) = self.forward(batch.inputs, batch.action, None)?;
            out.extend(self.unpack(&g, o, f));
        }
        Ok(out)
    }

    fn forward(&self, inputs: Inputs, action: Tensor<f32>, eps: Option<&[f32]>) -> Result<(NodeId, Option<NodeId>, Graph<f32>)> {
        let b = inputs.q.shape()[0];
        let mut g = Graph::new();
        let (mu, lv) = self.encoder_graph(&mut g, inputs)?;
        let eps = match eps {
            Some(e) => Tensor::new(vec![b, self.arch.latent], e.to_vec())?,
            None => Tensor::zeros(vec![b, self.arch.latent]),
        };
        let z = g.reparameterize(mu, lv, &eps)?;
        let (out, flow) = self.decoder_graph(&mut g, z, action)?;
        Ok((out, flow, g))
    }

    fn unpack(&self, g: &Graph<f32>, out: NodeId, flow: Option<NodeId>) -> Vec<Prediction> {
        let b = g.value(out).shape()[0];
        (0..b)
            .map(|i| {
                let row = g.value(out).row(i);
                let q = self.stats.destandardize(Q_OFFSET, &row[..N_JOINTS]);
                let f = self.stats.destandardize(FORCE_OFFSET, &row[N_JOINTS..]);
                Prediction {
                    finger_q: q.try_into().expect("20 angles"),
                    forces: f.try_into().expect("20 forces"),
                    flow: flow.map(|id| {
                        FlowFrame::from_values(chw_to_hwc(g.value(id).row(i))).expect("frame-sized flow")
                    }),
                }
            })
            .collect()
    }

    fn batch(&self, ds: &Dataset, starts: &[usize]) -> Result<Batch> {
        transition_batch(ds, &self.stats, starts, self.arch.variant.uses_vision())
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if self.arch.variant.uses_vision() && !ds.has_vision {
            return Err(ModelError::Modality(
                "P2 needs a dataset recorded with vision".into(),
            ));
        }
        if ds.len() < 2 {
            return Err(ModelError::TooSmall(format!(
                "{} samples; at least 2 are needed for one transition",
                ds.len()
            )));
        }
        Ok(())
    }

    fn loss_graph(&self, batch: Batch, eps: &Tensor<f32>) -> Result<(Graph<f32>, LossNodes)> {
        let mut g = Graph::new();
        let (mu, lv) = self.encoder_graph(&mut g, batch.inputs)?;
        let z = g.reparameterize(mu, lv, eps)?;
        let (out, flow) = self.decoder_graph(&mut g, z, batch.action)?;
        let target = g.input(batch.targets);
        let mut recon = per_example_sse(&mut g, out, target)?;
        if let (Some(f), Some(ft)) = (flow, batch.flow) {
            let ft = g.input(ft);
            let flow_loss = per_example_sse(&mut g, f, ft)?;
            recon = g.add(recon, flow_loss)?;
        }
        let kl = g.kl(mu, lv)?;
        let total = g.add(recon, kl)?;
        Ok((g, LossNodes { recon, kl, total }))
    }

    /// Mean reconstruction term over `starts` in mean mode.
    pub fn reconstruction_loss(&self, ds: &Dataset, starts: &[usize]) -> Result<f64> {
        let mut acc = 0.0;
        for chunk in starts.chunks(EVAL_CHUNK) {
            let eps = Tensor::zeros(vec![chunk.len(), self.arch.latent]);
            let (g, nodes) = self.loss_graph(self.batch(ds, chunk)?, &eps)?;
            acc += g.value(nodes.recon).data()[0] as f64 * chunk.len() as f64;
        }
        Ok(acc / starts.len().max(1) as f64)
    }

    /// Minimizes reconstruction error of standardized next-step targets plus
    /// KL to the standard normal. Deterministic for a given seed.
    pub fn train(&mut self, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
        self.train_with(ds, cfg, |_| {})
    }

    /// [`FusionModel::train`] with a callback after every epoch.
    pub fn train_with(&mut self, ds: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
        cfg.validate()?;
        self.check_dataset(ds)?;
        let (train, val) = if cfg.holdout {
            split_pairs(ds)
        } else {
            (pair_starts(ds, 0..ds.len()), Vec::new())
        };
        if train.is_empty() {
            return Err(ModelError::TooSmall("no training transitions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(cfg.adam(), &self.params);
        let mut order = train.clone();
        let mut history = Vec::with_capacity(cfg.max_epochs);
        for epoch in 1..=cfg.max_epochs {
            order.shuffle(&mut rng);
            let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let eps = normal_tensor(&mut rng, chunk.len(), self.arch.latent);
                let (g, nodes) = self.loss_graph(self.batch(ds, chunk)?, &eps)?;
                let (recon, kl) = (g.value(nodes.recon).data()[0], g.value(nodes.kl).data()[0]);
                if !(recon.is_finite() && kl.is_finite()) {
                    return Err(ModelError::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        detail: format!("reconstruction {recon}, kl {kl}, batch of {}", chunk.len()),
                    });
                }
                let grads = g.backward(nodes.total, &self.params)?;
                // The tape shares parameter storage; release it before updating.
                drop(g);
                adam.step(&mut self.params, &grads)?;
                recon_sum += recon as f64 * chunk.len() as f64;
                kl_sum += kl as f64 * chunk.len() as f64;
            }
            let n = order.len() as f64;
            let stats = EpochStats {
                epoch,
                train_mse: recon_sum / n,
                train_kl: kl_sum / n,
                val_mse: if val.is_empty() {
                    None
                } else {
                    Some(self.reconstruction_loss(ds, &val)?)
                },
            };
            on_epoch(&stats);
            history.push(stats);
        }
        Ok(history)
    }

    pub fn descriptor(&self) -> String {
        serde_json::to_string(&Descriptor {
            kind: "fusion".into(),
            arch: self.arch,
        })
        .expect("descriptor serializes")
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            descriptor: self.descriptor(),
            stats: self.stats.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_model_file(file: ModelFile) -> Result<Self> {
        let d: Descriptor = serde_json::from_str(&file.descriptor)
            .map_err(|e| ModelError::Descriptor(e.to_string()))?;
        if d.kind != "fusion" {
            return Err(ModelError::Descriptor(format!("kind `{}` is not a fusion model", d.kind)));
        }
        d.arch.validate()?;
        let reference = FusionModel::build(d.arch, file.stats.clone(), 0)?;
        let names = |p: &ParamSet<f32>| {
            p.iter()
                .map(|(n, t)| (n.to_owned(), t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        if names(&reference.params) != names(&file.params) {
            return Err(ModelError::Descriptor(
                "stored tensors do not match the architecture".into(),
            ));
        }
        Ok(FusionModel {
            arch: d.arch,
            params: file.params,
            stats: file.stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_params(&self.to_model_file(), path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_model_file(load_params(path)?)
    }
}

const EVAL_CHUNK: usize = 256;

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("matching length")
}

/// Decoder `r` mapping the frozen encoder's mean latent back to the
/// standardized finger angles of the same time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconModel {
    pub encoder: FusionModel,
    pub params: ParamSet<f32>,
}

impl ReconModel {
    fn decode_graph(&self, g: &mut Graph<f32>, latent: Tensor<f32>) -> Result<NodeId> {
        let p = &self.params;
        let z = g.input(latent);
        let h = dense_relu(g, p, "rec.fc1", z)?;
        let h = dense_relu(g, p, "rec.fc2", h)?;
        dense(g, p, "rec.out", h)
    }

    /// Reconstructed finger angles in radians.
    pub fn reconstruct_batch(&self, obs: &[ObservationBundle]) -> Result<Vec<[f32; N_JOINTS]>> {
        let latents = self.encoder.encode_batch(obs)?;
        let l = self.encoder.arch.latent;
        let mu: Vec<f32> = latents.iter().flat_map(|d| d.mu.iter().copied()).collect();
        let mut g = Graph::new();
        let out = self.decode_graph(&mut g, Tensor::new(vec![obs.len(), l], mu)?)?;
        Ok((0..obs.len())
            .map(|i| {
                let q = self.encoder.stats.destandardize(Q_OFFSET, g.value(out).row(i));
                q.try_into().expect("20 angles")
            })
            .collect())
    }

    /// Reconstructions of samples `range` of a dataset.
    pub fn reconstruct_samples(&self, ds: &Dataset, indices: &[usize]) -> Result<Vec<[f32; N_JOINTS]>> {
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_CHUNK) {
            let obs = observations(ds, chunk, self.encoder.arch.variant)?;
            out.extend(self.reconstruct_batch(&obs)?);
        }
        Ok(out)
    }
}

fn observations(ds: &Dataset, indices: &[usize], variant: Variant) -> Result<Vec<ObservationBundle>> {
    indices
        .iter()
        .map(|&i| {
            ObservationBundle::from_sample(&ds.samples[i], variant)
                .ok_or_else(|| ModelError::Modality(format!("sample {i} has no frame")))
        })
        .collect()
}

/// Mean latents of the frozen encoder with standardized finger angles as
/// targets.
fn latent_targets(m: &FusionModel, ds: &Dataset, indices: &[usize]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut mu = Vec::with_capacity(indices.len() * m.arch.latent);
    let mut q = Vec::with_capacity(indices.len() * N_JOINTS);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let obs = observations(ds, chunk, m.arch.variant)?;
        for d in m.encode_batch(&obs)? {
            mu.extend(d.mu);
        }
        for &i in chunk {
            q.extend(m.stats.standardize(Q_OFFSET, &ds.samples[i].finger_q));
        }
    }
    Ok((mu, q))
}

/// Trains a reconstruction decoder on the mean latents of `m`, whose
/// parameters are left untouched. Uses MSE only.
pub fn train_reconstruction(m: &FusionModel, ds: &Dataset, cfg: &TrainConfig) -> Result<(ReconModel, Vec<EpochStats>)> {
    cfg.validate()?;
    m.check_dataset(ds)?;
    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = if cfg.holdout {
        let split = ds.split_index();
        ((0..split).collect(), (split..ds.len()).collect())
    } else {
        ((0..ds.len()).collect(), Vec::new())
    };
    let l = m.arch.latent;
    let (train_mu, train_q) = latent_targets(m, ds, &train_idx)?;
    let (val_mu, val_q) = latent_targets(m, ds, &val_idx)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let h = m.arch.hidden;
    let fc = |inputs, outputs| LayerSpec::FullyConnected { inputs, outputs };
    fc(l, h).init_params("rec.fc1", &mut params, &mut rng)?;
    fc(h, h).init_params("rec.fc2", &mut params, &mut rng)?;
    fc(h, N_JOINTS).init_params("rec.out", &mut params, &mut rng)?;
    let mut model = ReconModel {
        encoder: m.clone(),
        params,
    };

    let gather = |src: &[f32], width: usize, rows: &[usize]| {
        let mut v = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            v.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        Tensor::new(vec![rows.len(), width], v)
    };
    let mse_of = |model: &ReconModel, mu: &[f32], q: &[f32], rows: &[usize]| -> Result<(Graph<f32>, NodeId)> {
        let mut g = Graph::new();
        let out = model.decode_graph(&mut g, gather(mu, l, rows)?)?;
        let t = g.input(gather(q, N_JOINTS, rows)?);
        let loss = g.mse(out, t)?;
        Ok((g, loss))
    };

    let mut adam = Adam::new(cfg.adam(), &model.params);
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let val_rows: Vec<usize> = (0..val_idx.len()).collect();
    let mut history = Vec::with_capacity(cfg.max_epochs);
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (g, loss) = mse_of(&model, &train_mu, &train_q, chunk)?;
            let v = g.value(loss).data()[0];
            if !v.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!("reconstruction mse {v}"),
                });
            }
            let grads = g.backward(loss, &model.params)?;
            drop(g);
            adam.step(&mut model.params, &grads)?;
            sum += v as f64 * chunk.len() as f64;
        }
        let val_mse = if val_rows.is_empty() {
            None
        } else {
            let mut acc = 0.0;
            for chunk in val_rows.chunks(EVAL_CHUNK) {
                let (g, loss) = mse_of(&model, &val_mu, &val_q, chunk)?;
                acc += g.value(loss).data()[0] as f64 * chunk.len() as f64;
            }
            Some(acc / val_rows.len() as f64)
        };
        history.push(EpochStats {
            epoch,
            train_mse: sum / order.len() as f64,
            train_kl: 0.0,
            val_mse,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests;
