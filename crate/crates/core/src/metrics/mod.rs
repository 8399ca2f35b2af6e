//! Error metrics, force statistics, evaluation reports and the latent-size
//! sweep.

mod sweep;

use std::io::Write;

use thiserror::Error;

use crate::dataset::{Dataset, Scenario, N_JOINTS};
use crate::models::{FusionModel, ModelError, ReconModel, Variant};

pub use sweep::{
    best_by, run_cell, sweep, sweep_datasets, write_comparison_csv, write_summary, CellResult,
    ClaimCheck, SweepConfig, SweepError, SweepOutcome,
};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric needs at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("actual and predicted lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("sum of |actual| is zero; WMAPE is undefined")]
    ZeroDenominator,
    #[error("actual values have zero variance; R2 is undefined")]
    DegenerateVariance,
}

fn check(actual: &[f64], predicted: &[f64], needed: usize) -> Result<(), MetricError> {
    if actual.len() != predicted.len() {
        return Err(MetricError::LengthMismatch(actual.len(), predicted.len()));
    }
    if actual.len() < needed {
        return Err(MetricError::TooFew {
            needed,
            got: actual.len(),
        });
    }
    Ok(())
}

/// Symmetric mean absolute percentage error in percent. Terms where both
/// values are zero contribute zero.
pub fn smape(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricError> {
    check(actual, predicted, 1)?;
    let sum: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(&a, &p)| {
            let d = a.abs() + p.abs();
            if d == 0.0 {
                0.0
            } else {
                (p - a).abs() / d
            }
        })
        .sum();
    Ok(100.0 * sum / actual.len() as f64)
}

/// Weighted mean absolute percentage error in percent.
pub fn wmape(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricError> {
    check(actual, predicted, 1)?;
    let den: f64 = actual.iter().map(|a| a.abs()).sum();
    if den == 0.0 {
        return Err(MetricError::ZeroDenominator);
    }
    let num: f64 = actual.iter().zip(predicted).map(|(a, p)| (p - a).abs()).sum();
    Ok(100.0 * num / den)
}

/// Coefficient of determination.
pub fn r2(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricError> {
    check(actual, predicted, 2)?;
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::DegenerateVariance);
    }
    let ss_res: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p) * (a - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Per-link contact force statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkForceStats {
    pub mean: f64,
    pub max: f64,
    /// Fraction of samples with a strictly positive force.
    pub nonzero_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForceTable {
    pub links: Vec<LinkForceStats>,
    /// Links `0..10`, nearest the mount.
    pub proximal_mean: f64,
    /// Links `10..20`, toward the tip.
    pub distal_mean: f64,
    pub samples: usize,
}

impl ForceTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "link,mean_n,max_n,nonzero_rate")?;
        for (i, l) in self.links.iter().enumerate() {
            writeln!(out, "{i},{},{},{}", l.mean, l.max, l.nonzero_rate)?;
        }
        writeln!(out, "proximal,{},,", self.proximal_mean)?;
        writeln!(out, "distal,{},,", self.distal_mean)
    }
}

/// Force distribution over the links of the finger. An empty dataset yields
/// an all-zero table.
pub fn force_histogram(ds: &Dataset) -> ForceTable {
    let n = ds.len();
    let mut sum = [0.0f64; N_JOINTS];
    let mut max = [0.0f64; N_JOINTS];
    let mut nonzero = [0usize; N_JOINTS];
    for s in &ds.samples {
        for (j, &f) in s.forces.iter().enumerate() {
            let f = f as f64;
            sum[j] += f;
            max[j] = max[j].max(f);
            nonzero[j] += (f > 0.0) as usize;
        }
    }
    let denom = n.max(1) as f64;
    let links: Vec<LinkForceStats> = (0..N_JOINTS)
        .map(|j| LinkForceStats {
            mean: sum[j] / denom,
            max: max[j],
            nonzero_rate: nonzero[j] as f64 / denom,
        })
        .collect();
    let half = N_JOINTS / 2;
    let group_mean = |r: std::ops::Range<usize>| {
        let len = r.len() as f64;
        links[r].iter().map(|l| l.mean).sum::<f64>() / len
    };
    ForceTable {
        proximal_mean: group_mean(0..half),
        distal_mean: group_mean(half..N_JOINTS),
        links,
        samples: n,
    }
}

/// Held-out evaluation of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub variant: Variant,
    pub latent: usize,
    /// SMAPE of flexion/extension joints (even indices), per channel then
    /// averaged.
    pub smape_fe: f64,
    /// SMAPE of adduction/abduction joints (odd indices).
    pub smape_aa: f64,
    /// Mean SMAPE over all 20 joint channels.
    pub smape_q: f64,
    /// WMAPE over every link force of every evaluated transition.
    pub force_wmape: Option<f64>,
    pub r2_fe: Option<f64>,
    pub r2_aa: Option<f64>,
    pub r2_force: Option<f64>,
    /// SMAPE of the most distal joint pair.
    pub fingertip_smape: f64,
    /// WMAPE of the most distal link force.
    pub fingertip_force_wmape: Option<f64>,
    /// SMAPE of finger angles reconstructed from the frozen latent.
    pub recon_smape: Option<f64>,
    pub n: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "scenario,variant,latent,n,smape_fe,smape_aa,smape_q,force_wmape,r2_fe,r2_aa,r2_force,fingertip_smape,fingertip_force_wmape,recon_smape";

    pub fn csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.scenario,
            self.variant,
            self.latent,
            self.n,
            self.smape_fe,
            self.smape_aa,
            self.smape_q,
            o(self.force_wmape),
            o(self.r2_fe),
            o(self.r2_aa),
            o(self.r2_force),
            self.fingertip_smape,
            o(self.fingertip_force_wmape),
            o(self.recon_smape),
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        writeln!(out, "{}", self.csv_row())
    }

    /// Range invariants every report must satisfy.
    pub fn check_ranges(&self) -> Result<(), String> {
        let pct = |name: &str, v: f64| {
            if (0.0..=100.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} = {v} is outside [0, 100]"))
            }
        };
        pct("smape_fe", self.smape_fe)?;
        pct("smape_aa", self.smape_aa)?;
        pct("smape_q", self.smape_q)?;
        pct("fingertip_smape", self.fingertip_smape)?;
        if let Some(r) = self.recon_smape {
            pct("recon_smape", r)?;
        }
        for (name, v) in [
            ("force_wmape", self.force_wmape),
            ("fingertip_force_wmape", self.fingertip_force_wmape),
        ] {
            if let Some(v) = v {
                if v.is_nan() || v < 0.0 {
                    return Err(format!("{name} = {v} is not a non-negative number"));
                }
            }
        }
        for (name, v) in [("r2_fe", self.r2_fe), ("r2_aa", self.r2_aa), ("r2_force", self.r2_force)] {
            if let Some(v) = v {
                if v.is_nan() || v > 1.0 {
                    return Err(format!("{name} = {v} is not at most 1"));
                }
            }
        }
        Ok(())
    }

    pub fn summary_line(&self) -> String {
        let o = |v: Option<f64>| v.map_or("n/a".to_owned(), |x| format!("{x:.3}"));
        format!(
            "{:<9} {}-L{:<4} n={:<5} SMAPE fe {:.2}% aa {:.2}% all {:.2}% tip {:.2}% | force WMAPE {} R2 {} | R2 fe {} aa {} | recon SMAPE {}",
            self.scenario.name(),
            self.variant,
            self.latent,
            self.n,
            self.smape_fe,
            self.smape_aa,
            self.smape_q,
            self.fingertip_smape,
            o(self.force_wmape),
            o(self.r2_force),
            o(self.r2_fe),
            o(self.r2_aa),
            o(self.recon_smape),
        )
    }
}

/// Per-channel SMAPE averaged over `channels`.
fn channel_smape(actual: &[[f32; N_JOINTS]], predicted: &[[f32; N_JOINTS]], channels: &[usize]) -> Result<f64, MetricError> {
    let mut acc = 0.0;
    for &c in channels {
        let a: Vec<f64> = actual.iter().map(|r| r[c] as f64).collect();
        let p: Vec<f64> = predicted.iter().map(|r| r[c] as f64).collect();
        acc += smape(&a, &p)?;
    }
    Ok(acc / channels.len() as f64)
}

/// Values of `channels` from every row, flattened.
fn pooled(rows: &[[f32; N_JOINTS]], channels: &[usize]) -> Vec<f64> {
    rows.iter()
        .flat_map(|r| channels.iter().map(move |&c| r[c] as f64))
        .collect()
}

pub fn fe_channels() -> Vec<usize> {
    (0..N_JOINTS).step_by(2).collect()
}

pub fn aa_channels() -> Vec<usize> {
    (1..N_JOINTS).step_by(2).collect()
}

/// Scores next-step predictions against the recorded next samples.
pub fn score(
    scenario: Scenario,
    variant: Variant,
    latent: usize,
    actual_q: &[[f32; N_JOINTS]],
    pred_q: &[[f32; N_JOINTS]],
    actual_f: &[[f32; N_JOINTS]],
    pred_f: &[[f32; N_JOINTS]],
) -> Result<EvalReport, MetricError> {
    let all: Vec<usize> = (0..N_JOINTS).collect();
    let (fe, aa) = (fe_channels(), aa_channels());
    let tip_pair = [N_JOINTS - 2, N_JOINTS - 1];
    let tip_link = [N_JOINTS - 1];
    let ok = |r: Result<f64, MetricError>| r.ok();
    Ok(EvalReport {
        scenario,
        variant,
        latent,
        smape_fe: channel_smape(actual_q, pred_q, &fe)?,
        smape_aa: channel_smape(actual_q, pred_q, &aa)?,
        smape_q: channel_smape(actual_q, pred_q, &all)?,
        force_wmape: ok(wmape(&pooled(actual_f, &all), &pooled(pred_f, &all))),
        r2_fe: ok(r2(&pooled(actual_q, &fe), &pooled(pred_q, &fe))),
        r2_aa: ok(r2(&pooled(actual_q, &aa), &pooled(pred_q, &aa))),
        r2_force: ok(r2(&pooled(actual_f, &all), &pooled(pred_f, &all))),
        fingertip_smape: channel_smape(actual_q, pred_q, &tip_pair)?,
        fingertip_force_wmape: ok(wmape(&pooled(actual_f, &tip_link), &pooled(pred_f, &tip_link))),
        recon_smape: None,
        n: actual_q.len(),
    })
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("no transitions to evaluate")]
    Empty,
}

/// Mean-mode evaluation of `model` on the transitions starting at `starts`.
pub fn evaluate(model: &FusionModel, ds: &Dataset, starts: &[usize]) -> Result<EvalReport, EvalError> {
    if starts.is_empty() {
        return Err(EvalError::Empty);
    }
    let preds = model.predict_transitions(ds, starts)?;
    let next = |t: usize| &ds.samples[t + 1];
    let actual_q: Vec<_> = starts.iter().map(|&t| next(t).finger_q).collect();
    let actual_f: Vec<_> = starts.iter().map(|&t| next(t).forces).collect();
    let pred_q: Vec<_> = preds.iter().map(|p| p.finger_q).collect();
    let pred_f: Vec<_> = preds.iter().map(|p| p.forces).collect();
    Ok(score(
        ds.scenario,
        model.arch.variant,
        model.arch.latent,
        &actual_q,
        &pred_q,
        &actual_f,
        &pred_f,
    )?)
}

/// Mean per-channel SMAPE of reconstructed finger angles for `indices`.
pub fn reconstruction_smape(recon: &ReconModel, ds: &Dataset, indices: &[usize]) -> Result<f64, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::Empty);
    }
    let pred = recon.reconstruct_samples(ds, indices)?;
    let actual: Vec<_> = indices.iter().map(|&i| ds.samples[i].finger_q).collect();
    let all: Vec<usize> = (0..N_JOINTS).collect();
    Ok(channel_smape(&actual, &pred, &all)?)
}
