//! Latent-size sweep: one trained model per (scenario, variant, latent) cell,
//! evaluated on the held-out block with matched data and seeds.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::SimConfig;
use crate::dataset::{generate_commands, run_episode, Dataset, Scenario};
use crate::models::{
    split_pairs, train_reconstruction, write_history_csv, ArchSpec, EpochStats, FusionModel,
    ModelError, TrainConfig, Variant,
};
use crate::render::{frame_diff, hstack, save_ppm, IMAGE_SIZE};

use super::{evaluate, reconstruction_smape, EvalError, EvalReport};

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub scenarios: Vec<Scenario>,
    pub variants: Vec<Variant>,
    pub p1_latents: Vec<usize>,
    pub p2_latents: Vec<usize>,
    /// Arm commands per scenario; each yields ten samples.
    pub commands: usize,
    pub seed: u64,
    pub train: TrainConfig,
    /// Also train a reconstruction decoder per cell.
    pub reconstruction: bool,
    pub sim: SimConfig,
    /// Worker threads for independent cells.
    pub jobs: usize,
    /// Flow comparison images written per P2 cell.
    pub flow_examples: usize,
    /// Per-cell artifacts are written here when set.
    pub out_dir: Option<PathBuf>,
}

impl SweepConfig {
    pub fn desk(seed: u64) -> Self {
        SweepConfig {
            scenarios: vec![Scenario::Empty, Scenario::Cluttered],
            variants: vec![Variant::P1, Variant::P2],
            p1_latents: Variant::P1.latent_sizes().to_vec(),
            p2_latents: Variant::P2.latent_sizes().to_vec(),
            commands: 400,
            seed,
            train: TrainConfig::desk(seed),
            reconstruction: true,
            sim: SimConfig::default(),
            jobs: 1,
            flow_examples: 3,
            out_dir: None,
        }
    }

    fn latents(&self, v: Variant) -> &[usize] {
        match v {
            Variant::P1 => &self.p1_latents,
            Variant::P2 => &self.p2_latents,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub report: EvalReport,
    pub history: Vec<EpochStats>,
    pub recon_history: Vec<EpochStats>,
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        source: Box<SweepError>,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), SweepError> {
    let file = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Trains and evaluates one cell. Deterministic for a given dataset, arch
/// and training configuration.
pub fn run_cell(ds: &Dataset, arch: ArchSpec, train: &TrainConfig, reconstruction: bool) -> Result<(CellResult, FusionModel), SweepError> {
    let mut model = FusionModel::build(arch, ds.stats.clone(), train.seed)?;
    let history = model.train(ds, train)?;
    let (_, held_out) = split_pairs(ds);
    let mut report = evaluate(&model, ds, &held_out)?;
    let mut recon_history = Vec::new();
    if reconstruction {
        let (recon, h) = train_reconstruction(&model, ds, train)?;
        let idx: Vec<usize> = (ds.split_index()..ds.len()).collect();
        report.recon_smape = Some(reconstruction_smape(&recon, ds, &idx)?);
        recon_history = h;
    }
    Ok((
        CellResult {
            report,
            history,
            recon_history,
        },
        model,
    ))
}

/// Side-by-side frame, reference flow and predicted flow for held-out
/// transitions of a P2 model.
fn write_flow_triptychs(model: &FusionModel, ds: &Dataset, dir: &Path, count: usize) -> Result<(), SweepError> {
    let (_, held_out) = split_pairs(ds);
    if held_out.is_empty() || count == 0 {
        return Ok(());
    }
    let step = (held_out.len() / count).max(1);
    let picks: Vec<usize> = held_out.iter().step_by(step).take(count).copied().collect();
    let preds = model.predict_transitions(ds, &picks)?;
    for (k, (&t, p)) in picks.iter().zip(&preds).enumerate() {
        let (Some(f0), Some(f1)) = (ds.samples[t].frame(), ds.samples[t + 1].frame()) else {
            continue;
        };
        let Some(pred_flow) = &p.flow else { continue };
        let img = hstack(
            &[f0.to_bytes(), frame_diff(&f0, &f1).to_bytes(), pred_flow.to_bytes()],
            IMAGE_SIZE,
            IMAGE_SIZE,
        );
        let path = dir.join(format!("flow_{k}_t{t}.ppm"));
        if path.exists() {
            return Err(SweepError::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "refusing to overwrite"),
            });
        }
        save_ppm(&path, 3 * IMAGE_SIZE, IMAGE_SIZE, &img).map_err(io_err(&path))?;
    }
    Ok(())
}

fn cell_name(scenario: Scenario, arch: &ArchSpec) -> String {
    format!("{}-{}", scenario.name(), arch.label())
}

fn write_cell(dir: &Path, cell: &CellResult, model: &FusionModel, ds: &Dataset, flow_examples: usize) -> Result<(), SweepError> {
    fs::create_dir(dir).map_err(io_err(dir))?;
    write_file(&dir.join("report.csv"), |w| cell.report.write_csv(w))?;
    write_file(&dir.join("history.csv"), |w| write_history_csv(&cell.history, w))?;
    if !cell.recon_history.is_empty() {
        write_file(&dir.join("recon_history.csv"), |w| {
            write_history_csv(&cell.recon_history, w)
        })?;
    }
    model.save(&dir.join("model.ssm"))?;
    if model.arch.variant.uses_vision() {
        write_flow_triptychs(model, ds, dir, flow_examples)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<CellResult>,
}

impl SweepOutcome {
    pub fn reports(&self) -> Vec<EvalReport> {
        self.cells.iter().map(|c| c.report.clone()).collect()
    }
}

/// Generates one dataset per scenario (with frames if any P2 cell is
/// requested) and sweeps over them.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepOutcome, SweepError> {
    let vision = cfg.variants.contains(&Variant::P2);
    let commands = generate_commands(cfg.commands, cfg.seed);
    let datasets = cfg
        .scenarios
        .iter()
        .map(|&sc| run_episode(sc, &commands, &cfg.sim, cfg.seed, vision))
        .collect::<Result<Vec<_>, _>>()?;
    sweep_datasets(&datasets, cfg)
}

/// Sweeps over already generated datasets, one per scenario. Cells run on up
/// to `cfg.jobs` threads; results are returned in a fixed order regardless.
pub fn sweep_datasets(datasets: &[Dataset], cfg: &SweepConfig) -> Result<SweepOutcome, SweepError> {
    let mut jobs = Vec::new();
    for (di, ds) in datasets.iter().enumerate() {
        for &v in &cfg.variants {
            for &l in cfg.latents(v) {
                jobs.push((di, ArchSpec::new(v, l, true)?, ds.scenario));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellResult, SweepError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(di, arch, scenario)) = jobs.get(i) else { break };
        let ds = &datasets[di];
        let name = cell_name(scenario, &arch);
        log::info!("cell {name}: training ({}/{})", i + 1, jobs.len());
        let started = std::time::Instant::now();
        let res = run_cell(ds, arch, &cfg.train, cfg.reconstruction).and_then(|(cell, model)| {
            if let Some(out) = &cfg.out_dir {
                write_cell(&out.join(&name), &cell, &model, ds, cfg.flow_examples)?;
            }
            Ok(cell)
        });
        match &res {
            Ok(c) => log::info!("cell {name}: done in {:.1?}; {}", started.elapsed(), c.report.summary_line()),
            Err(e) => log::error!("cell {name}: {e}"),
        }
        let res = res.map_err(|e| SweepError::Cell {
            cell: name,
            source: Box::new(e),
        });
        results.lock().expect("no worker panicked")[i] = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 0..cfg.jobs.max(1).min(jobs.len().max(1)) {
            s.spawn(worker);
        }
    });
    let cells = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>, _>>()?;
    let outcome = SweepOutcome { cells };
    if let Some(out) = &cfg.out_dir {
        let reports = outcome.reports();
        write_file(&out.join("reports.csv"), |w| {
            writeln!(w, "{}", EvalReport::CSV_HEADER)?;
            for r in &reports {
                writeln!(w, "{}", r.csv_row())?;
            }
            Ok(())
        })?;
        write_file(&out.join("comparison.csv"), |w| write_comparison_csv(&reports, w))?;
        write_file(&out.join("summary.txt"), |w| write_summary(&reports, w))?;
    }
    Ok(outcome)
}

/// Cell of `variant` in `scenario` minimizing `key` (ties keep the smaller
/// latent). Cells where `key` is undefined are skipped.
pub fn best_by(
    reports: &[EvalReport],
    scenario: Scenario,
    variant: Variant,
    key: impl Fn(&EvalReport) -> Option<f64>,
) -> Option<&EvalReport> {
    reports
        .iter()
        .filter(|r| r.scenario == scenario && r.variant == variant)
        .filter_map(|r| key(r).map(|k| (k, r)))
        .fold(None, |best: Option<(f64, &EvalReport)>, (k, r)| match best {
            Some((bk, _)) if bk <= k => best,
            _ => Some((k, r)),
        })
        .map(|(_, r)| r)
}

/// Outcome of one single-versus-multi-modal comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaimCheck {
    pub scenario: Scenario,
    pub what: String,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub holds: bool,
}

impl ClaimCheck {
    fn new(scenario: Scenario, what: &str, p1: Option<f64>, p2: Option<f64>, holds: impl Fn(f64, f64) -> bool) -> Self {
        let ok = matches!((p1, p2), (Some(a), Some(b)) if holds(a, b));
        ClaimCheck {
            scenario,
            what: what.to_owned(),
            p1,
            p2,
            holds: ok,
        }
    }

    /// Force WMAPE of the best P2 cell is strictly below the best P1 cell and
    /// the same cells rank the same way on force R2.
    pub fn force(reports: &[EvalReport], scenario: Scenario) -> Vec<ClaimCheck> {
        let b1 = best_by(reports, scenario, Variant::P1, |r| r.force_wmape);
        let b2 = best_by(reports, scenario, Variant::P2, |r| r.force_wmape);
        vec![
            Self::new(
                scenario,
                "force WMAPE, best cell (lower is better)",
                b1.and_then(|r| r.force_wmape),
                b2.and_then(|r| r.force_wmape),
                |a, b| b < a,
            ),
            Self::new(
                scenario,
                "force R2 of the same cells (higher is better)",
                b1.and_then(|r| r.r2_force),
                b2.and_then(|r| r.r2_force),
                |a, b| b > a,
            ),
        ]
    }

    /// Mean finger-angle SMAPE of the best P2 cell is at most the best P1.
    pub fn proprioception(reports: &[EvalReport], scenario: Scenario) -> ClaimCheck {
        let key = |r: &EvalReport| Some(r.smape_q);
        let b1 = best_by(reports, scenario, Variant::P1, key);
        let b2 = best_by(reports, scenario, Variant::P2, key);
        Self::new(
            scenario,
            "finger angle SMAPE, best cell (lower is better)",
            b1.map(|r| r.smape_q),
            b2.map(|r| r.smape_q),
            |a, b| b <= a,
        )
    }

    /// Reconstruction SMAPE with latent sizes paired by rank within each
    /// variant's sorted list (smallest with smallest, and so on).
    pub fn reconstruction(reports: &[EvalReport], scenario: Scenario) -> Vec<ClaimCheck> {
        let sorted = |v: Variant| {
            let mut r: Vec<&EvalReport> = reports
                .iter()
                .filter(|r| r.scenario == scenario && r.variant == v)
                .collect();
            r.sort_by_key(|r| r.latent);
            r
        };
        sorted(Variant::P1)
            .into_iter()
            .zip(sorted(Variant::P2))
            .map(|(a, b)| {
                Self::new(
                    scenario,
                    &format!("reconstruction SMAPE, P1 L{} vs P2 L{}", a.latent, b.latent),
                    a.recon_smape,
                    b.recon_smape,
                    |x, y| y <= x,
                )
            })
            .collect()
    }

    pub fn line(&self) -> String {
        let o = |v: Option<f64>| v.map_or("n/a".to_owned(), |x| format!("{x:.4}"));
        format!(
            "{:<9} {:<48} P1 {:>10}  P2 {:>10}  {}",
            self.scenario.name(),
            self.what,
            o(self.p1),
            o(self.p2),
            if self.holds { "holds" } else { "does not hold" }
        )
    }
}

fn all_claims(reports: &[EvalReport]) -> Vec<ClaimCheck> {
    let mut scenarios: Vec<Scenario> = reports.iter().map(|r| r.scenario).collect();
    scenarios.sort_by_key(|s| s.code());
    scenarios.dedup();
    let mut out = Vec::new();
    for sc in scenarios {
        out.extend(ClaimCheck::force(reports, sc));
        out.push(ClaimCheck::proprioception(reports, sc));
        out.extend(ClaimCheck::reconstruction(reports, sc));
    }
    out
}

/// Cross-cell comparison table, one row per check.
pub fn write_comparison_csv<W: Write>(reports: &[EvalReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "scenario,comparison,p1,p2,holds")?;
    for c in all_claims(reports) {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", c.scenario, c.what.replace(',', ";"), o(c.p1), o(c.p2), c.holds)?;
    }
    Ok(())
}

pub fn write_summary<W: Write>(reports: &[EvalReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "Per-cell held-out results")?;
    for r in reports {
        writeln!(out, "  {}", r.summary_line())?;
    }
    writeln!(out)?;
    writeln!(out, "Single- versus multi-modal comparisons")?;
    for c in all_claims(reports) {
        writeln!(out, "  {}", c.line())?;
    }
    Ok(())
}
