//! The `softsense` command line.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.
//! Every artifact gets a JSON [`RunManifest`]: `name.manifest.json` next to
//! single-file outputs, `manifest.json` inside sweep run directories.

mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::SimConfig;
use crate::dataset::{generate_commands, run_episode, Dataset, Scenario};
use crate::metrics::{evaluate, reconstruction_smape, sweep, SweepConfig};
use crate::models::{
    pair_starts, split_pairs, train_reconstruction, write_history_csv, ArchSpec, FusionModel,
    ModelError, ObservationBundle, TrainConfig, Variant,
};
use crate::render::{frame_diff, hstack, write_ppm, IMAGE_SIZE};

pub use manifest::{sha256_hex, sidecar, write_once, FileDigest, RunManifest};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "softsense", version, about = "Simulated soft-finger perception experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the simulator and record a dataset.
    Simulate(SimulateArgs),
    /// Train a fusion model on a dataset.
    Train(TrainArgs),
    /// Score a trained model on a dataset.
    Eval(EvalArgs),
    /// Train and score every latent size of both architectures.
    Sweep(SweepArgs),
    /// Export one camera frame of a dataset.
    Render(RenderArgs),
    /// Export frame, reference flow and (optionally) predicted flow side by side.
    Flow(FlowArgs),
}

/// `desk`: 4k samples, batch 256, 50 epochs. `paper`: 40k samples,
/// batch 1024, 200 epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    Desk,
    Paper,
}

impl Preset {
    fn commands(self) -> usize {
        match self {
            Preset::Desk => 400,
            Preset::Paper => 4000,
        }
    }

    fn train(self, seed: u64) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(seed),
            Preset::Paper => TrainConfig::paper(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    /// Trailing 10% block.
    Heldout,
    All,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value = "empty")]
    scenario: Scenario,
    /// Number of random commands (10 samples each). Defaults to the preset.
    #[arg(long)]
    commands: Option<usize>,
    #[arg(long, env = "SOFTSENSE_SEED", default_value_t = 0)]
    seed: u64,
    /// Record camera frames (default).
    #[arg(long, overrides_with = "no_vision")]
    vision: bool,
    #[arg(long)]
    no_vision: bool,
    /// Simulation configuration (TOML). Defaults to the built-in one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    arch: Variant,
    #[arg(long)]
    latent: usize,
    /// Accept latent sizes outside the studied sets.
    #[arg(long)]
    allow_any_latent: bool,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, env = "SOFTSENSE_SEED", default_value_t = 0)]
    seed: u64,
    /// Train on every transition instead of holding out the last 10%.
    #[arg(long)]
    no_holdout: bool,
    /// Model file; the loss history goes to `<stem>.history.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "heldout")]
    split: Split,
    /// Also train a reconstruction decoder on the frozen encoder and report
    /// its SMAPE (uses the preset's training settings).
    #[arg(long)]
    reconstruction: bool,
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    #[arg(long, env = "SOFTSENSE_SEED", default_value_t = 0)]
    seed: u64,
    /// Report CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    #[arg(long, env = "SOFTSENSE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "empty,cluttered")]
    scenarios: Vec<Scenario>,
    #[arg(long, value_delimiter = ',', default_value = "p1,p2")]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,16")]
    p1_latents: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,64,128")]
    p2_latents: Vec<usize>,
    #[arg(long)]
    allow_any_latent: bool,
    #[arg(long)]
    commands: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Parallel cell workers.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Flow triptychs written per P2 cell.
    #[arg(long, default_value_t = 3)]
    flow_examples: usize,
    #[arg(long)]
    no_reconstruction: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent of the run directory `<timestamp>-seed<seed>`.
    #[arg(long, default_value = "runs")]
    out_root: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct FlowArgs {
    #[arg(long)]
    data: PathBuf,
    /// First sample of the transition.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// P2 model whose predicted flow is added as a third panel.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure of a subcommand, classified for the exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn model_err(e: ModelError) -> CliError {
    match e {
        ModelError::InvalidLatent { variant, latent, allowed } => CliError::Usage(format!(
            "--latent {latent} is not one of {allowed:?} for {variant}; pass --allow-any-latent to use it anyway"
        )),
        ModelError::InvalidConfig(_) | ModelError::InvalidArch(_) => {
            CliError::Usage(e.to_string())
        }
        other => runtime(other),
    }
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Messages go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .try_init();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, argv: &[String]) -> Result<(), CliError> {
    match cmd {
        Command::Simulate(a) => simulate(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Sweep(a) => run_sweep(a, argv),
        Command::Render(a) => render(a, argv),
        Command::Flow(a) => flow(a, argv),
    }
}

fn flags<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).expect("flags serialize")
}

fn load_config(path: Option<&Path>) -> Result<SimConfig, CliError> {
    match path {
        Some(p) => SimConfig::load(p).map_err(runtime),
        None => Ok(SimConfig::default()),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| CliError::Runtime(format!("cannot load dataset {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<FusionModel, CliError> {
    FusionModel::load(path).map_err(|e| CliError::Runtime(format!("cannot load model {}: {e}", path.display())))
}

/// Refuses to start when any output is already present, so a failing run
/// never leaves a mix of old and new files.
fn check_fresh(paths: &[&Path]) -> Result<(), CliError> {
    for p in paths {
        if p.exists() {
            return Err(CliError::Runtime(format!(
                "{} already exists; outputs are never overwritten",
                p.display()
            )));
        }
    }
    Ok(())
}

fn simulate(a: SimulateArgs, argv: &[String]) -> Result<(), CliError> {
    let commands = a.commands.unwrap_or(a.preset.commands());
    let vision = !a.no_vision;
    let cfg = load_config(a.config.as_deref())?;
    let manifest_path = sidecar(&a.out);
    check_fresh(&[&a.out, &manifest_path])?;
    log::info!("simulating {commands} commands in the {} scenario (seed {})", a.scenario, a.seed);
    let ds = run_episode(a.scenario, &generate_commands(commands, a.seed), &cfg, a.seed, vision).map_err(runtime)?;
    write_once(&a.out, &ds.to_bytes()).map_err(io_at(&a.out))?;
    let mut flags = flags(&a);
    flags["commands"] = commands.into();
    flags["vision"] = vision.into();
    let mut m = RunManifest::new("simulate", argv, flags, vec![a.seed]);
    m.config_digest = Some(sha256_hex(cfg.source().as_bytes()));
    if let Some(c) = &a.config {
        m.input(c).map_err(io_at(c))?;
    }
    m.output(&a.out);
    m.write(&manifest_path).map_err(io_at(&manifest_path))?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn history_path(out: &Path) -> PathBuf {
    out.with_extension("history.csv")
}

fn train(a: TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let arch = ArchSpec::new(a.arch, a.latent, a.allow_any_latent).map_err(model_err)?;
    let mut cfg = a.preset.train(a.seed);
    cfg.max_epochs = a.epochs.unwrap_or(cfg.max_epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.holdout = !a.no_holdout;
    cfg.validate().map_err(model_err)?;
    let (hist, manifest_path) = (history_path(&a.out), sidecar(&a.out));
    check_fresh(&[&a.out, &hist, &manifest_path])?;
    let ds = load_dataset(&a.data)?;
    let mut model = FusionModel::build(arch, ds.stats.clone(), a.seed).map_err(model_err)?;
    log::info!(
        "training {} on {} samples: lr {}, batch {}, {} epochs",
        arch.label(),
        ds.len(),
        cfg.learning_rate,
        cfg.batch_size,
        cfg.max_epochs
    );
    let history = model
        .train_with(&ds, &cfg, |e| {
            let val = e.val_mse.map(|v| format!(", val {v:.4}")).unwrap_or_default();
            log::info!("epoch {}: mse {:.4}, kl {:.4}{val}", e.epoch, e.train_mse, e.train_kl);
        })
        .map_err(model_err)?;
    write_once(&a.out, &model.to_model_file().to_bytes()).map_err(io_at(&a.out))?;
    let mut csv = Vec::new();
    write_history_csv(&history, &mut csv).map_err(runtime)?;
    write_once(&hist, &csv).map_err(io_at(&hist))?;

    let mut flags = flags(&a);
    flags["epochs"] = cfg.max_epochs.into();
    flags["batch_size"] = cfg.batch_size.into();
    flags["lr"] = cfg.learning_rate.into();
    flags["adam"] = serde_json::json!({ "beta1": cfg.beta1, "beta2": cfg.beta2, "eps": cfg.eps });
    let mut m = RunManifest::new("train", argv, flags, vec![a.seed]);
    m.config_digest = Some(sha256_hex(ds.config.as_bytes()));
    m.input(&a.data).map_err(io_at(&a.data))?;
    m.output(&a.out);
    m.output(&hist);
    m.write(&manifest_path).map_err(io_at(&manifest_path))?;
    println!("wrote {} and {}", a.out.display(), hist.display());
    Ok(())
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<(), CliError> {
    let manifest_path = sidecar(&a.out);
    check_fresh(&[&a.out, &manifest_path])?;
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let (starts, indices): (Vec<usize>, Vec<usize>) = match a.split {
        Split::Heldout => (split_pairs(&ds).1, (ds.split_index()..ds.len()).collect()),
        Split::All => (pair_starts(&ds, 0..ds.len()), (0..ds.len()).collect()),
    };
    let mut report = evaluate(&model, &ds, &starts).map_err(runtime)?;
    if a.reconstruction {
        let cfg = a.preset.train(a.seed);
        let (recon, _) = train_reconstruction(&model, &ds, &cfg).map_err(model_err)?;
        report.recon_smape = Some(reconstruction_smape(&recon, &ds, &indices).map_err(runtime)?);
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(runtime)?;
    write_once(&a.out, &csv).map_err(io_at(&a.out))?;
    let mut m = RunManifest::new("eval", argv, flags(&a), vec![a.seed]);
    m.config_digest = Some(sha256_hex(ds.config.as_bytes()));
    m.input(&a.model).map_err(io_at(&a.model))?;
    m.input(&a.data).map_err(io_at(&a.data))?;
    m.output(&a.out);
    m.write(&manifest_path).map_err(io_at(&manifest_path))?;
    println!("{}", report.summary_line());
    Ok(())
}

fn run_sweep(a: SweepArgs, argv: &[String]) -> Result<(), CliError> {
    if !a.allow_any_latent {
        for (v, ls) in [(Variant::P1, &a.p1_latents), (Variant::P2, &a.p2_latents)] {
            for &l in ls.iter() {
                ArchSpec::new(v, l, false).map_err(model_err)?;
            }
        }
    }
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let mut train = a.preset.train(a.seed);
    train.max_epochs = a.epochs.unwrap_or(train.max_epochs);
    train.batch_size = a.batch_size.unwrap_or(train.batch_size);
    train.validate().map_err(model_err)?;
    let sim = load_config(a.config.as_deref())?;
    let commands = a.commands.unwrap_or(a.preset.commands());

    std::fs::create_dir_all(&a.out_root).map_err(io_at(&a.out_root))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let run_dir = a.out_root.join(format!("{stamp}-seed{}", a.seed));
    std::fs::create_dir(&run_dir).map_err(io_at(&run_dir))?;

    let mut flags = flags(&a);
    flags["commands"] = commands.into();
    flags["epochs"] = train.max_epochs.into();
    flags["batch_size"] = train.batch_size.into();
    flags["lr"] = train.learning_rate.into();
    let mut m = RunManifest::new("sweep", argv, flags, vec![a.seed]);
    m.config_digest = Some(sha256_hex(sim.source().as_bytes()));
    if let Some(c) = &a.config {
        m.input(c).map_err(io_at(c))?;
    }
    for f in ["reports.csv", "comparison.csv", "summary.txt"] {
        m.output(&run_dir.join(f));
    }
    let manifest_path = run_dir.join("manifest.json");
    m.write(&manifest_path).map_err(io_at(&manifest_path))?;

    let cfg = SweepConfig {
        scenarios: a.scenarios.clone(),
        variants: a.variants.clone(),
        p1_latents: a.p1_latents.clone(),
        p2_latents: a.p2_latents.clone(),
        commands,
        seed: a.seed,
        train,
        reconstruction: !a.no_reconstruction,
        sim,
        jobs: a.jobs,
        flow_examples: a.flow_examples,
        out_dir: Some(run_dir.clone()),
    };
    log::info!("sweep into {}", run_dir.display());
    sweep(&cfg).map_err(runtime)?;
    let summary = std::fs::read_to_string(run_dir.join("summary.txt")).map_err(io_at(&run_dir))?;
    print!("{summary}");
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn ppm_bytes(width: usize, rgb: &[u8]) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    write_ppm(&mut out, width, IMAGE_SIZE, rgb).map_err(runtime)?;
    Ok(out)
}

fn render(a: RenderArgs, argv: &[String]) -> Result<(), CliError> {
    let manifest_path = sidecar(&a.out);
    check_fresh(&[&a.out, &manifest_path])?;
    let ds = load_dataset(&a.data)?;
    let sample = ds.samples.get(a.index).ok_or_else(|| {
        CliError::Runtime(format!("index {} is out of range for {} samples", a.index, ds.len()))
    })?;
    let frame = sample
        .frame()
        .ok_or_else(|| CliError::Runtime(format!("{} was recorded without vision", a.data.display())))?;
    write_once(&a.out, &ppm_bytes(IMAGE_SIZE, &frame.to_bytes())?).map_err(io_at(&a.out))?;
    let mut m = RunManifest::new("render", argv, flags(&a), vec![ds.seed]);
    m.config_digest = Some(sha256_hex(ds.config.as_bytes()));
    m.input(&a.data).map_err(io_at(&a.data))?;
    m.output(&a.out);
    m.write(&manifest_path).map_err(io_at(&manifest_path))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn flow(a: FlowArgs, argv: &[String]) -> Result<(), CliError> {
    let manifest_path = sidecar(&a.out);
    check_fresh(&[&a.out, &manifest_path])?;
    let ds = load_dataset(&a.data)?;
    if a.index + 1 >= ds.len() {
        return Err(CliError::Runtime(format!(
            "transition {} needs sample {} but the dataset has {}",
            a.index,
            a.index + 1,
            ds.len()
        )));
    }
    let (s0, s1) = (&ds.samples[a.index], &ds.samples[a.index + 1]);
    let (Some(f0), Some(f1)) = (s0.frame(), s1.frame()) else {
        return Err(CliError::Runtime(format!("{} was recorded without vision", a.data.display())));
    };
    let mut panels = vec![f0.to_bytes(), frame_diff(&f0, &f1).to_bytes()];
    if let Some(path) = &a.model {
        let model = load_model(path)?;
        let obs = ObservationBundle::from_sample(s0, Variant::P2).expect("frame checked above");
        let pred = model.predict(&obs, &s1.command(), None).map_err(model_err)?;
        let flow = pred
            .flow
            .ok_or_else(|| CliError::Runtime(format!("{} is not a P2 model", path.display())))?;
        panels.push(flow.to_bytes());
    }
    let width = panels.len() * IMAGE_SIZE;
    let img = hstack(&panels, IMAGE_SIZE, IMAGE_SIZE);
    write_once(&a.out, &ppm_bytes(width, &img)?).map_err(io_at(&a.out))?;
    let mut m = RunManifest::new("flow", argv, flags(&a), vec![ds.seed]);
    m.config_digest = Some(sha256_hex(ds.config.as_bytes()));
    m.input(&a.data).map_err(io_at(&a.data))?;
    if let Some(p) = &a.model {
        m.input(p).map_err(io_at(p))?;
    }
    m.output(&a.out);
    m.write(&manifest_path).map_err(io_at(&manifest_path))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
