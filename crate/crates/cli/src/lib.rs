//! Command-line driver for the conformation generation pipeline.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use confgen::Result;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "confgen", version, about = "Molecular conformation generation in distance space")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config file.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for per-molecule work.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-mode dataset.
    Synth {
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Dump expanded graphs and edge distances as JSONL.
    Preprocess {
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train the distance flow.
    TrainFlow(TrainArgs),
    /// Train the energy model against a trained flow.
    TrainEtm(TrainArgs),
    /// Generate conformations.
    Sample(SampleArgs),
    /// Score generated conformations against a reference dataset.
    Eval(EvalArgs),
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Flow checkpoint (energy training only).
    #[arg(long, value_name = "PATH")]
    pub flow: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Loss history CSV; defaults to `<checkpoint_dir>/<model>_history.csv`.
    #[arg(long, value_name = "PATH")]
    pub history: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    /// Optimizer steps to run.
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub flow: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub etm: Option<PathBuf>,
    /// Comma-separated molecule ids; all molecules when absent.
    #[arg(long, value_delimiter = ',', value_name = "IDS")]
    pub ids: Option<Vec<String>>,
    /// Samples per molecule.
    #[arg(long, value_name = "N")]
    pub n: Option<usize>,
    /// XYZ output.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Diagnostics JSONL output.
    #[arg(long, value_name = "PATH")]
    pub diagnostics: Option<PathBuf>,
    /// Run the energy-tilted Langevin stage.
    #[arg(long, value_name = "BOOL")]
    pub use_etm: Option<bool>,
    /// Langevin steps.
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// XYZ file written by `sample`.
    #[arg(long, value_name = "PATH")]
    pub generated: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub reference: Option<PathBuf>,
    /// JSON report output.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Optional per-edge MMD CSV output.
    #[arg(long, value_name = "PATH")]
    pub edge_csv: Option<PathBuf>,
    /// RMSD threshold in Å.
    #[arg(long, value_name = "F")]
    pub delta: Option<f64>,
    /// Comma-separated extra thresholds.
    #[arg(long, value_delimiter = ',', value_name = "F,..")]
    pub delta_sweep: Option<Vec<f64>>,
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

/// Loads the config file (or defaults) and applies the flags of `cli`.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    set(&mut cfg.jobs, &cli.jobs);
    let p = &mut cfg.paths;
    match &cli.command {
        Command::Synth { out } => set_path(&mut p.dataset, out),
        Command::Preprocess { dataset, .. } => set_path(&mut p.dataset, dataset),
        Command::TrainFlow(a) => {
            set_path(&mut p.dataset, &a.dataset);
            set_path(&mut p.checkpoint_dir, &a.checkpoint_dir);
            set(&mut cfg.flow_train.max_steps, &a.steps);
        }
        Command::TrainEtm(a) => {
            set_path(&mut p.dataset, &a.dataset);
            set_path(&mut p.flow_checkpoint, &a.flow);
            set_path(&mut p.checkpoint_dir, &a.checkpoint_dir);
            set(&mut cfg.etm_train.max_steps, &a.steps);
        }
        Command::Sample(a) => {
            set_path(&mut p.dataset, &a.dataset);
            set_path(&mut p.flow_checkpoint, &a.flow);
            set_path(&mut p.etm_checkpoint, &a.etm);
            set_path(&mut p.output, &a.out);
            set_path(&mut p.diagnostics, &a.diagnostics);
            set(&mut cfg.sample.ids, &a.ids);
            if a.n.is_some() {
                cfg.sample.n_per_molecule = a.n;
            }
            set(&mut cfg.sampler.use_etm, &a.use_etm);
            set(&mut cfg.sampler.langevin_steps, &a.steps);
        }
        Command::Eval(a) => {
            set_path(&mut p.generated, &a.generated);
            set_path(&mut p.reference, &a.reference);
            set_path(&mut p.report, &a.report);
            set_path(&mut p.edge_csv, &a.edge_csv);
            set(&mut cfg.metrics.delta, &a.delta);
            set(&mut cfg.metrics.delta_sweep, &a.delta_sweep);
        }
        Command::ShowConfig => {}
    }
    Ok(cfg)
}

fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Runs the selected command. Wall-clock times go to a `.log` file next to
/// the primary output so the outputs themselves stay reproducible.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    cfg.validate()?;
    let started = unix_seconds();
    let clock = Instant::now();
    let (name, written) = match &cli.command {
        Command::Synth { .. } => ("synth", commands::synth(&cfg)?),
        Command::Preprocess { out, .. } => ("preprocess", commands::preprocess(&cfg, out)?),
        Command::TrainFlow(a) => ("train-flow", commands::train_flow(&cfg, a.resume.as_deref(), a.history.as_deref())?),
        Command::TrainEtm(a) => ("train-etm", commands::train_etm(&cfg, a.resume.as_deref(), a.history.as_deref())?),
        Command::Sample(_) => ("sample", commands::sample(&cfg)?),
        Command::Eval(_) => ("eval", commands::eval(&cfg)?),
        Command::ShowConfig => unreachable!(),
    };
    if let Some(primary) = written.first() {
        let mut log_path = primary.clone().into_os_string();
        log_path.push(".log");
        let mut text = format!(
            "command={name}\nstarted_unix={started:.3}\nfinished_unix={:.3}\nelapsed_seconds={:.3}\n",
            unix_seconds(),
            clock.elapsed().as_secs_f64()
        );
        for w in &written {
            text.push_str(&format!("wrote={}\n", w.display()));
        }
        std::fs::write(log_path, text)?;
    }
    Ok(())
}
