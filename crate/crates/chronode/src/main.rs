//! Command-line driver for the experiment pipelines.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chronode::cohort::Task;
use chronode::config::ExperimentConfig;
use chronode::error::Error;
use chronode::metrics::{render_table_json, render_table_text};
use chronode::model::HeadKind;
use chronode::run;
use chronode::ssl::{DeltaMode, Scheme};
use chronode::tensor::Precision;

#[derive(Parser)]
#[command(name = "chronode", version, about = "Time-aware neural-ODE pre-training and evaluation")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Numeric precision mode.
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Validate the configuration and print the resolved plan, then exit.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("unknown precision {other:?}, expected f32 or f64")),
    }
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "variable_interval" | "task2" => Ok(Task::VariableInterval),
        other => {
            if let Some(years) = other.strip_prefix("fixed:") {
                let years: f64 = years
                    .parse()
                    .map_err(|e| format!("bad horizon {years:?}: {e}"))?;
                Ok(Task::FixedHorizon { years })
            } else {
                Err(format!(
                    "unknown task {other:?}; use variable_interval or fixed:<years>"
                ))
            }
        }
    }
}

/// Config-file plus field overrides shared by the compute subcommands.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pre-training scheme.
    #[arg(long, value_enum)]
    scheme: Option<CliScheme>,
    /// Time-aware head.
    #[arg(long, value_enum)]
    head: Option<CliHead>,
    /// Downstream task: `variable_interval` or `fixed:<years>`.
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Augmentation-interval policy.
    #[arg(long, value_enum)]
    delta_mode: Option<CliDeltaMode>,
    /// Enable or disable the reverse-time consistency term.
    #[arg(long)]
    with_tc: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs_pretrain: Option<usize>,
    #[arg(long)]
    epochs_finetune: Option<usize>,
    #[arg(long)]
    n_patients: Option<usize>,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CliScheme {
    SimclrDpa,
    ByolTetc,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CliHead {
    Node,
    NodeRnn,
    NodeGru,
    NodeLstm,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CliDeltaMode {
    Aligned,
    Fixed,
    Unaligned,
}

impl ConfigArgs {
    fn resolve(&self, cli: &Cli) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_path(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(p) = cli.precision {
            cfg.precision = p;
        }
        if let Some(s) = self.scheme {
            cfg.scheme = match s {
                CliScheme::SimclrDpa => Scheme::SimclrDpa,
                CliScheme::ByolTetc => Scheme::ByolTetc,
            };
        }
        if let Some(h) = self.head {
            cfg.head = match h {
                CliHead::Node => HeadKind::Node,
                CliHead::NodeRnn => HeadKind::NodeRnn,
                CliHead::NodeGru => HeadKind::NodeGru,
                CliHead::NodeLstm => HeadKind::NodeLstm,
            };
        }
        if let Some(t) = self.task {
            cfg.task = t;
        }
        if let Some(d) = self.delta_mode {
            cfg.delta_mode = match d {
                CliDeltaMode::Aligned => DeltaMode::Aligned,
                CliDeltaMode::Fixed => DeltaMode::Fixed,
                CliDeltaMode::Unaligned => DeltaMode::Unaligned,
            };
        }
        if let Some(tc) = self.with_tc {
            cfg.with_tc = tc;
        }
        if let Some(lr) = self.lr {
            cfg.hyper.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.hyper.batch_size = b;
        }
        if let Some(e) = self.epochs_pretrain {
            cfg.hyper.epochs_pretrain = e;
        }
        if let Some(e) = self.epochs_finetune {
            cfg.hyper.epochs_finetune = e;
        }
        if let Some(n) = self.n_patients {
            cfg.cohort.n_patients = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write it as line-delimited JSON.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output path for the cohort file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pre-training of encoder, projector, and field.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory for checkpoint, curve, and reports.
        #[arg(long)]
        out: PathBuf,
        /// Optional cohort file; regenerated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Supervised fine-tuning on the downstream task.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Run directory of a pre-training checkpoint; scratch when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory containing the checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Optional directory for metrics.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the five-arm ablation grid on the base configuration.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run records into the result table.
    Report {
        /// Run directories (each containing run_record.json).
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Optional path for the JSON table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::GenData { config, out } => {
            let cfg = config.resolve(cli)?;
            if cli.dry_run {
                println!("{}", serde_json::to_string_pretty(&run::plan(&cfg)?)?);
                return Ok(());
            }
            let n = run::run_gen_data(&cfg, out)?;
            println!("wrote {n} trajectories to {}", out.display());
        }
        Command::Pretrain { config, out, data } => {
            let cfg = config.resolve(cli)?;
            if cli.dry_run {
                println!("{}", serde_json::to_string_pretty(&run::plan(&cfg)?)?);
                return Ok(());
            }
            let record = run::run_pretrain(&cfg, data.as_deref(), out)?;
            println!(
                "pretrain done: scheme={} steps={} max_grad_norm={:.4}",
                record.weights,
                record.stability.nan_events.len(),
                record.stability.max_grad_norm
            );
        }
        Command::Finetune {
            config,
            out,
            checkpoint,
            data,
        } => {
            let cfg = config.resolve(cli)?;
            if cli.dry_run {
                println!("{}", serde_json::to_string_pretty(&run::plan(&cfg)?)?);
                return Ok(());
            }
            let record = run::run_finetune(&cfg, checkpoint.as_deref(), data.as_deref(), out)?;
            match &record.metrics {
                Some(m) => println!(
                    "finetune done: head={} weights={} kappa={:?} auc2={:?}",
                    record.method, record.weights, m.kappa, m.auc2
                ),
                None => println!("finetune finished without metrics"),
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            data,
            out,
        } => {
            let cfg = config.resolve(cli)?;
            if cli.dry_run {
                println!("{}", serde_json::to_string_pretty(&run::plan(&cfg)?)?);
                return Ok(());
            }
            let metrics = run::run_evaluate(&cfg, checkpoint, data.as_deref(), out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Ablate { config, out } => {
            let cfg = config.resolve(cli)?;
            if cli.dry_run {
                println!("{}", serde_json::to_string_pretty(&run::plan(&cfg)?)?);
                return Ok(());
            }
            let rows = run::run_ablate(&cfg, out)?;
            println!("{}", render_table_text(&rows));
        }
        Command::Report { runs, out } => {
            let rows = run::report(runs)?;
            println!("{}", render_table_text(&rows));
            if let Some(path) = out {
                std::fs::write(path, render_table_json(&rows)?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
