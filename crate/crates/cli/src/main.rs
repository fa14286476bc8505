//! `gcmilstein` command-line driver.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical blow-up,
//! 3 I/O failure.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{display, CommandError};
use config::{ConfigError, Oscillator, PartialConfig, RhoSpec};

#[derive(Parser, Debug)]
#[command(name = "gcmilstein", version, about = "Milstein ensembles with Girsanov weak correction")]
struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one ensemble and write `<run_name>.csv` and `.meta`.
    Simulate(RunArgs),
    /// Explicit Milstein reference on a grid `--refine` times finer.
    Reference {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        refine: Option<usize>,
    },
    /// Strong convergence study over nested step sizes.
    Converge {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated, strictly decreasing step sizes.
        #[arg(long, value_delimiter = ',')]
        dts: Option<Vec<f64>>,
    },
    /// Reference, corrected and uncorrected runs for dvp, dh and gyro.
    PaperSuite {
        #[command(flatten)]
        run: RunArgs,
        /// Restrict to these oscillators (repeatable).
        #[arg(long)]
        only: Vec<String>,
    },
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    oscillator: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    corrected: Option<bool>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long = "T")]
    t_end: Option<f64>,
    #[arg(long = "N")]
    n_paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `identity` or a JSON matrix.
    #[arg(long)]
    rho: Option<String>,
    #[arg(long = "milstein-mode", alias = "milstein_mode")]
    milstein_mode: Option<String>,
    #[arg(long)]
    quadrature: Option<String>,
    #[arg(long = "spin-softening", alias = "spin_softening")]
    spin_softening: Option<String>,
    #[arg(long = "base-refine", alias = "base_refine")]
    base_refine: Option<usize>,
    #[arg(long = "record-stride", alias = "record_stride")]
    record_stride: Option<usize>,
    /// Oscillator parameter override `key=value` (repeatable).
    #[arg(long = "param")]
    params: Vec<String>,
    #[arg(long = "output-dir", alias = "output_dir")]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn layer(&self) -> Result<PartialConfig, ConfigError> {
        let params = if self.params.is_empty() {
            None
        } else {
            let mut map = BTreeMap::new();
            for kv in &self.params {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| ConfigError(format!("params: expected key=value, got '{kv}'")))?;
                let value: f64 = v
                    .parse()
                    .map_err(|_| ConfigError(format!("params.{k}: '{v}' is not a number")))?;
                map.insert(k.to_string(), value);
            }
            Some(map)
        };
        Ok(PartialConfig {
            oscillator: self.oscillator.clone(),
            params,
            spin_softening: self.spin_softening.clone(),
            scheme: self.scheme.clone(),
            corrected: self.corrected,
            dt: self.dt,
            t_end: self.t_end,
            n_paths: self.n_paths,
            seed: self.seed,
            rho: self.rho.as_deref().map(RhoSpec::parse).transpose()?,
            milstein_mode: self.milstein_mode.clone(),
            quadrature: self.quadrature.clone(),
            base_refine: self.base_refine,
            record_stride: self.record_stride,
            output_dir: self.output_dir.clone(),
            ..PartialConfig::default()
        })
    }

    /// Defaults, then the config file, then the environment, then flags.
    fn merged(&self, extra: PartialConfig) -> Result<PartialConfig, ConfigError> {
        let file = match &self.config {
            Some(path) => PartialConfig::from_file(path)?,
            None => PartialConfig::default(),
        };
        Ok(file.merge(PartialConfig::from_env()).merge(self.layer()?).merge(extra))
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CommandError> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.merged(PartialConfig::default())?.resolve()?;
            Ok(vec![commands::simulate(&cfg)?])
        }
        Command::Reference { run, refine } => {
            let cfg = run
                .merged(PartialConfig {
                    refine,
                    ..PartialConfig::default()
                })?
                .resolve()?;
            Ok(vec![commands::reference(&cfg)?])
        }
        Command::Converge { run, dts } => {
            let mut layer = run.merged(PartialConfig {
                dts,
                ..PartialConfig::default()
            })?;
            if layer.oscillator.is_none() {
                layer.oscillator = Some("gbm".into());
            }
            let cfg = layer.resolve()?;
            Ok(vec![commands::converge(&cfg)?])
        }
        Command::PaperSuite { run, only } => {
            if run.oscillator.is_some() {
                return Err(CommandError::Config("oscillator: use --only with paper-suite".into()));
            }
            let only = only
                .iter()
                .map(|s| match Oscillator::parse(s) {
                    Some(o) if o != Oscillator::Gbm => Ok(o),
                    _ => Err(CommandError::Config(format!("only: unknown value '{s}' (expected dvp, dh, gyro)"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let base = run.merged(PartialConfig::default())?;
            commands::paper_suite(&base, &only)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: threads: must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", display(&p));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
