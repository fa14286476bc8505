use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gcmilstein::experiments::{
    fmt_float, reference_trajectory, run_ensemble, strong_convergence_study, EnsembleOptions, EnsembleResult,
    ErrorNorm, Integrator, StepperConfig,
};
use gcmilstein::girsanov::{corrected_run, CorrectionConfig};
use gcmilstein::sde::TimeGrid;
use gcmilstein::steppers::SolverOptions;
use gcmilstein::Error;

use crate::config::{ConfigError, Oscillator, PartialConfig, RunConfig, Scheme};

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CommandError {
    Config(String),
    BlowUp(String),
    Io(String),
}

impl CommandError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CommandError::Config(_) => 1,
            CommandError::BlowUp(_) => 2,
            CommandError::Io(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CommandError::Config(m) | CommandError::BlowUp(m) | CommandError::Io(m) => m,
        }
    }
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        CommandError::Config(e.0)
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Io(e.to_string())
    }
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        match e {
            Error::BlowUp { .. }
            | Error::NonFinite { .. }
            | Error::NoConvergence { .. }
            | Error::SingularNewton(_)
            | Error::RankDeficientDiffusion { .. } => CommandError::BlowUp(e.to_string()),
            other => CommandError::Config(other.to_string()),
        }
    }
}

pub type CmdResult<T> = Result<T, CommandError>;

fn grid(cfg: &RunConfig) -> CmdResult<TimeGrid> {
    Ok(TimeGrid::covering(0.0, cfg.dt, cfg.t_end)?)
}

fn options(cfg: &RunConfig, base_refine: usize) -> EnsembleOptions {
    EnsembleOptions {
        base_refine,
        record_stride: cfg.record_stride,
    }
}

fn annotate(mut r: EnsembleResult, cfg: &RunConfig, command: &str, name: &str) -> EnsembleResult {
    r.meta.insert("command".into(), command.into());
    r.meta.insert("run_name".into(), name.into());
    r.meta.insert("oscillator".into(), cfg.oscillator.name().into());
    r.meta.insert("config".into(), cfg.to_json());
    r
}

/// Uncorrected or corrected ensemble per the configuration.
pub fn ensemble(cfg: &RunConfig) -> CmdResult<EnsembleResult> {
    let problem = cfg.problem()?;
    let grid = grid(cfg)?;
    let opts = options(cfg, cfg.base_refine);
    let mode = cfg.mode()?;
    let result = match (cfg.scheme.milstein(), cfg.corrected) {
        (Some(scheme), true) => {
            let correction = CorrectionConfig {
                scheme,
                mode,
                solver: SolverOptions::default(),
                gamma: cfg.rho.gamma(problem.sys.n())?,
                quadrature: cfg.quadrature_kind()?,
            };
            corrected_run(&problem.sys, &problem.x0, &grid, cfg.n_paths, cfg.seed, &correction, &opts)?
        }
        (scheme, _) => {
            let stepper = StepperConfig {
                integrator: scheme.map_or(Integrator::EulerMaruyama, Integrator::Milstein),
                mode,
                solver: SolverOptions::default(),
            };
            run_ensemble(&stepper, &problem.sys, &problem.x0, &grid, cfg.n_paths, cfg.seed, &opts)?
        }
    };
    Ok(result)
}

pub fn simulate(cfg: &RunConfig) -> CmdResult<PathBuf> {
    let name = cfg.run_name();
    let r = annotate(ensemble(cfg)?, cfg, "simulate", &name);
    Ok(r.write(&cfg.output_dir, &name)?)
}

/// Explicit Milstein reference `refine` times finer than `dt`, sampled on the
/// `dt` grid. The Brownian base resolution is `max(base_refine, refine)`.
pub fn reference_result(cfg: &RunConfig) -> CmdResult<EnsembleResult> {
    let problem = cfg.problem()?;
    let grid = grid(cfg)?;
    let base = if cfg.base_refine % cfg.refine == 0 { cfg.base_refine } else { cfg.refine };
    let r = reference_trajectory(
        &problem.sys,
        &problem.x0,
        &grid,
        cfg.refine,
        cfg.n_paths,
        cfg.seed,
        cfg.mode()?,
        &options(cfg, base),
    )?;
    Ok(r)
}

pub fn reference(cfg: &RunConfig) -> CmdResult<PathBuf> {
    let name = cfg.reference_name();
    let r = annotate(reference_result(cfg)?, cfg, "reference", &name);
    Ok(r.write(&cfg.output_dir, &name)?)
}

pub fn converge(cfg: &RunConfig) -> CmdResult<PathBuf> {
    if cfg.dts.len() < 3 {
        return Err(CommandError::Config(format!("dts: need at least 3 step sizes, got {}", cfg.dts.len())));
    }
    if cfg.corrected {
        return Err(CommandError::Config("corrected: convergence studies use the uncorrected schemes".into()));
    }
    let problem = cfg.problem()?;
    let stepper = StepperConfig {
        integrator: cfg.scheme.milstein().map_or(Integrator::EulerMaruyama, Integrator::Milstein),
        mode: cfg.mode()?,
        solver: SolverOptions::default(),
    };
    let report = strong_convergence_study(
        &stepper,
        &problem.sys,
        &problem.x0,
        cfg.t_end,
        &cfg.dts,
        cfg.n_paths,
        cfg.seed,
        problem.exact.as_deref(),
        ErrorNorm::MeanAbsolute,
    )
    .map_err(|e| match e {
        Error::GridMismatch(m) | Error::InvalidArgument(m) => CommandError::Config(format!("dts: {m}")),
        other => other.into(),
    })?;
    let name = cfg.convergence_name();
    fs::create_dir_all(&cfg.output_dir)?;
    let csv = cfg.output_dir.join(format!("{name}.csv"));
    fs::write(&csv, report.to_csv())?;
    let mut meta = String::new();
    writeln!(meta, "command=converge").unwrap();
    writeln!(meta, "run_name={name}").unwrap();
    writeln!(meta, "reference={}", if problem.exact.is_some() { "exact" } else { "finest" }).unwrap();
    writeln!(meta, "fitted_slope={}", fmt_float(report.fitted_slope)).unwrap();
    writeln!(meta, "config={}", cfg.to_json()).unwrap();
    fs::write(cfg.output_dir.join(format!("{name}.meta")), meta)?;
    Ok(csv)
}

/// Reference plus corrected and uncorrected runs of every scheme for each
/// oscillator, on shared Brownian paths, under `<output_dir>/<oscillator>/`.
/// A run that blows up is recorded in the manifest and the rest continue.
pub fn paper_suite(base: &PartialConfig, only: &[Oscillator]) -> CmdResult<Vec<PathBuf>> {
    let selected: Vec<Oscillator> = if only.is_empty() {
        vec![Oscillator::Dvp, Oscillator::Dh, Oscillator::Gyro]
    } else {
        only.to_vec()
    };
    let mut written = Vec::new();
    let mut blow_ups = Vec::new();
    for osc in selected {
        let layer = PartialConfig {
            oscillator: Some(osc.name().into()),
            ..PartialConfig::default()
        };
        let mut cfg = layer.merge(base.clone()).resolve()?;
        cfg.oscillator = osc;
        cfg.base_refine = cfg.refine;
        let root = cfg.output_dir.join(osc.name());
        cfg.output_dir = root.clone();
        let mut manifest: BTreeMap<String, String> = BTreeMap::new();
        let mut record = |name: String, outcome: CmdResult<PathBuf>| -> CmdResult<()> {
            match outcome {
                Ok(path) => {
                    manifest.insert(name, "ok".into());
                    written.push(path);
                }
                Err(CommandError::BlowUp(m)) => {
                    manifest.insert(name.clone(), format!("blow-up: {m}"));
                    blow_ups.push(format!("{name}: {m}"));
                }
                Err(e) => return Err(e),
            }
            Ok(())
        };
        record(cfg.reference_name(), reference(&cfg))?;
        for scheme in [Scheme::Ml, Scheme::Siml, Scheme::Iml] {
            for corrected in [false, true] {
                let run = RunConfig {
                    scheme,
                    corrected,
                    ..cfg.clone()
                };
                record(run.run_name(), simulate(&run))?;
            }
        }
        fs::create_dir_all(&root)?;
        let text: String = manifest.iter().map(|(k, v)| format!("{k} {v}\n")).collect();
        fs::write(root.join("manifest.txt"), text)?;
    }
    if blow_ups.is_empty() {
        Ok(written)
    } else {
        Err(CommandError::BlowUp(blow_ups.join("; ")))
    }
}

pub fn display(path: &Path) -> String {
    path.display().to_string()
}
