//! Ensemble engine, reference runs on shared Brownian paths, error metrics,
//! strong-convergence fits and CSV output.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::girsanov::{mean_exp, CorrectionState};
use crate::sde::{path_increments, SdeSystem, TimeGrid, WienerIncrements};
use crate::steppers::{step_euler_maruyama, step_scheme, MilsteinTermMode, SchemeKind, SolverOptions};

/// Single-path integrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Integrator {
    EulerMaruyama,
    Milstein(SchemeKind),
}

impl Integrator {
    pub fn short_name(self) -> &'static str {
        match self {
            Integrator::EulerMaruyama => "em",
            Integrator::Milstein(s) => s.short_name(),
        }
    }
}

impl fmt::Display for Integrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// What produced an [`EnsembleResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunKind {
    Uncorrected(Integrator),
    Corrected(SchemeKind),
}

impl RunKind {
    pub fn is_corrected(self) -> bool {
        matches!(self, RunKind::Corrected(_))
    }

    /// `ml`, `siml`, `iml`, `em`, or `gc-` followed by the scheme.
    pub fn label(self) -> String {
        match self {
            RunKind::Uncorrected(i) => i.short_name().to_string(),
            RunKind::Corrected(s) => format!("gc-{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperConfig {
    pub integrator: Integrator,
    pub mode: MilsteinTermMode,
    pub solver: SolverOptions,
}

impl StepperConfig {
    pub fn milstein(scheme: SchemeKind) -> Self {
        Self {
            integrator: Integrator::Milstein(scheme),
            mode: MilsteinTermMode::default(),
            solver: SolverOptions::default(),
        }
    }

    pub fn euler_maruyama() -> Self {
        Self {
            integrator: Integrator::EulerMaruyama,
            mode: MilsteinTermMode::default(),
            solver: SolverOptions::default(),
        }
    }

    pub fn step(&self, sys: &SdeSystem, t_prev: f64, t_next: f64, x: &DVector<f64>, dw: &DVector<f64>) -> Result<DVector<f64>> {
        match self.integrator {
            Integrator::EulerMaruyama => step_euler_maruyama(sys, t_prev, x, t_next - t_prev, dw),
            Integrator::Milstein(s) => step_scheme(s, sys, t_prev, t_next, x, dw, self.mode, &self.solver),
        }
    }
}

/// Brownian resolution and output thinning of an ensemble run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleOptions {
    /// Increments are drawn on a grid this many times finer and summed, so
    /// runs at different step sizes can share one Brownian path.
    pub base_refine: usize,
    /// Record every `record_stride`-th grid node.
    pub record_stride: usize,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            base_refine: 1,
            record_stride: 1,
        }
    }
}

impl EnsembleOptions {
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.base_refine == 0 {
            return Err(Error::InvalidArgument("base_refine must be at least 1".into()));
        }
        if self.record_stride == 0 || grid.steps() % self.record_stride != 0 {
            return Err(Error::GridMismatch(format!(
                "record stride {} must be positive and divide {} steps",
                self.record_stride,
                grid.steps()
            )));
        }
        Ok(())
    }
}

/// Per-node ensemble statistics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    /// records × m; the corrected estimate for corrected runs.
    pub mean: DMatrix<f64>,
    /// records × m, sample variance with `N − 1` in the denominator (0 for N = 1).
    pub variance: DMatrix<f64>,
    /// Plain Q-ensemble mean (corrected runs only).
    pub raw_mean: Option<DMatrix<f64>>,
    /// `⟨Z_t⟩` per record (corrected runs only).
    pub mean_weight: Option<Vec<f64>>,
    /// Final `log Z_T` per path (corrected runs only).
    pub log_weights: Option<Vec<f64>>,
    pub kind: RunKind,
    pub n_paths: usize,
    pub master_seed: u64,
    pub meta: BTreeMap<String, String>,
}

impl EnsembleResult {
    pub fn m(&self) -> usize {
        self.mean.ncols()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn mean_component(&self, j: usize) -> Vec<f64> {
        self.mean.column(j).iter().copied().collect()
    }

    pub fn terminal_mean(&self) -> DVector<f64> {
        self.mean.row(self.len() - 1).transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.variance.iter()).all(|v| v.is_finite())
    }

    /// `t,mean_x1..mean_xm,var_x1..var_xm[,mean_weight]`
    pub fn csv_header(&self) -> String {
        let m = self.m();
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=m).map(|j| format!("mean_x{j}")));
        cols.extend((1..=m).map(|j| format!("var_x{j}")));
        if self.mean_weight.is_some() {
            cols.push("mean_weight".into());
        }
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for i in 0..self.len() {
            write!(out, "{}", fmt_float(self.times[i])).unwrap();
            for v in self.mean.row(i).iter().chain(self.variance.row(i).iter()) {
                write!(out, ",{}", fmt_float(*v)).unwrap();
            }
            if let Some(w) = &self.mean_weight {
                write!(out, ",{}", fmt_float(w[i])).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// `key=value` lines: run identity followed by `meta`.
    pub fn metadata(&self) -> String {
        let mut out = String::new();
        writeln!(out, "kind={}", self.kind.label()).unwrap();
        writeln!(out, "corrected={}", self.kind.is_corrected()).unwrap();
        writeln!(out, "n_paths={}", self.n_paths).unwrap();
        writeln!(out, "master_seed={}", self.master_seed).unwrap();
        writeln!(out, "records={}", self.len()).unwrap();
        for (k, v) in &self.meta {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// Write `<dir>/<name>.csv` and `<dir>/<name>.meta`, returning the CSV path.
    pub fn write(&self, dir: &Path, name: &str) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{name}.csv"));
        fs::write(&csv, self.to_csv())?;
        fs::write(dir.join(format!("{name}.meta")), self.metadata())?;
        Ok(csv)
    }
}

/// 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Mean and sample variance (`N − 1`) summed in path order. Sums are taken
/// relative to the first path, so identical paths reproduce it exactly.
pub fn ensemble_moments(states: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let Some(first) = states.first() else {
        return (DVector::zeros(0), DVector::zeros(0));
    };
    let m = first.len();
    let count = states.len();
    let mut shift = DVector::zeros(m);
    for s in states {
        shift += s - first;
    }
    let mean = first + shift / count as f64;
    let mut var = DVector::zeros(m);
    if count > 1 {
        for s in states {
            let d = s - &mean;
            var += d.component_mul(&d);
        }
        var /= (count - 1) as f64;
    }
    (mean, var)
}

pub(crate) struct Recorder {
    t0: f64,
    dt: f64,
    stride: usize,
    m: usize,
    corrected: bool,
    times: Vec<f64>,
    mean: Vec<DVector<f64>>,
    variance: Vec<DVector<f64>>,
    raw: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl Recorder {
    pub(crate) fn new(grid: &TimeGrid, stride: usize, m: usize, corrected: bool) -> Self {
        Self {
            t0: grid.t0(),
            dt: grid.dt(),
            stride,
            m,
            corrected,
            times: Vec::new(),
            mean: Vec::new(),
            variance: Vec::new(),
            raw: Vec::new(),
            weights: Vec::new(),
        }
    }

    fn push(&mut self, i: usize, mean: DVector<f64>, variance: DVector<f64>) {
        self.times.push(self.t0 + i as f64 * self.dt);
        self.mean.push(mean);
        self.variance.push(variance);
    }

    pub(crate) fn record_corrected(
        &mut self,
        i: usize,
        estimate: &DVector<f64>,
        paths: &[DVector<f64>],
        state: &CorrectionState,
    ) -> Result<()> {
        if i % self.stride != 0 {
            return Ok(());
        }
        let (raw, var) = ensemble_moments(paths);
        self.push(i, estimate.clone(), var);
        self.raw.push(raw);
        self.weights.push(state.mean_weight());
        Ok(())
    }

    fn record_paths(&mut self, i: usize, states: &[DVector<f64>]) {
        let (mean, var) = ensemble_moments(states);
        self.push(i, mean, var);
    }

    pub(crate) fn finish(
        self,
        kind: RunKind,
        n_paths: usize,
        master_seed: u64,
        opts: &EnsembleOptions,
        mut meta: BTreeMap<String, String>,
    ) -> EnsembleResult {
        let rows = |v: &[DVector<f64>]| DMatrix::from_fn(v.len(), self.m, |i, j| v[i][j]);
        meta.insert("t0".into(), fmt_float(self.t0));
        meta.insert("dt".into(), fmt_float(self.dt));
        meta.insert("base_refine".into(), opts.base_refine.to_string());
        meta.insert("record_stride".into(), opts.record_stride.to_string());
        EnsembleResult {
            times: self.times.clone(),
            mean: rows(&self.mean),
            variance: rows(&self.variance),
            raw_mean: self.corrected.then(|| rows(&self.raw)),
            mean_weight: self.corrected.then(|| self.weights.clone()),
            log_weights: None,
            kind,
            n_paths,
            master_seed,
            meta,
        }
    }
}

/// Integrate one path, returning the states at every `record_stride`-th node.
/// A non-finite state is reported as a blow-up at the offending step.
pub fn integrate_path(
    config: &StepperConfig,
    sys: &SdeSystem,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    inc: &WienerIncrements,
    record_stride: usize,
) -> Result<Vec<DVector<f64>>> {
    if inc.steps() != grid.steps() || inc.n() != sys.n() {
        return Err(Error::GridMismatch(format!(
            "increments are {}×{}, grid has {} steps and system {} factors",
            inc.n(),
            inc.steps(),
            grid.steps(),
            sys.n()
        )));
    }
    let stride = record_stride.max(1);
    let mut out = Vec::with_capacity(grid.steps() / stride + 1);
    let mut x = x0.clone();
    out.push(x.clone());
    for i in 0..grid.steps() {
        x = config
            .step(sys, grid.time(i), grid.time(i + 1), &x, &inc.step(i))
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite { step: Some(i + 1) },
                other => other,
            })?;
        if (i + 1) % stride == 0 {
            out.push(x.clone());
        }
    }
    Ok(out)
}

/// Uncorrected ensemble: `n_paths` seeded paths, statistics per recorded node.
pub fn run_ensemble(
    config: &StepperConfig,
    sys: &SdeSystem,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    n_paths: usize,
    master_seed: u64,
    opts: &EnsembleOptions,
) -> Result<EnsembleResult> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one path".into()));
    }
    if x0.len() != sys.m() {
        return Err(Error::Dimension(format!("initial state has {} entries, system has {}", x0.len(), sys.m())));
    }
    config.solver.validate()?;
    opts.validate(grid)?;
    sys.check_shapes(grid.t0(), x0)?;
    let label = config.integrator.short_name();

    let per_path: Vec<Vec<DVector<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let inc = path_increments(grid, sys.n(), master_seed, p as u64, opts.base_refine)?;
            integrate_path(config, sys, x0, grid, &inc, opts.record_stride).map_err(|e| match e {
                Error::NonFinite { step } => Error::BlowUp {
                    path: p,
                    step: step.unwrap_or(0),
                    scheme: label.to_string(),
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;

    let records = per_path[0].len();
    let mut recorder = Recorder::new(grid, opts.record_stride, sys.m(), false);
    let mut column = Vec::with_capacity(n_paths);
    for r in 0..records {
        column.clear();
        column.extend(per_path.iter().map(|p| p[r].clone()));
        recorder.record_paths(r * opts.record_stride, &column);
    }
    let mut meta = BTreeMap::new();
    meta.insert("milstein_mode".into(), config.mode.short_name().to_string());
    Ok(recorder.finish(RunKind::Uncorrected(config.integrator), n_paths, master_seed, opts, meta))
}

/// Explicit Milstein on a grid `refine_factor` times finer than `coarse`,
/// sampled at the coarse nodes. `opts.base_refine` is relative to the coarse
/// grid and must be a multiple of `refine_factor`; with the default of
/// `refine_factor` the coarse runs and the reference share Brownian paths when
/// the coarse runs use the same `base_refine`.
#[allow(clippy::too_many_arguments)]
pub fn reference_trajectory(
    sys: &SdeSystem,
    x0: &DVector<f64>,
    coarse: &TimeGrid,
    refine_factor: usize,
    n_paths: usize,
    master_seed: u64,
    mode: MilsteinTermMode,
    opts: &EnsembleOptions,
) -> Result<EnsembleResult> {
    if refine_factor == 0 {
        return Err(Error::InvalidArgument("refine factor must be at least 1".into()));
    }
    if opts.base_refine % refine_factor != 0 {
        return Err(Error::GridMismatch(format!(
            "base_refine {} is not a multiple of refine factor {refine_factor}",
            opts.base_refine
        )));
    }
    let fine = coarse.refine(refine_factor)?;
    let fine_opts = EnsembleOptions {
        base_refine: opts.base_refine / refine_factor,
        record_stride: refine_factor * opts.record_stride,
    };
    let config = StepperConfig {
        mode,
        ..StepperConfig::milstein(SchemeKind::Explicit)
    };
    let mut result = run_ensemble(&config, sys, x0, &fine, n_paths, master_seed, &fine_opts)?;
    result.meta.insert("refine_factor".into(), refine_factor.to_string());
    result.meta.insert("fine_dt".into(), fmt_float(fine.dt()));
    result.meta.insert("dt".into(), fmt_float(coarse.dt()));
    result.meta.insert("base_refine".into(), opts.base_refine.to_string());
    result.meta.insert("record_stride".into(), opts.record_stride.to_string());
    Ok(result)
}

fn same_times(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs())))
}

/// Root-mean-square over time of the difference of ensemble means.
pub fn trajectory_rmse(a: &EnsembleResult, b: &EnsembleResult, component: usize) -> Result<f64> {
    if !same_times(&a.times, &b.times) {
        return Err(Error::GridMismatch(format!(
            "time grids differ ({} vs {} records)",
            a.len(),
            b.len()
        )));
    }
    if component >= a.m() || component >= b.m() {
        return Err(Error::Dimension(format!("component {component} out of range")));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = (0..a.len())
        .map(|i| {
            let d = a.mean[(i, component)] - b.mean[(i, component)];
            d * d
        })
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorNorm {
    /// `E|X_T − X̂_T|`
    #[default]
    MeanAbsolute,
    /// `(E|X_T − X̂_T|²)^½`
    RootMeanSquare,
}

/// Exact terminal state as a function of the initial state, horizon and the
/// path's total Brownian increment.
pub type ExactSolution<'a> = &'a (dyn Fn(&DVector<f64>, f64, &DVector<f64>) -> DVector<f64> + Sync);

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// Strictly decreasing step sizes.
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub fitted_slope: f64,
    pub intercept: f64,
    /// Set when every error sits at round-off / solver-tolerance level, in
    /// which case the fit carries no information.
    pub at_floor: bool,
}

impl ConvergenceReport {
    /// `dt,error` rows and a trailing `# slope=…` comment.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dt,error\n");
        for (dt, e) in self.dts.iter().zip(&self.errors) {
            writeln!(out, "{},{}", fmt_float(*dt), fmt_float(*e)).unwrap();
        }
        writeln!(
            out,
            "# slope={} intercept={} at_floor={}",
            fmt_float(self.fitted_slope),
            fmt_float(self.intercept),
            self.at_floor
        )
        .unwrap();
        out
    }
}

/// Errors at or below this are treated as the numerical floor.
pub const ERROR_FLOOR: f64 = 1e-9;

/// Least-squares line through `(ln dt, ln error)`: `(slope, intercept)`.
pub fn fit_log_log(dts: &[f64], errors: &[f64]) -> (f64, f64) {
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Terminal strong error per step size on shared Brownian paths.
///
/// With `exact`, errors are measured against it. Without, the finest level is
/// the reference and is left out of the fit.
#[allow(clippy::too_many_arguments)]
pub fn strong_convergence_study(
    config: &StepperConfig,
    sys: &SdeSystem,
    x0: &DVector<f64>,
    t_end: f64,
    dts: &[f64],
    n_paths: usize,
    master_seed: u64,
    exact: Option<ExactSolution<'_>>,
    norm: ErrorNorm,
) -> Result<ConvergenceReport> {
    if dts.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 step sizes, got {}", dts.len())));
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let finest = *dts.last().unwrap();
    let mut refines = Vec::with_capacity(dts.len());
    for w in dts.windows(2) {
        if !(w[0] > w[1]) {
            return Err(Error::GridMismatch("step sizes must be strictly decreasing".into()));
        }
    }
    for &dt in dts {
        let r = dt / finest;
        let ri = r.round();
        if (r - ri).abs() > 1e-9 * r {
            return Err(Error::GridMismatch(format!("step size {dt} is not an integer multiple of {finest}")));
        }
        refines.push(ri as usize);
    }
    for w in refines.windows(2) {
        if w[0] % w[1] != 0 {
            return Err(Error::GridMismatch("step sizes are not nested by integer factors".into()));
        }
    }
    let fine_steps = (t_end / finest).round() as usize;
    if ((fine_steps as f64) * finest - t_end).abs() > 1e-9 * t_end {
        return Err(Error::GridMismatch(format!("horizon {t_end} is not a multiple of {finest}")));
    }
    let fine_grid = TimeGrid::new(0.0, finest, fine_steps)?;

    // per path: terminal state at each level and the total Brownian increment
    let terminals: Vec<(Vec<DVector<f64>>, DVector<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let base = path_increments(&fine_grid, sys.n(), master_seed, p as u64, 1)?;
            let w_total = DVector::from_fn(sys.n(), |l, _| base.data().row(l).sum());
            let mut finals = Vec::with_capacity(dts.len());
            for (&dt, &r) in dts.iter().zip(&refines) {
                let grid = TimeGrid::new(0.0, dt, fine_steps / r)?;
                let inc = crate::sde::coarsen(&base, r)?;
                let states = integrate_path(config, sys, x0, &grid, &inc, grid.steps().max(1))?;
                finals.push(states.last().unwrap().clone());
            }
            Ok((finals, w_total))
        })
        .collect::<Result<_>>()?;

    let levels = if exact.is_some() { dts.len() } else { dts.len() - 1 };
    let mut errors = vec![0.0; levels];
    for (finals, w) in &terminals {
        let target = match exact {
            Some(f) => f(x0, t_end, w),
            None => finals.last().unwrap().clone(),
        };
        for (k, err) in errors.iter_mut().enumerate() {
            let d = (&finals[k] - &target).norm();
            *err += match norm {
                ErrorNorm::MeanAbsolute => d,
                ErrorNorm::RootMeanSquare => d * d,
            };
        }
    }
    for e in errors.iter_mut() {
        *e /= n_paths as f64;
        if norm == ErrorNorm::RootMeanSquare {
            *e = e.sqrt();
        }
    }
    let used_dts = dts[..levels].to_vec();
    let at_floor = errors.iter().all(|e| *e <= ERROR_FLOOR);
    let (fitted_slope, intercept) = if errors.iter().all(|e| *e > 0.0) {
        fit_log_log(&used_dts, &errors)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ConvergenceReport {
        dts: used_dts,
        errors,
        fitted_slope,
        intercept,
        at_floor,
    })
}

/// Weighted mean `⟨Z⟩` from log-weights, stable against overflow of single terms.
pub fn mean_weight_from_logs(logs: &[f64]) -> f64 {
    mean_exp(logs)
}
