//! Girsanov weak correction of the Milstein schemes.
//!
//! Each path is advanced under the measure Q with the modified noise
//! `dW̃ = e + dW + (Milstein residual)`, where `e` is the discretization error
//! of the scheme projected to noise space. The normalized estimate `π_t` of
//! every state component is then updated with the Kushner–Stratonovich
//! recursion, whose ensemble cross-covariance term is the additive correction.
//! All γ quantities are carried in increment form `γΔt`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::experiments::{EnsembleOptions, EnsembleResult, Recorder, RunKind};
use crate::sde::{column_sums, condition_number, path_increments, SdeSystem, TimeGrid, CONDITION_LIMIT};
use crate::steppers::{
    apply_milstein, milstein_term, milstein_term_mixed, step_iml_from, step_ml, step_scheme, step_siml_from,
    MilsteinTermMode, SchemeKind, SolverOptions,
};

/// Invertible `ρ` (n×n) in `γ = ρ⁻¹(e/dt + ½ f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaParams {
    rho: DMatrix<f64>,
    rho_inv: DMatrix<f64>,
}

impl GammaParams {
    pub fn identity(n: usize) -> Self {
        Self {
            rho: DMatrix::identity(n, n),
            rho_inv: DMatrix::identity(n, n),
        }
    }

    pub fn new(rho: DMatrix<f64>) -> Result<Self> {
        if !rho.is_square() || rho.nrows() == 0 {
            return Err(Error::Dimension(format!("rho must be square and non-empty, got {:?}", rho.shape())));
        }
        let condition = condition_number(&rho);
        if !(condition < CONDITION_LIMIT) {
            return Err(Error::IllConditioned { what: "rho", condition });
        }
        let rho_inv = rho.clone().try_inverse().ok_or(Error::IllConditioned { what: "rho", condition })?;
        Ok(Self { rho, rho_inv })
    }

    pub fn rho(&self) -> &DMatrix<f64> {
        &self.rho
    }

    pub fn n(&self) -> usize {
        self.rho.nrows()
    }
}

/// Quadrature for `∫ (h(s, X_s) − h(t*, X_{t*})) ds` over one step, using the
/// step's start point and the uncorrected predictor as the only known states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorQuadrature {
    /// Whole-step difference at the predictor: `h(t_i, X̂) − h(t*, X*)`.
    RightPoint,
    /// Average of both endpoint differences.
    #[default]
    Trapezoid,
}

impl ErrorQuadrature {
    pub fn short_name(self) -> &'static str {
        match self {
            ErrorQuadrature::RightPoint => "right-point",
            ErrorQuadrature::Trapezoid => "trapezoid",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        match s {
            "right-point" => Some(ErrorQuadrature::RightPoint),
            "trapezoid" => Some(ErrorQuadrature::Trapezoid),
            _ => None,
        }
    }
}

/// Start and end states of one step. For a corrected step the end state is
/// the predictor (error process) or the Q-path state (generators).
#[derive(Debug, Clone, Copy)]
pub struct StepPoints<'a> {
    pub t_prev: f64,
    pub x_prev: &'a DVector<f64>,
    pub t_next: f64,
    pub x_next: &'a DVector<f64>,
}

impl<'a> StepPoints<'a> {
    pub fn new(t_prev: f64, x_prev: &'a DVector<f64>, t_next: f64, x_next: &'a DVector<f64>) -> Self {
        Self {
            t_prev,
            x_prev,
            t_next,
            x_next,
        }
    }

    pub fn dt(&self) -> f64 {
        self.t_next - self.t_prev
    }

    /// Where `scheme` evaluates its drift.
    pub fn drift_point(&self, scheme: SchemeKind) -> (f64, &'a DVector<f64>) {
        if scheme.drift_at_next() {
            (self.t_next, self.x_next)
        } else {
            (self.t_prev, self.x_prev)
        }
    }

    /// Where `scheme` evaluates its leading diffusion.
    pub fn diffusion_point(&self, scheme: SchemeKind) -> (f64, &'a DVector<f64>) {
        if scheme.diffusion_at_next() {
            (self.t_next, self.x_next)
        } else {
            (self.t_prev, self.x_prev)
        }
    }
}

/// The scheme's own Milstein coefficient: at the start point for ML and SIML,
/// mixed new/old for IML.
pub fn scheme_milstein_term(
    scheme: SchemeKind,
    sys: &SdeSystem,
    points: &StepPoints<'_>,
    mode: MilsteinTermMode,
) -> Result<DMatrix<f64>> {
    match scheme {
        SchemeKind::Explicit | SchemeKind::SemiImplicit => milstein_term(sys, points.t_prev, points.x_prev, mode),
        SchemeKind::Implicit => milstein_term_mixed(
            sys,
            (points.t_next, points.x_next),
            (points.t_prev, points.x_prev),
            mode,
        ),
    }
}

/// Pseudo-inverse of the diffusion restricted to its nonzero rows.
#[derive(Debug, Clone)]
pub struct NoiseProjector {
    active: Vec<usize>,
    pinv: DMatrix<f64>,
}

impl NoiseProjector {
    pub fn new(f: &DMatrix<f64>) -> Result<Self> {
        let n = f.ncols();
        let active: Vec<usize> = (0..f.nrows()).filter(|&j| f.row(j).iter().any(|v| *v != 0.0)).collect();
        if active.is_empty() {
            return Ok(Self {
                active,
                pinv: DMatrix::zeros(n, 0),
            });
        }
        let sub = f.select_rows(active.iter());
        let svd = sub.clone().svd(false, false);
        let max = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|s| **s > 1e-12 * max).count();
        if rank < n {
            return Err(Error::RankDeficientDiffusion { rank, n });
        }
        let pinv = sub
            .pseudo_inverse(1e-12 * max)
            .map_err(|e| Error::InvalidArgument(format!("pseudo-inverse failed: {e}")))?;
        Ok(Self { active, pinv })
    }

    /// Map a state-space increment to noise space.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.active.is_empty() {
            return DVector::zeros(self.pinv.nrows());
        }
        let sub = DVector::from_iterator(self.active.len(), self.active.iter().map(|&j| v[j]));
        &self.pinv * sub
    }

    pub fn is_degenerate(&self) -> bool {
        self.active.is_empty()
    }
}

/// State-space part of the error process before projection:
/// drift and diffusion differences against the scheme's evaluation points,
/// minus the Milstein term applied to `(dW̃⁰² − dt)`.
fn error_state_increment(
    scheme: SchemeKind,
    sys: &SdeSystem,
    points: &StepPoints<'_>,
    dw: &DVector<f64>,
    dw_tilde: &DVector<f64>,
    milstein: &DMatrix<f64>,
    quadrature: ErrorQuadrature,
) -> DVector<f64> {
    let dt = points.dt();
    let (td, xd) = points.drift_point(scheme);
    let (tf, xf) = points.diffusion_point(scheme);
    let g_eval = sys.drift(td, xd);
    let f_eval = sys.diffusion(tf, xf);
    let g_right = sys.drift(points.t_next, points.x_next);
    let f_right = sys.diffusion(points.t_next, points.x_next);
    let (dg, df) = match quadrature {
        ErrorQuadrature::RightPoint => (g_right - g_eval, f_right - f_eval),
        ErrorQuadrature::Trapezoid => {
            let g_left = sys.drift(points.t_prev, points.x_prev);
            let f_left = sys.diffusion(points.t_prev, points.x_prev);
            ((g_left + g_right) * 0.5 - g_eval, (f_left + f_right) * 0.5 - f_eval)
        }
    };
    dg * dt + df * dw - apply_milstein(milstein, dw_tilde, dt)
}

/// Error process increment `e` (noise space) for one step.
///
/// `points.x_next` is the uncorrected predictor standing in for the true
/// state. `dw_tilde` enters only through the Milstein term; the pipeline
/// passes the first-pass `dW + f†M(dW² − dt)`.
pub fn error_increment(
    scheme: SchemeKind,
    sys: &SdeSystem,
    points: &StepPoints<'_>,
    dw: &DVector<f64>,
    dw_tilde: &DVector<f64>,
    mode: MilsteinTermMode,
    quadrature: ErrorQuadrature,
) -> Result<DVector<f64>> {
    let (tf, xf) = points.diffusion_point(scheme);
    let proj = NoiseProjector::new(&sys.diffusion(tf, xf))?;
    if proj.is_degenerate() {
        return Ok(DVector::zeros(sys.n()));
    }
    let milstein = scheme_milstein_term(scheme, sys, points, mode)?;
    Ok(proj.project(&error_state_increment(scheme, sys, points, dw, dw_tilde, &milstein, quadrature)))
}

/// `γΔt = ρ⁻¹(e + ½ s dt)` with `s` the per-factor column sums of the diffusion at `t*`.
pub fn gamma_dt(e: &DVector<f64>, f_eval_summary: &DVector<f64>, dt: f64, params: &GammaParams) -> DVector<f64> {
    &params.rho_inv * (e + f_eval_summary * (0.5 * dt))
}

/// `(1/dt) γΔtᵀ dW̃ − |γΔt|² / (2 dt)`
pub fn log_rn_increment(gamma_dt: &DVector<f64>, dw_tilde: &DVector<f64>, dt: f64) -> f64 {
    (gamma_dt.dot(dw_tilde) - 0.5 * gamma_dt.norm_squared()) / dt
}

/// Scalar functional with gradient and Hessian.
pub trait TestFunction: Sync {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// `Φ(x) = x_j`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate(pub usize);

impl TestFunction for Coordinate {
    fn value(&self, x: &DVector<f64>) -> f64 {
        x[self.0]
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        g[self.0] = 1.0;
        g
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }
}

type ScalarFn = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GradientFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type HessianFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Test function assembled from closures.
pub struct SmoothFunction {
    value: ScalarFn,
    gradient: GradientFn,
    hessian: HessianFn,
}

impl SmoothFunction {
    pub fn new<V, G, H>(value: V, gradient: G, hessian: H) -> Self
    where
        V: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        H: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            value: Box::new(value),
            gradient: Box::new(gradient),
            hessian: Box::new(hessian),
        }
    }
}

impl TestFunction for SmoothFunction {
    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(x)
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.hessian)(x)
    }
}

/// `ℑ⁰Φ = ∇Φᵀ g(t*, X*) + ½ Σ_l Σ_{j,k} f^{j,l} f^{k,l} ∂²Φ/∂x_j∂x_k`, with `g`
/// and `f` at the scheme's evaluation points and `Φ` differentiated at the
/// step's start state.
pub fn apply_generator0(scheme: SchemeKind, sys: &SdeSystem, points: &StepPoints<'_>, phi: &dyn TestFunction) -> f64 {
    let (td, xd) = points.drift_point(scheme);
    let (tf, xf) = points.diffusion_point(scheme);
    let grad = phi.gradient(points.x_prev);
    let hess = phi.hessian(points.x_prev);
    let f = sys.diffusion(tf, xf);
    let second = (&f.transpose() * &hess * &f).trace();
    grad.dot(&sys.drift(td, xd)) + 0.5 * second
}

/// `ℑ¹Φ = ∇Φᵀ Σ_l M_{·,l}` with `M` the scheme's Milstein coefficient (already
/// carrying the ½). In `OuterProduct` mode this is `½ ∇Φᵀ (f^{j,l} Σ_k f^{k,l})`.
pub fn apply_generator1(
    scheme: SchemeKind,
    sys: &SdeSystem,
    points: &StepPoints<'_>,
    phi: &dyn TestFunction,
    mode: MilsteinTermMode,
) -> Result<f64> {
    let m = scheme_milstein_term(scheme, sys, points, mode)?;
    Ok(phi.gradient(points.x_prev).dot(&column_sums(&m.transpose())))
}

/// `ℑ²Φ = Φ(x) (γΔt / dt)ᵀ`
pub fn apply_generator2(phi: &dyn TestFunction, x: &DVector<f64>, gamma_dt: &DVector<f64>, dt: f64) -> DVector<f64> {
    gamma_dt * (phi.value(x) / dt)
}

/// Per-step outcome of the Kushner–Stratonovich update.
#[derive(Debug, Clone, PartialEq)]
pub struct KsUpdate {
    pub pi_next: DVector<f64>,
    /// `Δψ = ⟨dW̃⟩ − ⟨γΔt⟩`
    pub innovation: DVector<f64>,
    /// `⟨x γᵀ⟩ − ⟨x⟩⟨γ⟩ᵀ` (m×n), with `γ = γΔt/dt`.
    pub covariance: DMatrix<f64>,
}

/// One Kushner–Stratonovich step for `Φ` = each state component.
///
/// `prev` holds the Q-ensemble at `t_prev` (the anchor and the states the
/// covariance is taken over) and `next` the Q-ensemble at `t_next`, which
/// supplies the implicit evaluation points of the generators.
#[allow(clippy::too_many_arguments)]
pub fn ks_correct(
    prev: &[DVector<f64>],
    next: &[DVector<f64>],
    gamma_dt: &[DVector<f64>],
    dw_tilde: &[DVector<f64>],
    sys: &SdeSystem,
    scheme: SchemeKind,
    t_prev: f64,
    t_next: f64,
    mode: MilsteinTermMode,
) -> Result<KsUpdate> {
    let count = prev.len();
    if count == 0 {
        return Err(Error::InvalidArgument("Kushner–Stratonovich update needs at least one path".into()));
    }
    if next.len() != count || gamma_dt.len() != count || dw_tilde.len() != count {
        return Err(Error::Dimension("ensemble inputs must have one entry per path".into()));
    }
    let (m, n) = (sys.m(), sys.n());
    let dt = t_next - t_prev;
    let inv = 1.0 / count as f64;
    let coords: Vec<Coordinate> = (0..m).map(Coordinate).collect();

    let mut drift = DVector::zeros(m);
    let mut mean_dx = DVector::zeros(m);
    let mut mean_dg = DVector::zeros(n);
    let mut mean_gamma_dt = DVector::zeros(n);
    let mut mean_dw_tilde = DVector::zeros(n);
    let mut cross = DMatrix::zeros(m, n);
    for p in 0..count {
        let points = StepPoints::new(t_prev, &prev[p], t_next, &next[p]);
        // shifted by path 0 so identical states or identical γ give an exact zero
        let dx = &prev[p] - &prev[0];
        let dg = &gamma_dt[p] - &gamma_dt[0];
        mean_dx += &dx;
        mean_dg += &dg / dt;
        for (j, phi) in coords.iter().enumerate() {
            drift[j] += apply_generator0(scheme, sys, &points, phi) + apply_generator1(scheme, sys, &points, phi, mode)?;
            let g2 = apply_generator2(phi, &dx, &dg, dt);
            for l in 0..n {
                cross[(j, l)] += g2[l];
            }
        }
        mean_gamma_dt += &gamma_dt[p];
        mean_dw_tilde += &dw_tilde[p];
    }
    drift *= inv;
    mean_dx *= inv;
    mean_dg *= inv;
    mean_gamma_dt *= inv;
    mean_dw_tilde *= inv;
    cross *= inv;

    let mean_x = &prev[0] + &mean_dx;
    let covariance = cross - mean_dx * mean_dg.transpose();
    let innovation = mean_dw_tilde - mean_gamma_dt;
    let pi_next = mean_x + drift * dt + &covariance * &innovation;
    Ok(KsUpdate {
        pi_next,
        innovation,
        covariance,
    })
}

/// Per-path correction quantities at the current step.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionState {
    /// N×n, row p is path p's `γΔt`.
    pub gamma_dt: DMatrix<f64>,
    /// Running `log Z` per path.
    pub log_weight: DVector<f64>,
    /// Current estimate `π_t` of each state component.
    pub pi_state: DVector<f64>,
    /// Current ensemble mean of `γ = γΔt/dt`.
    pub pi_gamma: DVector<f64>,
}

impl CorrectionState {
    pub fn new(n_paths: usize, n: usize, x0: &DVector<f64>) -> Self {
        Self {
            gamma_dt: DMatrix::zeros(n_paths, n),
            log_weight: DVector::zeros(n_paths),
            pi_state: x0.clone(),
            pi_gamma: DVector::zeros(n),
        }
    }

    /// `⟨Z⟩` evaluated with a shifted exponent.
    pub fn mean_weight(&self) -> f64 {
        mean_exp(self.log_weight.as_slice())
    }
}

pub(crate) fn mean_exp(logs: &[f64]) -> f64 {
    if logs.is_empty() {
        return f64::NAN;
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return if max == f64::NEG_INFINITY { 0.0 } else { max };
    }
    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    ((sum / logs.len() as f64).ln() + max).exp()
}

/// Q-measure noise for one step, N×n.
#[derive(Debug, Clone, PartialEq)]
pub struct QWienerIncrement {
    pub dw_tilde: DMatrix<f64>,
}

/// Configuration of a corrected ensemble run.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionConfig {
    pub scheme: SchemeKind,
    pub mode: MilsteinTermMode,
    pub solver: SolverOptions,
    pub gamma: GammaParams,
    pub quadrature: ErrorQuadrature,
}

impl CorrectionConfig {
    pub fn new(scheme: SchemeKind, n: usize) -> Self {
        Self {
            scheme,
            mode: MilsteinTermMode::default(),
            solver: SolverOptions::default(),
            gamma: GammaParams::identity(n),
            quadrature: ErrorQuadrature::default(),
        }
    }
}

/// One path's corrected step.
#[derive(Debug, Clone)]
pub struct CorrectedStep {
    pub x_next: DVector<f64>,
    pub predictor: DVector<f64>,
    pub error: DVector<f64>,
    pub gamma_dt: DVector<f64>,
    pub dw_tilde: DVector<f64>,
    pub log_rn: f64,
}

/// Advance one path by one corrected step: predictor, error process, `γΔt`,
/// `dW̃`, the Q-measure step and the log-weight increment.
pub fn corrected_step(
    config: &CorrectionConfig,
    sys: &SdeSystem,
    t_prev: f64,
    t_next: f64,
    x: &DVector<f64>,
    dw: &DVector<f64>,
) -> Result<CorrectedStep> {
    let scheme = config.scheme;
    let mode = config.mode;
    let dt = t_next - t_prev;
    let predictor = step_scheme(scheme, sys, t_prev, t_next, x, dw, mode, &config.solver)?;
    let points = StepPoints::new(t_prev, x, t_next, &predictor);
    let (tf, xf) = points.diffusion_point(scheme);
    let f_eval = sys.diffusion(tf, xf);
    let proj = NoiseProjector::new(&f_eval)?;

    let (error, dw_tilde) = if proj.is_degenerate() {
        (DVector::zeros(sys.n()), dw.clone())
    } else {
        let milstein = scheme_milstein_term(scheme, sys, &points, mode)?;
        let dw_tilde0 = dw + proj.project(&apply_milstein(&milstein, dw, dt));
        let state_err = error_state_increment(scheme, sys, &points, dw, &dw_tilde0, &milstein, config.quadrature);
        let e = proj.project(&state_err);
        let dw_tilde = &e + dw_tilde0;
        (e, dw_tilde)
    };
    let gdt = gamma_dt(&error, &column_sums(&f_eval), dt, &config.gamma);
    let log_rn = log_rn_increment(&gdt, &dw_tilde, dt);

    let x_next = match scheme {
        SchemeKind::Explicit => step_ml(sys, t_prev, x, dt, &dw_tilde, mode)?,
        SchemeKind::SemiImplicit => {
            step_siml_from(sys, t_prev, t_next, x, &dw_tilde, mode, &config.solver, predictor.clone())?
        }
        SchemeKind::Implicit => {
            step_iml_from(sys, t_prev, t_next, x, &dw_tilde, mode, &config.solver, predictor.clone())?
        }
    };
    let finite = error.iter().chain(gdt.iter()).chain(dw_tilde.iter()).all(|v| v.is_finite()) && log_rn.is_finite();
    if !finite {
        return Err(Error::NonFinite { step: None });
    }
    Ok(CorrectedStep {
        x_next,
        predictor,
        error,
        gamma_dt: gdt,
        dw_tilde,
        log_rn,
    })
}

/// Girsanov-corrected ensemble run (GCEML/GCSIML/GCIML).
///
/// `mean` holds the Kushner–Stratonovich estimate, `raw_mean` the plain mean
/// of the Q-ensemble, `variance` the Q-ensemble variance and `mean_weight`
/// the diagnostic `⟨Z_t⟩`. Weights are never used for resampling.
pub fn corrected_run(
    sys: &SdeSystem,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    n_paths: usize,
    master_seed: u64,
    config: &CorrectionConfig,
    opts: &EnsembleOptions,
) -> Result<EnsembleResult> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one path".into()));
    }
    if x0.len() != sys.m() {
        return Err(Error::Dimension(format!("initial state has {} entries, system has {}", x0.len(), sys.m())));
    }
    if config.gamma.n() != sys.n() {
        return Err(Error::Dimension(format!("rho is {}×{}, system has {} noise factors", config.gamma.n(), config.gamma.n(), sys.n())));
    }
    config.solver.validate()?;
    opts.validate(grid)?;
    sys.check_shapes(grid.t0(), x0)?;

    let increments: Vec<_> = (0..n_paths)
        .into_par_iter()
        .map(|p| path_increments(grid, sys.n(), master_seed, p as u64, opts.base_refine))
        .collect::<Result<_>>()?;

    let scheme = config.scheme;
    let mut state = CorrectionState::new(n_paths, sys.n(), x0);
    let mut paths: Vec<DVector<f64>> = vec![x0.clone(); n_paths];
    let mut recorder = Recorder::new(grid, opts.record_stride, sys.m(), true);
    recorder.record_corrected(0, x0, &paths, &state)?;

    for i in 0..grid.steps() {
        let (t_prev, t_next) = (grid.time(i), grid.time(i + 1));
        let steps: Vec<CorrectedStep> = paths
            .par_iter()
            .zip(increments.par_iter())
            .enumerate()
            .map(|(p, (x, inc))| {
                corrected_step(config, sys, t_prev, t_next, x, &inc.step(i)).map_err(|e| blow_up(e, p, i + 1, scheme))
            })
            .collect::<Result<_>>()?;

        let next: Vec<DVector<f64>> = steps.iter().map(|s| s.x_next.clone()).collect();
        let gammas: Vec<DVector<f64>> = steps.iter().map(|s| s.gamma_dt.clone()).collect();
        let dwt: Vec<DVector<f64>> = steps.iter().map(|s| s.dw_tilde.clone()).collect();
        let update = ks_correct(&paths, &next, &gammas, &dwt, sys, scheme, t_prev, t_next, config.mode)?;
        if !update.pi_next.iter().all(|v| v.is_finite()) {
            return Err(Error::BlowUp {
                path: 0,
                step: i + 1,
                scheme: format!("gc-{scheme}"),
            });
        }

        for (p, s) in steps.iter().enumerate() {
            state.gamma_dt.set_row(p, &s.gamma_dt.transpose());
            state.log_weight[p] += s.log_rn;
        }
        state.pi_gamma = gammas.iter().fold(DVector::zeros(sys.n()), |acc, g| acc + g) / (n_paths as f64 * (t_next - t_prev));
        state.pi_state = update.pi_next;
        paths = next;
        recorder.record_corrected(i + 1, &state.pi_state, &paths, &state)?;
    }

    let mut meta = BTreeMap::new();
    meta.insert("quadrature".to_string(), config.quadrature.short_name().to_string());
    meta.insert("milstein_mode".to_string(), config.mode.short_name().to_string());
    meta.insert("rho".to_string(), format_matrix(config.gamma.rho()));
    let mut result = recorder.finish(RunKind::Corrected(scheme), n_paths, master_seed, opts, meta);
    result.log_weights = Some(state.log_weight.iter().copied().collect());
    Ok(result)
}

pub(crate) fn blow_up(e: Error, path: usize, step: usize, scheme: SchemeKind) -> Error {
    match e {
        Error::NonFinite { .. } => Error::BlowUp {
            path,
            step,
            scheme: format!("gc-{scheme}"),
        },
        other => other,
    }
}

pub(crate) fn format_matrix(a: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..a.nrows())
        .map(|i| {
            let cols: Vec<String> = (0..a.ncols()).map(|j| format!("{:e}", a[(i, j)])).collect();
            format!("[{}]", cols.join(","))
        })
        .collect();
    format!("[{}]", rows.join(","))
}
