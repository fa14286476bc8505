//! Single-step Milstein maps (explicit, semi-implicit, implicit) and the
//! nonlinear solver behind the implicit ones.
//!
//! All steppers are pure functions of their inputs. The Milstein coefficient
//! omits Lévy areas, so it is exact only for commutative noise.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sde::SdeSystem;

/// Where a scheme evaluates its drift and diffusion within `[t_{i-1}, t_i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    /// Everything at `t_{i-1}`.
    Explicit,
    /// Drift at `t_i`, diffusion terms at `t_{i-1}`.
    SemiImplicit,
    /// Drift and leading diffusion at `t_i`.
    Implicit,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [SchemeKind::Explicit, SchemeKind::SemiImplicit, SchemeKind::Implicit];

    pub fn drift_at_next(self) -> bool {
        !matches!(self, SchemeKind::Explicit)
    }

    pub fn diffusion_at_next(self) -> bool {
        matches!(self, SchemeKind::Implicit)
    }

    /// Short name used in run names and CLI flags.
    pub fn short_name(self) -> &'static str {
        match self {
            SchemeKind::Explicit => "ml",
            SchemeKind::SemiImplicit => "siml",
            SchemeKind::Implicit => "iml",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        match s {
            "ml" => Some(SchemeKind::Explicit),
            "siml" => Some(SchemeKind::SemiImplicit),
            "iml" => Some(SchemeKind::Implicit),
            _ => None,
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveStrategy {
    /// Newton iteration with a forward-difference Jacobian, `h = 1e-7 (1 + |x_k|)`.
    NewtonFd,
    /// `x ← x − relaxation · r(x)`.
    FixedPoint { relaxation: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub strategy: SolveStrategy,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-8,
            max_iter: 50,
            strategy: SolveStrategy::NewtonFd,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument("solver tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("solver max_iter must be at least 1".into()));
        }
        if let SolveStrategy::FixedPoint { relaxation } = self.strategy {
            if !(relaxation > 0.0) {
                return Err(Error::InvalidArgument("fixed-point relaxation must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn tolerance(&self, x: &DVector<f64>) -> f64 {
        self.abs_tol + self.rel_tol * x.norm()
    }
}

/// How the coefficient multiplying `(ΔW_l² − Δt)` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MilsteinTermMode {
    /// `½ Σ_k f^{k,l} ∂f^{j,l}/∂x_k`; needs the diffusion Jacobian.
    #[default]
    Operator,
    /// `½ f^{j,l} Σ_k f^{k,l}`, the per-component reading of `½ f fᵀ`.
    OuterProduct,
}

impl MilsteinTermMode {
    pub fn short_name(self) -> &'static str {
        match self {
            MilsteinTermMode::Operator => "operator",
            MilsteinTermMode::OuterProduct => "outer-product",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        match s {
            "operator" => Some(MilsteinTermMode::Operator),
            "outer-product" => Some(MilsteinTermMode::OuterProduct),
            _ => None,
        }
    }
}

/// Milstein coefficient (m×n) at a single point.
pub fn milstein_term(sys: &SdeSystem, t: f64, x: &DVector<f64>, mode: MilsteinTermMode) -> Result<DMatrix<f64>> {
    milstein_term_mixed(sys, (t, x), (t, x), mode)
}

/// Milstein coefficient with the row-specific factor taken at `lead` and the
/// column weights `f^{k,l}` taken at `weight`. The implicit scheme pairs
/// `f(t_i, X_i)` with `f(t_{i-1}, X_{i-1})ᵀ`, which is this with `lead` at
/// the new point and `weight` at the old one.
pub fn milstein_term_mixed(
    sys: &SdeSystem,
    lead: (f64, &DVector<f64>),
    weight: (f64, &DVector<f64>),
    mode: MilsteinTermMode,
) -> Result<DMatrix<f64>> {
    let (m, n) = (sys.m(), sys.n());
    let fw = sys.diffusion(weight.0, weight.1);
    let mut out = DMatrix::zeros(m, n);
    match mode {
        MilsteinTermMode::Operator => {
            let jac = sys.diffusion_jacobian(lead.0, lead.1)?;
            for l in 0..n {
                for k in 0..m {
                    let w = fw[(k, l)];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        out[(j, l)] += w * jac[k][(j, l)];
                    }
                }
            }
        }
        MilsteinTermMode::OuterProduct => {
            let fl = sys.diffusion(lead.0, lead.1);
            for l in 0..n {
                let col_sum: f64 = fw.column(l).sum();
                for j in 0..m {
                    out[(j, l)] = fl[(j, l)] * col_sum;
                }
            }
        }
    }
    Ok(out * 0.5)
}

/// `Σ_l M_{·,l} (ΔW_l² − Δt)`
pub(crate) fn apply_milstein(term: &DMatrix<f64>, dw: &DVector<f64>, dt: f64) -> DVector<f64> {
    let quad = dw.map(|w| w * w - dt);
    term * quad
}

fn finite_or_err(x: DVector<f64>) -> Result<DVector<f64>> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::NonFinite { step: None })
    }
}

/// Euler–Maruyama step `x + g dt + f ΔW`, the strong order ½ control.
pub fn step_euler_maruyama(sys: &SdeSystem, t: f64, x: &DVector<f64>, dt: f64, dw: &DVector<f64>) -> Result<DVector<f64>> {
    finite_or_err(x + sys.drift(t, x) * dt + sys.diffusion(t, x) * dw)
}

/// Explicit Milstein step.
pub fn step_ml(
    sys: &SdeSystem,
    t: f64,
    x: &DVector<f64>,
    dt: f64,
    dw: &DVector<f64>,
    mode: MilsteinTermMode,
) -> Result<DVector<f64>> {
    let term = milstein_term(sys, t, x, mode)?;
    finite_or_err(x + sys.drift(t, x) * dt + sys.diffusion(t, x) * dw + apply_milstein(&term, dw, dt))
}

/// Semi-implicit Milstein step: solves
/// `y = x + g(t_next, y) dt + f(t_prev, x) ΔW + M(t_prev, x)(ΔW² − dt)`.
pub fn step_siml(
    sys: &SdeSystem,
    t_prev: f64,
    t_next: f64,
    x: &DVector<f64>,
    dw: &DVector<f64>,
    mode: MilsteinTermMode,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    let guess = step_ml(sys, t_prev, x, t_next - t_prev, dw, mode)?;
    step_siml_from(sys, t_prev, t_next, x, dw, mode, opts, guess)
}

pub(crate) fn siml_residual<'a>(
    sys: &'a SdeSystem,
    t_prev: f64,
    t_next: f64,
    x: &'a DVector<f64>,
    dw: &'a DVector<f64>,
    mode: MilsteinTermMode,
) -> Result<impl Fn(&DVector<f64>) -> DVector<f64> + 'a> {
    let dt = t_next - t_prev;
    let term = milstein_term(sys, t_prev, x, mode)?;
    let explicit_part = x + sys.diffusion(t_prev, x) * dw + apply_milstein(&term, dw, dt);
    Ok(move |y: &DVector<f64>| y - &explicit_part - sys.drift(t_next, y) * dt)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn step_siml_from(
    sys: &SdeSystem,
    t_prev: f64,
    t_next: f64,
    x: &DVector<f64>,
    dw: &DVector<f64>,
    mode: MilsteinTermMode,
    opts: &SolverOptions,
    guess: DVector<f64>,
) -> Result<DVector<f64>> {
    let residual = siml_residual(sys, t_prev, t_next, x, dw, mode)?;
    solve_implicit(residual, guess, opts)
}

/// Implicit Milstein step: solves
/// `y = x + g(t_next, y) dt + f(t_next, y) ΔW + M(t_next, y; t_prev, x)(ΔW² − dt)`
/// with the mixed old/new pairing of the quadratic term (see [`milstein_term_mixed`]).
pub fn step_iml(
    sys: &SdeSystem,
    t_prev: f64,
    t_next: f64,
    x: &DVector<f64>,
    dw: &DVector<f64>,
    mode: MilsteinTermMode,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    let guess = step_ml(sys, t_prev, x, t_next - t_prev, dw, mode)?;
    step_iml_from(sys, t_prev, t_next, x, dw, mode, opts, guess)
}

pub(crate) fn iml_residual<'a>(
    sys: &'a SdeSystem,
    t_prev: f64,
    t_next: f64,
    x: &'a DVector<f64>,
    dw: &'a DVector<f64>,
    mode: MilsteinTermMode,
) -> impl Fn(&DVector<f64>) -> DVector<f64> + 'a {
    let dt = t_next - t_prev;
    move |y: &DVector<f64>| {
        // the Jacobian fallback can only fail when disabled, which step_iml_from rules out up front
        let term = milstein_term_mixed(sys, (t_next, y), (t_prev, x), mode)
            .unwrap_or_else(|_| DMatrix::from_element(sys.m(), sys.n(), f64::NAN));
        y - x - sys.drift(t_next, y) * dt - sys.diffusion(t_next, y) * dw - apply_milstein(&term, dw, dt)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn step_iml_from(
    sys: &SdeSystem,
    t_prev: f64,
    t_next: f64,
    x: &DVector<f64>,
    dw: &DVector<f64>,
    mode: MilsteinTermMode,
    opts: &SolverOptions,
    guess: DVector<f64>,
) -> Result<DVector<f64>> {
    if mode == MilsteinTermMode::Operator {
        // surface a missing Jacobian as its own error rather than a NaN residual
        sys.diffusion_jacobian(t_next, &guess)?;
    }
    solve_implicit(iml_residual(sys, t_prev, t_next, x, dw, mode), guess, opts)
}

/// One step of `scheme`, dispatching to the matching map.
pub fn step_scheme(
    scheme: SchemeKind,
    sys: &SdeSystem,
    t_prev: f64,
    t_next: f64,
    x: &DVector<f64>,
    dw: &DVector<f64>,
    mode: MilsteinTermMode,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    match scheme {
        SchemeKind::Explicit => step_ml(sys, t_prev, x, t_next - t_prev, dw, mode),
        SchemeKind::SemiImplicit => step_siml(sys, t_prev, t_next, x, dw, mode, opts),
        SchemeKind::Implicit => step_iml(sys, t_prev, t_next, x, dw, mode, opts),
    }
}

/// Solve `residual(x) = 0` from `x0`. Returns the first iterate whose residual
/// norm is within `abs_tol + rel_tol |x|`.
pub fn solve_implicit<R>(residual: R, x0: DVector<f64>, opts: &SolverOptions) -> Result<DVector<f64>>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
{
    opts.validate()?;
    let mut x = x0;
    let mut r = residual(&x);
    for iteration in 0..=opts.max_iter {
        if !r.iter().all(|v| v.is_finite()) || !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step: None });
        }
        let tol = opts.tolerance(&x);
        let norm = r.norm();
        if norm <= tol {
            return Ok(x);
        }
        if iteration == opts.max_iter {
            return Err(Error::NoConvergence {
                iterations: opts.max_iter,
                residual: norm,
                tolerance: tol,
            });
        }
        match opts.strategy {
            SolveStrategy::NewtonFd => {
                let jac = fd_jacobian(&residual, &x, &r);
                let delta = jac.lu().solve(&r).ok_or(Error::SingularNewton(iteration))?;
                if !delta.iter().all(|v| v.is_finite()) {
                    return Err(Error::SingularNewton(iteration));
                }
                x -= delta;
            }
            SolveStrategy::FixedPoint { relaxation } => {
                x -= &r * relaxation;
            }
        }
        r = residual(&x);
    }
    unreachable!("loop returns on its final iteration")
}

fn fd_jacobian<R>(residual: &R, x: &DVector<f64>, r0: &DVector<f64>) -> DMatrix<f64>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = x.len();
    let mut jac = DMatrix::zeros(r0.len(), m);
    let mut xp = x.clone();
    for k in 0..m {
        let h = 1e-7 * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        let col = (residual(&xp) - r0) / h;
        jac.set_column(k, &col);
        xp[k] = x[k];
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gbm(a: f64, b: f64) -> SdeSystem {
        SdeSystem::new(
            "gbm",
            1,
            1,
            move |_, x: &DVector<f64>| x * a,
            move |_, x: &DVector<f64>| DMatrix::from_element(1, 1, b * x[0]),
        )
        .with_diffusion_jacobian(move |_, _| vec![DMatrix::from_element(1, 1, b)])
    }

    fn linear_decay(lambda: f64) -> SdeSystem {
        SdeSystem::new(
            "decay",
            1,
            1,
            move |_, x: &DVector<f64>| x * -lambda,
            |_, _| DMatrix::zeros(1, 1),
        )
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn constant_diffusion_operator_term_is_zero() {
        let sys = SdeSystem::new("add", 2, 1, |_, x: &DVector<f64>| -x, |_, _| {
            DMatrix::from_column_slice(2, 1, &[0.0, 2.0])
        });
        let m = milstein_term(&sys, 0.0, &v(&[1.0, 3.0]), MilsteinTermMode::Operator).unwrap();
        assert!(m.iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn gbm_operator_term_is_half_b_squared_x() {
        let (b, x) = (0.3, 1.7);
        let m = milstein_term(&gbm(0.1, b), 0.0, &v(&[x]), MilsteinTermMode::Operator).unwrap();
        assert!((m[(0, 0)] - 0.5 * b * b * x).abs() < 1e-15);
        // scalar case: both readings coincide
        let o = milstein_term(&gbm(0.1, b), 0.0, &v(&[x]), MilsteinTermMode::OuterProduct).unwrap();
        assert!((o[(0, 0)] - 0.5 * b * b * x * x).abs() < 1e-15);
    }

    #[test]
    fn missing_jacobian_without_fallback_is_an_error() {
        let sys = SdeSystem::new("nojac", 1, 1, |_, x: &DVector<f64>| x.clone(), |_, x: &DVector<f64>| {
            DMatrix::from_element(1, 1, x[0])
        })
        .with_fd_fallback(false);
        assert!(matches!(
            milstein_term(&sys, 0.0, &v(&[1.0]), MilsteinTermMode::Operator),
            Err(Error::MissingJacobian(_))
        ));
        assert!(milstein_term(&sys, 0.0, &v(&[1.0]), MilsteinTermMode::OuterProduct).is_ok());
    }

    #[test]
    fn gbm_explicit_step_hand_value() {
        let x1 = step_ml(&gbm(0.05, 0.2), 0.0, &v(&[1.0]), 0.01, &v(&[0.05]), MilsteinTermMode::Operator).unwrap();
        assert!((x1[0] - 1.01035).abs() < 1e-14, "{}", x1[0]);
    }

    #[test]
    fn zero_diffusion_explicit_is_euler() {
        let sys = linear_decay(2.0);
        let x1 = step_ml(&sys, 0.0, &v(&[1.0]), 0.1, &v(&[0.3]), MilsteinTermMode::Operator).unwrap();
        assert!((x1[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn implicit_linear_decay_is_backward_euler() {
        let (lambda, dt) = (3.0, 0.2);
        let opts = SolverOptions::default();
        let sys = linear_decay(lambda);
        let expected = 1.0 / (1.0 + lambda * dt);
        let s = step_siml(&sys, 0.0, dt, &v(&[1.0]), &v(&[0.1]), MilsteinTermMode::Operator, &opts).unwrap();
        let i = step_iml(&sys, 0.0, dt, &v(&[1.0]), &v(&[0.1]), MilsteinTermMode::Operator, &opts).unwrap();
        assert!((s[0] - expected).abs() < 1e-9);
        assert!((i[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn state_independent_drift_siml_matches_ml_with_next_time_drift() {
        let sys = SdeSystem::new(
            "forced",
            1,
            1,
            |t, _| DVector::from_element(1, t.cos()),
            |_, x: &DVector<f64>| DMatrix::from_element(1, 1, 0.4 * x[0]),
        );
        let (t0, t1, x, dw) = (0.3, 0.35, v(&[1.2]), v(&[-0.07]));
        let opts = SolverOptions::default();
        let s = step_siml(&sys, t0, t1, &x, &dw, MilsteinTermMode::Operator, &opts).unwrap();
        let m = milstein_term(&sys, t0, &x, MilsteinTermMode::Operator).unwrap();
        let expected = &x + sys.drift(t1, &x) * (t1 - t0) + sys.diffusion(t0, &x) * &dw + apply_milstein(&m, &dw, t1 - t0);
        assert!((s[0] - expected[0]).abs() < 1e-9);
    }

    #[test]
    fn additive_noise_iml_equals_siml() {
        let sys = SdeSystem::new(
            "cubic",
            1,
            1,
            |_, x: &DVector<f64>| DVector::from_element(1, -x[0] - x[0].powi(3)),
            |_, _| DMatrix::from_element(1, 1, 0.5),
        );
        let opts = SolverOptions::default();
        let (x, dw) = (v(&[0.8]), v(&[0.2]));
        let s = step_siml(&sys, 0.0, 0.1, &x, &dw, MilsteinTermMode::Operator, &opts).unwrap();
        let i = step_iml(&sys, 0.0, 0.1, &x, &dw, MilsteinTermMode::Operator, &opts).unwrap();
        assert!((s[0] - i[0]).abs() < 1e-9);
    }

    #[test]
    fn implicit_steps_satisfy_their_residual() {
        let sys = gbm(-1.5, 0.6);
        let opts = SolverOptions::default();
        let (x, dw) = (v(&[2.0]), v(&[0.15]));
        for mode in [MilsteinTermMode::Operator, MilsteinTermMode::OuterProduct] {
            let y = step_iml(&sys, 0.0, 0.05, &x, &dw, mode, &opts).unwrap();
            let r = iml_residual(&sys, 0.0, 0.05, &x, &dw, mode)(&y);
            assert!(r.norm() <= opts.tolerance(&y));
            let y = step_siml(&sys, 0.0, 0.05, &x, &dw, mode, &opts).unwrap();
            let r = siml_residual(&sys, 0.0, 0.05, &x, &dw, mode).unwrap()(&y);
            assert!(r.norm() <= opts.tolerance(&y));
        }
    }

    #[test]
    fn newton_solves_affine_residual_in_one_iteration() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, -1.0, 2.0]);
        let target = v(&[0.5, -2.0]);
        let calls = std::cell::Cell::new(0usize);
        let res = |x: &DVector<f64>| {
            calls.set(calls.get() + 1);
            &a * (x - &target)
        };
        let opts = SolverOptions {
            max_iter: 1,
            ..SolverOptions::default()
        };
        let x = solve_implicit(res, v(&[10.0, 10.0]), &opts).unwrap();
        assert!((x - target).norm() < 1e-6);
    }

    #[test]
    fn scalar_cubic_root_matches_bisection() {
        let r = |x: f64| x - 0.9 - 0.1 * x.powi(3);
        // bisection oracle on [0, 2]: r(0) < 0 < r(2)
        let (mut lo, mut hi) = (0.0_f64, 2.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if r(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        let opts = SolverOptions {
            abs_tol: 1e-13,
            rel_tol: 1e-13,
            ..SolverOptions::default()
        };
        let x = solve_implicit(|x: &DVector<f64>| DVector::from_element(1, r(x[0])), v(&[0.9]), &opts).unwrap();
        assert!((x[0] - root).abs() < 1e-10, "{} vs {}", x[0], root);

        let fp = SolverOptions {
            strategy: SolveStrategy::FixedPoint { relaxation: 1.0 },
            ..opts
        };
        let y = solve_implicit(|x: &DVector<f64>| DVector::from_element(1, r(x[0])), v(&[0.9]), &fp).unwrap();
        assert!((y[0] - root).abs() < 1e-10);
    }

    #[test]
    fn constant_residual_does_not_converge() {
        let res = |_: &DVector<f64>| DVector::from_element(1, 1.0);
        let err = solve_implicit(res, v(&[0.0]), &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SingularNewton(_) | Error::NoConvergence { .. }));
        let fp = SolverOptions {
            strategy: SolveStrategy::FixedPoint { relaxation: 0.5 },
            ..SolverOptions::default()
        };
        assert!(matches!(solve_implicit(res, v(&[0.0]), &fp), Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn invalid_solver_options_are_rejected() {
        let bad = SolverOptions {
            max_iter: 0,
            ..SolverOptions::default()
        };
        assert!(solve_implicit(|x: &DVector<f64>| x.clone(), v(&[1.0]), &bad).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let sys = SdeSystem::new("explode", 1, 1, |_, x: &DVector<f64>| x * 1e300, |_, _| DMatrix::zeros(1, 1));
        let err = step_ml(&sys, 0.0, &v(&[1e10]), 1.0, &v(&[0.0]), MilsteinTermMode::Operator).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
