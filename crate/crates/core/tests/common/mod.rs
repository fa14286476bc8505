#![allow(dead_code)]

use gcmilstein::experiments::{run_ensemble, EnsembleOptions, StepperConfig};
use gcmilstein::girsanov::{corrected_run, ks_correct, CorrectionConfig};
use gcmilstein::oscillators::{
    make_duffing_holmes, make_duffing_van_der_pol, DuffingHolmesParams, DuffingVanDerPolParams,
};
use gcmilstein::sde::{
    coarsen, generate_increments, path_increments, verify_separability, SdeSystem, TimeGrid,
};
use gcmilstein::steppers::{
    milstein_term, milstein_term_mixed, step_iml, step_siml, MilsteinTermMode, SchemeKind, SolverOptions,
};
use nalgebra::{DMatrix, DVector};

pub type Check = Result<(), String>;

pub fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Nonlinear damped oscillator with its diffusion scaled by `noise`.
pub fn damped(noise: f64, k3: f64) -> SdeSystem {
    SdeSystem::new(
        "damped",
        2,
        1,
        move |_, x: &DVector<f64>| v(&[x[1], -x[0] - 0.4 * x[1] - k3 * x[0].powi(3)]),
        move |_, x: &DVector<f64>| DMatrix::from_column_slice(2, 1, &[0.0, noise * x[0]]),
    )
    .with_diffusion_jacobian(move |_, _| {
        vec![
            DMatrix::zeros(2, 1),
            DMatrix::from_column_slice(2, 1, &[0.0, noise]),
        ]
    })
}

/// Corrected, uncorrected and deterministic trajectories coincide when the
/// diffusion vanishes.
pub fn zero_diffusion_neutrality(scheme: SchemeKind, x1: f64, k3: f64, seed: u64) -> Check {
    let sys = damped(0.0, k3);
    let x0 = v(&[x1, 0.0]);
    let grid = TimeGrid::new(0.0, 0.05, 30).map_err(|e| e.to_string())?;
    let opts = EnsembleOptions::default();
    let corrected = corrected_run(&sys, &x0, &grid, 3, seed, &CorrectionConfig::new(scheme, 1), &opts)
        .map_err(|e| e.to_string())?;
    let plain = run_ensemble(&StepperConfig::milstein(scheme), &sys, &x0, &grid, 3, seed, &opts)
        .map_err(|e| e.to_string())?;
    let other = run_ensemble(&StepperConfig::milstein(scheme), &sys, &x0, &grid, 1, seed.wrapping_add(1), &opts)
        .map_err(|e| e.to_string())?;
    ensure(corrected.raw_mean.as_ref() == Some(&plain.mean), || "Q-ensemble differs from uncorrected run".into())?;
    ensure(plain.mean == other.mean, || "deterministic run depends on the seed".into())?;
    ensure(plain.variance.iter().all(|s| *s == 0.0), || "spread without noise".into())?;
    ensure(corrected.log_weights.as_ref().unwrap().iter().all(|w| *w == 0.0), || "nonzero log-weight".into())?;
    let gap = (&corrected.mean - &plain.mean).amax();
    ensure(gap < 1e-7 * (1.0 + x1.abs()), || format!("estimate departs from the path by {gap}"))
}

/// Identical states with any γ, or identical γ with any states, leave no
/// covariance correction.
pub fn covariance_collapse(states: &[(f64, f64)], gammas: &[f64], dw: &[f64]) -> Check {
    let sys = damped(0.3, 0.1);
    let count = states.len().min(gammas.len()).min(dw.len());
    let prev: Vec<DVector<f64>> = states[..count].iter().map(|(a, b)| v(&[*a, *b])).collect();
    let same_state = vec![prev[0].clone(); count];
    let gdt: Vec<DVector<f64>> = gammas[..count].iter().map(|g| v(&[*g])).collect();
    let same_gamma = vec![gdt[0].clone(); count];
    let dwt: Vec<DVector<f64>> = dw[..count].iter().map(|w| v(&[*w])).collect();
    for (xs, gs) in [(&prev, &same_gamma), (&same_state, &gdt)] {
        for scheme in SchemeKind::ALL {
            let u = ks_correct(xs, xs, gs, &dwt, &sys, scheme, 0.0, 0.01, MilsteinTermMode::Operator)
                .map_err(|e| e.to_string())?;
            ensure(u.covariance.iter().all(|c| *c == 0.0), || format!("covariance {:?}", u.covariance))?;
        }
    }
    Ok(())
}

/// The per-factor contraction equals its factored form exactly.
pub fn separability_exact(alpha: f64, sigma: f64, eps: [f64; 4], states: &[(f64, f64, f64)]) -> Check {
    let dv = make_duffing_van_der_pol(DuffingVanDerPolParams {
        alpha,
        sigma,
        ..Default::default()
    });
    let dh = make_duffing_holmes(DuffingHolmesParams {
        eps1: eps[0],
        eps2: eps[1],
        eps3: eps[2],
        eps4: eps[3],
        ..Default::default()
    });
    let samples: Vec<(f64, DVector<f64>)> = states.iter().map(|(t, a, b)| (*t, v(&[*a, *b]))).collect();
    for sys in [&dv, &dh] {
        let r = verify_separability(sys, &samples).map_err(|e| e.to_string())?;
        ensure(r.max_discrepancy == 0.0 && r.holds, || format!("{}: {r:?}", sys.label()))?;
    }
    Ok(())
}

/// Summing fine increments reproduces the coarse ones bit for bit, and
/// regeneration is exact.
pub fn coarsening_contract(seed: u64, path: u64, steps: usize, factor: usize, n: usize) -> Check {
    let coarse = TimeGrid::new(0.0, 0.1, steps).map_err(|e| e.to_string())?;
    let fine = generate_increments(&coarse.refine(factor).map_err(|e| e.to_string())?, n, seed, path);
    let summed = coarsen(&fine, factor).map_err(|e| e.to_string())?;
    let direct = path_increments(&coarse, n, seed, path, factor).map_err(|e| e.to_string())?;
    ensure(summed == direct, || "coarsened increments differ".into())?;
    let again = path_increments(&coarse, n, seed, path, factor).map_err(|e| e.to_string())?;
    ensure(again == direct, || "regeneration differs".into())
}

/// Same seed gives the same ensemble whatever the thread count.
pub fn determinism_contract(seed: u64, threads: usize) -> Check {
    let sys = damped(0.3, 0.1);
    let x0 = v(&[1.0, 0.0]);
    let grid = TimeGrid::new(0.0, 0.05, 20).map_err(|e| e.to_string())?;
    let cfg = CorrectionConfig::new(SchemeKind::SemiImplicit, 1);
    let run = |k: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .unwrap()
            .install(|| corrected_run(&sys, &x0, &grid, 8, seed, &cfg, &EnsembleOptions::default()))
    };
    let a = run(1).map_err(|e| e.to_string())?;
    let b = run(threads).map_err(|e| e.to_string())?;
    ensure(a == b, || format!("1 thread and {threads} threads disagree"))
}

/// Converged implicit steps satisfy their own defining equation to tolerance.
pub fn solver_residual(noise: f64, x: (f64, f64), dw: f64, dt: f64, mode: MilsteinTermMode) -> Check {
    let sys = damped(noise, 0.5);
    let opts = SolverOptions::default();
    let x = v(&[x.0, x.1]);
    let dwv = v(&[dw]);
    let quad = |m: &DMatrix<f64>| m * v(&[dw * dw - dt]);

    let y = step_siml(&sys, 0.0, dt, &x, &dwv, mode, &opts).map_err(|e| e.to_string())?;
    let m = milstein_term(&sys, 0.0, &x, mode).map_err(|e| e.to_string())?;
    let r = &y - &x - sys.drift(dt, &y) * dt - sys.diffusion(0.0, &x) * &dwv - quad(&m);
    ensure(r.norm() <= opts.tolerance(&y), || format!("semi-implicit residual {}", r.norm()))?;

    let y = step_iml(&sys, 0.0, dt, &x, &dwv, mode, &opts).map_err(|e| e.to_string())?;
    let m = milstein_term_mixed(&sys, (dt, &y), (0.0, &x), mode).map_err(|e| e.to_string())?;
    let r = &y - &x - sys.drift(dt, &y) * dt - sys.diffusion(dt, &y) * &dwv - quad(&m);
    ensure(r.norm() <= opts.tolerance(&y), || format!("implicit residual {}", r.norm()))
}
