mod common;

use common::*;
use gcmilstein::steppers::{MilsteinTermMode, SchemeKind};
use proptest::prelude::*;

fn scheme() -> impl Strategy<Value = SchemeKind> {
    prop_oneof![
        Just(SchemeKind::Explicit),
        Just(SchemeKind::SemiImplicit),
        Just(SchemeKind::Implicit)
    ]
}

fn mode() -> impl Strategy<Value = MilsteinTermMode> {
    prop_oneof![Just(MilsteinTermMode::Operator), Just(MilsteinTermMode::OuterProduct)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_diffusion_is_neutral(s in scheme(), x1 in -2.0..2.0f64, k3 in 0.0..0.5f64, seed in any::<u64>()) {
        prop_assert_eq!(zero_diffusion_neutrality(s, x1, k3, seed), Ok(()));
    }

    #[test]
    fn agreeing_paths_give_no_correction(
        states in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 2..8),
        gammas in prop::collection::vec(-0.1..0.1f64, 8),
        dw in prop::collection::vec(-0.3..0.3f64, 8),
    ) {
        prop_assert_eq!(covariance_collapse(&states, &gammas, &dw), Ok(()));
    }

    #[test]
    fn oscillators_are_exactly_separable(
        alpha in 0.1..10.0f64,
        sigma in 0.0..2.0f64,
        eps in prop::array::uniform4(0.0..1.0f64),
        states in prop::collection::vec((0.0..20.0f64, -5.0..5.0f64, -5.0..5.0f64), 1..20),
    ) {
        prop_assert_eq!(separability_exact(alpha, sigma, eps, &states), Ok(()));
    }

    #[test]
    fn coarsening_is_bit_exact(
        seed in any::<u64>(),
        path in 0..1000u64,
        steps in 1..40usize,
        factor in 1..12usize,
        n in 1..3usize,
    ) {
        prop_assert_eq!(coarsening_contract(seed, path, steps, factor, n), Ok(()));
    }

    #[test]
    fn implicit_steps_meet_tolerance(
        noise in 0.0..0.8f64,
        x in (-2.0..2.0f64, -2.0..2.0f64),
        dw in -0.5..0.5f64,
        dt in 0.001..0.2f64,
        m in mode(),
    ) {
        prop_assert_eq!(solver_residual(noise, x, dw, dt, m), Ok(()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn ensembles_ignore_thread_count(seed in any::<u64>(), threads in 2..5usize) {
        prop_assert_eq!(determinism_contract(seed, threads), Ok(()));
    }
}
