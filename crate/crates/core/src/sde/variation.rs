use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::sde::{SdeSystem, WienerIncrements};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparabilityReport {
    pub max_discrepancy: f64,
    pub magnitude: f64,
    pub holds: bool,
}

/// Per noise factor `l`, compare `Σ_k f^{k,l} ∂f^{k,l}/∂x_k` with the factored
/// form `(Σ_k f^{k,l}) (Σ_k ∂f^{k,l}/∂x_k)` at every sample. The check holds
/// when the worst discrepancy is at most `1e-8 (1 + magnitude)`, where
/// magnitude is the largest value seen in either form. Only sums over the
/// state index are used, so the result does not depend on state ordering.
pub fn verify_separability(sys: &SdeSystem, samples: &[(f64, DVector<f64>)]) -> Result<SeparabilityReport> {
    let (m, n) = (sys.m(), sys.n());
    let mut max_discrepancy = 0.0_f64;
    let mut magnitude = 0.0_f64;
    for (t, x) in samples {
        let f = sys.diffusion(*t, x);
        let jac = sys.diffusion_jacobian(*t, x)?;
        for l in 0..n {
            let contraction: f64 = (0..m).map(|k| f[(k, l)] * jac[k][(k, l)]).sum();
            let col_sum: f64 = (0..m).map(|k| f[(k, l)]).sum();
            let div: f64 = (0..m).map(|k| jac[k][(k, l)]).sum();
            let factored = col_sum * div;
            magnitude = magnitude.max(contraction.abs()).max(factored.abs());
            max_discrepancy = max_discrepancy.max((contraction - factored).abs());
        }
    }
    Ok(SeparabilityReport {
        max_discrepancy,
        magnitude,
        holds: max_discrepancy <= 1e-8 * (1.0 + magnitude),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationStatistics {
    /// `Σ (ΔW_i)² Δt`
    pub sum_dw2_dt: f64,
    /// `Σ (ΔW_i)³`
    pub sum_dw3: f64,
}

/// Mixed quadratic-time and cubic variation sums of a scalar path.
pub fn variation_statistics(inc: &WienerIncrements) -> Result<VariationStatistics> {
    if inc.n() != 1 {
        return Err(Error::Dimension(format!(
            "variation statistics need a single-factor path, got {} factors",
            inc.n()
        )));
    }
    let dt = inc.dt();
    let (mut sum_dw2_dt, mut sum_dw3) = (0.0, 0.0);
    for &w in inc.data().iter() {
        let w2 = w * w;
        sum_dw2_dt += w2 * dt;
        sum_dw3 += w2 * w;
    }
    Ok(VariationStatistics { sum_dw2_dt, sum_dw3 })
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;

    use super::*;
    use crate::sde::{generate_increments, SeedInfo, TimeGrid};

    #[test]
    fn single_step_direct_formula() {
        let w = 0.3;
        let inc = WienerIncrements::from_matrix(
            DMatrix::from_element(1, 1, w),
            0.04,
            SeedInfo { master_seed: 0, path_index: 0 },
        );
        let s = variation_statistics(&inc).unwrap();
        assert!((s.sum_dw2_dt - w * w * 0.04).abs() < 1e-18);
        assert!((s.sum_dw3 - w * w * w).abs() < 1e-18);
    }

    #[test]
    fn multi_factor_is_rejected() {
        let grid = TimeGrid::new(0.0, 0.1, 4).unwrap();
        let inc = generate_increments(&grid, 2, 1, 0);
        assert!(variation_statistics(&inc).is_err());
    }

    #[test]
    fn constant_diffusion_is_separable() {
        let sys = SdeSystem::new(
            "additive",
            2,
            1,
            |_, x: &DVector<f64>| -x,
            |_, _| DMatrix::from_column_slice(2, 1, &[0.0, 1.5]),
        );
        let samples = vec![(0.0, DVector::from_vec(vec![1.0, 2.0]))];
        let r = verify_separability(&sys, &samples).unwrap();
        assert_eq!(r.max_discrepancy, 0.0);
        assert!(r.holds);
    }

    #[test]
    fn linear_scalar_diffusion_is_separable() {
        let b = 0.7;
        let sys = SdeSystem::new(
            "gbm",
            1,
            1,
            |_, x: &DVector<f64>| x * 0.1,
            move |_, x: &DVector<f64>| DMatrix::from_element(1, 1, b * x[0]),
        )
        .with_diffusion_jacobian(move |_, _| vec![DMatrix::from_element(1, 1, b)]);
        let samples: Vec<_> = [-2.0, 0.5, 3.0]
            .iter()
            .map(|&v| (0.0, DVector::from_element(1, v)))
            .collect();
        let r = verify_separability(&sys, &samples).unwrap();
        assert!(r.holds);
        // both forms equal b² x, largest at x = 3
        assert!((r.magnitude - b * b * 3.0).abs() < 1e-14);
    }

    #[test]
    fn coupled_diffusion_is_not_separable() {
        // f = (x1, x2)ᵀ: contraction x1 + x2, factored form 2 (x1 + x2)
        let sys = SdeSystem::new(
            "coupled",
            2,
            1,
            |_, x: &DVector<f64>| x.clone(),
            |_, x: &DVector<f64>| DMatrix::from_column_slice(2, 1, &[x[0], x[1]]),
        );
        let samples = vec![(0.0, DVector::from_vec(vec![1.0, 2.0]))];
        let r = verify_separability(&sys, &samples).unwrap();
        assert!(!r.holds);
    }
}
