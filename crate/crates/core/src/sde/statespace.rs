use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sde::SdeSystem;

/// Condition numbers above this are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

type StateMatrixField = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type ForceField = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;
type NoiseField = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// `M ẍ + C(x, ẋ) ẋ + K(x, ẋ) x = F(t) + S(t, x, ẋ) Ẇ` with `d` degrees of freedom.
#[derive(Clone)]
pub struct SecondOrderSystem {
    mass: DMatrix<f64>,
    mass_inv: DMatrix<f64>,
    n: usize,
    damping: StateMatrixField,
    stiffness: StateMatrixField,
    force: ForceField,
    noise_intensity: NoiseField,
    label: String,
}

pub(crate) fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

impl SecondOrderSystem {
    pub fn new<C, K, F, S>(
        label: impl Into<String>,
        mass: DMatrix<f64>,
        n: usize,
        damping: C,
        stiffness: K,
        force: F,
        noise_intensity: S,
    ) -> Result<Self>
    where
        C: Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        K: Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        F: Fn(f64) -> DVector<f64> + Send + Sync + 'static,
        S: Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        if !mass.is_square() || mass.nrows() == 0 {
            return Err(Error::Dimension(format!("mass matrix must be square and non-empty, got {:?}", mass.shape())));
        }
        let condition = condition_number(&mass);
        if !(condition <= CONDITION_LIMIT) {
            return Err(Error::IllConditioned { what: "mass matrix", condition });
        }
        let mass_inv = mass
            .clone()
            .try_inverse()
            .ok_or(Error::IllConditioned { what: "mass matrix", condition })?;
        Ok(Self {
            mass,
            mass_inv,
            n,
            damping: Arc::new(damping),
            stiffness: Arc::new(stiffness),
            force: Arc::new(force),
            noise_intensity: Arc::new(noise_intensity),
            label: label.into(),
        })
    }

    /// Degrees of freedom.
    pub fn dof(&self) -> usize {
        self.mass.nrows()
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }
}

/// First-order form with the blocked state `[x; ẋ]`: displacement rows carry
/// `ẋ` and no noise, velocity rows carry `M⁻¹(F − Cẋ − Kx)` and `M⁻¹ S`.
pub fn second_order_to_statespace(sys: &SecondOrderSystem) -> SdeSystem {
    let d = sys.dof();
    let n = sys.n;
    let drift_sys = sys.clone();
    let diffusion_sys = sys.clone();
    SdeSystem::new(
        format!("{} (statespace)", sys.label),
        2 * d,
        n,
        move |t, y| {
            let x = y.rows(0, d).into_owned();
            let v = y.rows(d, d).into_owned();
            let c = (drift_sys.damping)(&x, &v);
            let k = (drift_sys.stiffness)(&x, &v);
            let rhs = (drift_sys.force)(t) - c * &v - k * &x;
            let acc = &drift_sys.mass_inv * rhs;
            let mut out = DVector::zeros(2 * d);
            out.rows_mut(0, d).copy_from(&v);
            out.rows_mut(d, d).copy_from(&acc);
            out
        },
        move |t, y| {
            let x = y.rows(0, d).into_owned();
            let v = y.rows(d, d).into_owned();
            let s = (diffusion_sys.noise_intensity)(t, &x, &v);
            let mut out = DMatrix::zeros(2 * d, n);
            out.rows_mut(d, d).copy_from(&(&diffusion_sys.mass_inv * s));
            out
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_dof_linear_oscillator() {
        let (c, k, sigma) = (0.3, 2.0, 0.7);
        let sys = SecondOrderSystem::new(
            "sdof",
            DMatrix::identity(1, 1),
            1,
            move |_, _| DMatrix::from_element(1, 1, c),
            move |_, _| DMatrix::from_element(1, 1, k),
            |t: f64| DVector::from_element(1, t.sin()),
            move |_, _, _| DMatrix::from_element(1, 1, sigma),
        )
        .unwrap();
        let ss = second_order_to_statespace(&sys);
        assert_eq!((ss.m(), ss.n()), (2, 1));
        let y = DVector::from_vec(vec![0.4, -1.1]);
        let t = 0.9;
        let g = ss.drift(t, &y);
        assert_eq!(g[0], -1.1);
        assert!((g[1] - (-c * -1.1 - k * 0.4 + t.sin())).abs() < 1e-15);
        let f = ss.diffusion(t, &y);
        assert_eq!(f[(0, 0)], 0.0);
        assert_eq!(f[(1, 0)], sigma);
    }

    #[test]
    fn zero_noise_gives_zero_diffusion() {
        let sys = SecondOrderSystem::new(
            "quiet",
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])),
            2,
            |_, _| DMatrix::identity(2, 2),
            |_, _| DMatrix::identity(2, 2),
            |_| DVector::zeros(2),
            |_, _, _| DMatrix::zeros(2, 2),
        )
        .unwrap();
        let ss = second_order_to_statespace(&sys);
        let f = ss.diffusion(0.0, &DVector::from_element(4, 1.0));
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn singular_mass_is_rejected() {
        let res = SecondOrderSystem::new(
            "bad",
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]),
            1,
            |_, _| DMatrix::zeros(2, 2),
            |_, _| DMatrix::zeros(2, 2),
            |_| DVector::zeros(2),
            |_, _, _| DMatrix::zeros(2, 1),
        );
        assert!(matches!(res, Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn mass_inverse_scales_velocity_rows() {
        let sys = SecondOrderSystem::new(
            "heavy",
            DMatrix::from_element(1, 1, 4.0),
            1,
            |_, _| DMatrix::zeros(1, 1),
            |_, _| DMatrix::from_element(1, 1, 8.0),
            |_| DVector::zeros(1),
            |_, _, _| DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        let ss = second_order_to_statespace(&sys);
        let y = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(ss.drift(0.0, &y)[1], -2.0);
        assert_eq!(ss.diffusion(0.0, &y)[(1, 0)], 0.5);
    }
}
