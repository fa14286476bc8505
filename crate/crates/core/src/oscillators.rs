//! Benchmark systems: Duffing–Van der Pol, Duffing–Holmes, a ring-type MEMS
//! gyroscope under angular-rate noise, and scalar geometric Brownian motion.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sde::SdeSystem;

/// `ẍ + ẋ − (α − x²)x = σ x Ẇ`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DuffingVanDerPolParams {
    pub alpha: f64,
    pub sigma: f64,
    pub x0: [f64; 2],
}

impl Default for DuffingVanDerPolParams {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            sigma: 0.2,
            x0: [-3.1, 0.0],
        }
    }
}

/// `ẍ + 2πε₁ẋ + 4π²ε₂x(x² − 1) = 4π²ε₃cos(2πt) + 4π²ε₄Ẇ`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DuffingHolmesParams {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub eps4: f64,
    pub x0: [f64; 2],
}

impl Default for DuffingHolmesParams {
    fn default() -> Self {
        Self {
            eps1: 0.25,
            eps2: 0.5,
            eps3: 0.5,
            eps4: 0.05,
            x0: [0.0, 0.0],
        }
    }
}

/// Which coefficient multiplies `Ω²` in the gyroscope stiffness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpinSoftening {
    /// `κ₁ + κ₂Ω²`, consistent with the noise linearization `2Ω₀κ₂μ₀`.
    #[default]
    Kappa2,
    /// `κ₁ + κ₁Ω²`.
    Kappa1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GyroParams {
    /// Ring density, kg/m³.
    pub rho_density: f64,
    /// Young's modulus, N/m².
    pub youngs_e: f64,
    /// Ring radius, m.
    pub radius_r: f64,
    /// Radial thickness, m.
    pub radial_h: f64,
    /// Axial thickness, m.
    pub axial_b: f64,
    /// Damping ratio.
    pub xi: f64,
    /// Angular-rate noise strength.
    pub mu0: f64,
    /// Plateau of the input angular rate, rad/s.
    pub omega0_max: f64,
    /// Duration of the angular-rate ramp, s.
    pub ramp_t: f64,
    pub p_force: f64,
    /// Forcing frequency, rad/s.
    pub omega_f: f64,
    pub delta_m: f64,
    /// Initial displacement of the driving coordinate, m.
    pub q1_0: f64,
    /// `(ω₀₁, ω₀₂)`; `None` uses `√κ₁` for both.
    pub natural_frequencies: Option<(f64, f64)>,
    pub spin_softening: SpinSoftening,
}

impl Default for GyroParams {
    fn default() -> Self {
        Self {
            rho_density: 8800.0,
            youngs_e: 210e9,
            radius_r: 500e-6,
            radial_h: 12.5e-6,
            axial_b: 12.5e-6,
            xi: 0.008,
            mu0: 14.9e-4,
            omega0_max: 2.0 * PI,
            ramp_t: 0.005,
            p_force: 6.0,
            omega_f: 2.0 * PI,
            delta_m: 0.0,
            q1_0: 1e-5,
            natural_frequencies: None,
            spin_softening: SpinSoftening::Kappa2,
        }
    }
}

impl GyroParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rho_density", self.rho_density),
            ("youngs_e", self.youngs_e),
            ("radius_r", self.radius_r),
            ("radial_h", self.radial_h),
            ("axial_b", self.axial_b),
            ("ramp_t", self.ramp_t),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("gyroscope {name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("xi", self.xi),
            ("mu0", self.mu0),
            ("omega0_max", self.omega0_max),
            ("delta_m", self.delta_m),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("gyroscope {name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn x0(&self) -> [f64; 4] {
        [self.q1_0, 0.0, 0.0, 0.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingConstants {
    pub a_t: f64,
    pub b_t: f64,
    pub c_t: f64,
    pub gamma_ring: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    /// Cross-section area, m².
    pub area: f64,
    /// Second moment of area, m⁴.
    pub inertia: f64,
}

/// Ring constants `κ₁`, `κ₂`.
pub fn compute_ring_constants(p: &GyroParams) -> RingConstants {
    let area = p.axial_b * p.radial_h;
    let inertia = p.axial_b * p.radial_h.powi(3) / 12.0;
    let (e, r) = (p.youngs_e, p.radius_r);
    let bend = e * inertia / r.powi(4);
    let stretch = e * area / r.powi(2);
    let a_t = 4.0 * bend + stretch;
    let b_t = 4.0 * bend + 4.0 * stretch;
    let c_t = 16.0 * bend + stretch;
    let ab = a_t + b_t;
    RingConstants {
        a_t,
        b_t,
        c_t,
        gamma_ring: (b_t + 4.0 * a_t) / (2.0 * ab),
        kappa1: (b_t * c_t + 4.0 * a_t * a_t) / (p.rho_density * area * ab),
        kappa2: 4.0 * (b_t + c_t - 4.0 * a_t) / ab - 4.0 * (b_t * c_t - 4.0 * a_t) / (ab * ab),
        area,
        inertia,
    }
}

/// Input angular rate: half-cosine ramp from 0 to `omega0_max` over `ramp_t`, constant after.
pub fn angular_rate(t: f64, p: &GyroParams) -> Result<f64> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::InvalidArgument(format!("angular rate requested at negative time {t}")));
    }
    Ok(ramp(t, p))
}

fn ramp(t: f64, p: &GyroParams) -> f64 {
    let s = t.clamp(0.0, p.ramp_t) / p.ramp_t;
    p.omega0_max * 0.5 * (1.0 - (PI * s).cos())
}

pub fn make_duffing_van_der_pol(p: DuffingVanDerPolParams) -> SdeSystem {
    let DuffingVanDerPolParams { alpha, sigma, .. } = p;
    SdeSystem::new(
        "duffing-van-der-pol",
        2,
        1,
        move |_, x: &DVector<f64>| DVector::from_vec(vec![x[1], (alpha - x[0] * x[0]) * x[0] - x[1]]),
        move |_, x: &DVector<f64>| DMatrix::from_column_slice(2, 1, &[0.0, sigma * x[0]]),
    )
    .with_diffusion_jacobian(move |_, _| {
        vec![DMatrix::from_column_slice(2, 1, &[0.0, sigma]), DMatrix::zeros(2, 1)]
    })
}

pub fn make_duffing_holmes(p: DuffingHolmesParams) -> SdeSystem {
    let DuffingHolmesParams { eps1, eps2, eps3, eps4, .. } = p;
    let four_pi2 = 4.0 * PI * PI;
    SdeSystem::new(
        "duffing-holmes",
        2,
        1,
        move |t, y: &DVector<f64>| {
            DVector::from_vec(vec![
                y[1],
                -2.0 * PI * eps1 * y[1] - four_pi2 * eps2 * y[0] * (-1.0 + y[0] * y[0])
                    + four_pi2 * eps3 * (2.0 * PI * t).cos(),
            ])
        },
        move |_, _| DMatrix::from_column_slice(2, 1, &[0.0, four_pi2 * eps4]),
    )
    .with_diffusion_jacobian(|_, _| vec![DMatrix::zeros(2, 1), DMatrix::zeros(2, 1)])
}

/// Four-state gyroscope `[q₁, q̇₁, q₂, q̇₂]` with a single angular-rate noise factor.
/// The angular acceleration term is dropped.
pub fn make_mems_gyroscope(p: GyroParams) -> Result<SdeSystem> {
    p.validate()?;
    let rc = compute_ring_constants(&p);
    let (w01, w02) = p.natural_frequencies.unwrap_or((rc.kappa1.sqrt(), rc.kappa1.sqrt()));
    let k1 = rc.kappa1;
    let k2 = rc.kappa2;
    let g = rc.gamma_ring;
    let soft = match p.spin_softening {
        SpinSoftening::Kappa2 => k2,
        SpinSoftening::Kappa1 => k1,
    };
    let inv_m2 = 1.0 / (1.0 + p.delta_m);
    let (xi, mu0, pf, wf) = (p.xi, p.mu0, p.p_force, p.omega_f);
    let drift = move |t: f64, x: &DVector<f64>| {
        let om = ramp(t, &p);
        let stiff = k1 + soft * om * om;
        DVector::from_vec(vec![
            x[1],
            -stiff * x[0] - 2.0 * xi * w01 * x[1] + 2.0 * om * g * x[3] + pf * (wf * t).cos(),
            x[3],
            (-2.0 * om * g * x[1] - stiff * x[2] - 2.0 * xi * w02 * x[3]) * inv_m2,
        ])
    };
    let diffusion = move |t: f64, x: &DVector<f64>| {
        let om = ramp(t, &p);
        DMatrix::from_column_slice(
            4,
            1,
            &[
                0.0,
                -2.0 * om * k2 * mu0 * x[0] + 2.0 * mu0 * g * x[3],
                0.0,
                (-2.0 * mu0 * g * x[1] - 2.0 * om * k2 * mu0 * x[2]) * inv_m2,
            ],
        )
    };
    let jacobian = move |t: f64, _: &DVector<f64>| {
        let om = ramp(t, &p);
        let col = |r2: f64, r4: f64| DMatrix::from_column_slice(4, 1, &[0.0, r2, 0.0, r4 * inv_m2]);
        vec![
            col(-2.0 * om * k2 * mu0, 0.0),
            col(0.0, -2.0 * mu0 * g),
            col(0.0, -2.0 * om * k2 * mu0),
            col(2.0 * mu0 * g, 0.0),
        ]
    };
    Ok(SdeSystem::new("mems-gyroscope", 4, 1, drift, diffusion).with_diffusion_jacobian(jacobian))
}

/// `dX = aX dt + bX dW`
pub fn make_gbm(a: f64, b: f64) -> SdeSystem {
    SdeSystem::new(
        "gbm",
        1,
        1,
        move |_, x: &DVector<f64>| x * a,
        move |_, x: &DVector<f64>| DMatrix::from_element(1, 1, b * x[0]),
    )
    .with_diffusion_jacobian(move |_, _| vec![DMatrix::from_element(1, 1, b)])
}

/// `X₀ exp((a − b²/2) t + b W_t)`
pub fn gbm_exact(x0: f64, a: f64, b: f64, t: f64, w: f64) -> f64 {
    x0 * ((a - 0.5 * b * b) * t + b * w).exp()
}
