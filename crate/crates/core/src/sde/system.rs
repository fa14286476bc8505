use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type VectorField = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// `jac(t, x)[k]` is the m×n matrix `∂f/∂x_k`.
pub type JacobianField = Arc<dyn Fn(f64, &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;

/// Finite-difference step used for the diffusion Jacobian fallback.
pub fn jacobian_fd_step(xk: f64) -> f64 {
    1e-6 * (1.0 + xk.abs())
}

/// An Itô SDE `dX = g(t, X) dt + f(t, X) dW` with `m` states and `n` noise factors.
///
/// Systems are immutable once built and cheap to clone (the coefficient
/// fields are reference counted), so one instance can be shared by every
/// path of an ensemble.
#[derive(Clone)]
pub struct SdeSystem {
    m: usize,
    n: usize,
    drift: VectorField,
    diffusion: MatrixField,
    diffusion_jacobian: Option<JacobianField>,
    fd_fallback: bool,
    label: String,
}

impl fmt::Debug for SdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeSystem")
            .field("label", &self.label)
            .field("m", &self.m)
            .field("n", &self.n)
            .field("analytic_jacobian", &self.diffusion_jacobian.is_some())
            .field("fd_fallback", &self.fd_fallback)
            .finish()
    }
}

impl SdeSystem {
    pub fn new<G, F>(label: impl Into<String>, m: usize, n: usize, drift: G, diffusion: F) -> Self
    where
        G: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        F: Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            m,
            n,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            diffusion_jacobian: None,
            fd_fallback: true,
            label: label.into(),
        }
    }

    /// Attach an analytic diffusion Jacobian, `jac(t, x)[k] = ∂f/∂x_k`.
    pub fn with_diffusion_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(f64, &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    {
        self.diffusion_jacobian = Some(Arc::new(jac));
        self
    }

    /// Disable the central-difference Jacobian used when no analytic one is attached.
    pub fn with_fd_fallback(mut self, enabled: bool) -> Self {
        self.fd_fallback = enabled;
        self
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.diffusion_jacobian.is_some()
    }

    pub fn drift(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let g = (self.drift)(t, x);
        debug_assert_eq!(g.len(), self.m, "drift of `{}` has wrong length", self.label);
        g
    }

    pub fn diffusion(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        let f = (self.diffusion)(t, x);
        debug_assert_eq!(f.shape(), (self.m, self.n), "diffusion of `{}` has wrong shape", self.label);
        f
    }

    /// Per-factor column sums `Σ_k f^{k,l}(t, x)`.
    pub fn diffusion_summary(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        column_sums(&self.diffusion(t, x))
    }

    /// Analytic Jacobian when attached, otherwise the central-difference fallback.
    pub fn diffusion_jacobian(&self, t: f64, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        match &self.diffusion_jacobian {
            Some(jac) => Ok(jac(t, x)),
            None if self.fd_fallback => Ok(self.fd_diffusion_jacobian(t, x)),
            None => Err(Error::MissingJacobian(self.label.clone())),
        }
    }

    /// Central differences of the diffusion with `h = 1e-6 (1 + |x_k|)`.
    pub fn fd_diffusion_jacobian(&self, t: f64, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        (0..self.m)
            .map(|k| {
                let h = jacobian_fd_step(x[k]);
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                (self.diffusion(t, &xp) - self.diffusion(t, &xm)) / (2.0 * h)
            })
            .collect()
    }

    /// Check the output shapes of drift, diffusion and (if attached) the Jacobian at one point.
    pub fn check_shapes(&self, t: f64, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.m {
            return Err(Error::Dimension(format!(
                "`{}` expects a state of length {}, got {}",
                self.label,
                self.m,
                x.len()
            )));
        }
        let g = (self.drift)(t, x);
        if g.len() != self.m {
            return Err(Error::Dimension(format!(
                "drift of `{}` returned {} rows, expected {}",
                self.label,
                g.len(),
                self.m
            )));
        }
        let f = (self.diffusion)(t, x);
        if f.shape() != (self.m, self.n) {
            return Err(Error::Dimension(format!(
                "diffusion of `{}` returned {:?}, expected ({}, {})",
                self.label,
                f.shape(),
                self.m,
                self.n
            )));
        }
        if let Some(jac) = &self.diffusion_jacobian {
            let j = jac(t, x);
            if j.len() != self.m || j.iter().any(|d| d.shape() != (self.m, self.n)) {
                return Err(Error::Dimension(format!(
                    "diffusion Jacobian of `{}` must be {} matrices of shape ({}, {})",
                    self.label, self.m, self.m, self.n
                )));
            }
        }
        Ok(())
    }

    /// Largest discrepancy `|a - b| / (1 + max(|a|, |b|))` between the analytic
    /// Jacobian and central differences over `samples`. Zero when no analytic
    /// Jacobian is attached.
    pub fn jacobian_discrepancy(&self, samples: &[(f64, DVector<f64>)]) -> f64 {
        let Some(jac) = &self.diffusion_jacobian else {
            return 0.0;
        };
        let mut worst = 0.0_f64;
        for (t, x) in samples {
            let analytic = jac(*t, x);
            let numeric = self.fd_diffusion_jacobian(*t, x);
            for (a, b) in analytic.iter().zip(&numeric) {
                for (p, q) in a.iter().zip(b.iter()) {
                    let scale = 1.0 + p.abs().max(q.abs());
                    worst = worst.max((p - q).abs() / scale);
                }
            }
        }
        worst
    }
}

pub(crate) fn column_sums(f: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(f.ncols(), f.column_iter().map(|c| c.sum()))
}
