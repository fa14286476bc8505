//! Uniform time grids and seeded Brownian increments.
//!
//! # Seeding contract
//!
//! Every increment is a deterministic function of `(master_seed, path_index,
//! step, factor)`. The generator is ChaCha8 keyed by `master_seed`, with
//! `path_index` selecting the stream and `step * n + factor` selecting the
//! 64-bit block inside that stream. A path can therefore be regenerated in
//! isolation, in any order and on any thread, and always yields the same
//! bits. Uniforms are formed from the top 53 bits as `(k + 0.5) / 2^53` and
//! mapped to standard normals with the inverse normal CDF.

use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

/// A uniform grid `t_i = t0 + i * dt`, `i = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt must be positive and finite, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(Error::InvalidGrid(format!("t0 must be finite, got {t0}")));
        }
        Ok(Self { t0, dt, steps })
    }

    /// Smallest grid starting at `t0` with spacing `dt` that reaches `t_end`
    /// (up to a relative slack of 1e-9 steps).
    pub fn covering(t0: f64, dt: f64, t_end: f64) -> Result<Self> {
        if !(t_end - t0 >= dt) {
            return Err(Error::InvalidGrid(format!(
                "horizon {} must be at least one step of {dt}",
                t_end - t0
            )));
        }
        let steps = ((t_end - t0) / dt - 1e-9).ceil() as usize;
        Self::new(t0, dt, steps)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.steps)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    /// The grid with `factor` times finer spacing over the same span.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("refine factor must be at least 1".into()));
        }
        Self::new(self.t0, self.dt / factor as f64, self.steps * factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedInfo {
    pub master_seed: u64,
    pub path_index: u64,
}

/// Brownian increments of one path: column `i` holds `ΔW` over `[t_i, t_{i+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerIncrements {
    data: DMatrix<f64>,
    dt: f64,
    seed_info: SeedInfo,
}

impl WienerIncrements {
    pub fn from_matrix(data: DMatrix<f64>, dt: f64, seed_info: SeedInfo) -> Self {
        Self { data, dt, seed_info }
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed_info(&self) -> SeedInfo {
        self.seed_info
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn steps(&self) -> usize {
        self.data.ncols()
    }

    pub fn step(&self, i: usize) -> nalgebra::DVector<f64> {
        self.data.column(i).into_owned()
    }
}

/// Map a uniform in (0, 1) to a standard normal by the inverse CDF.
pub fn standard_normal_from_uniform(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

fn uniform_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Generator positioned at block `counter` of the stream for `path_index`.
fn keyed_stream(master_seed: u64, path_index: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path_index);
    rng.set_word_pos(2 * counter as u128);
    rng
}

/// Standard normals for `(master_seed, path_index)` at counters `first..first + count`.
pub fn standard_normals(master_seed: u64, path_index: u64, first: u64, count: usize) -> Vec<f64> {
    let mut rng = keyed_stream(master_seed, path_index, first);
    (0..count)
        .map(|_| standard_normal_from_uniform(uniform_open(rng.next_u64())))
        .collect()
}

/// Seeded `N(0, dt I_n)` increments for every step of `grid`.
pub fn generate_increments(grid: &TimeGrid, n: usize, master_seed: u64, path_index: u64) -> WienerIncrements {
    let sqrt_dt = grid.dt().sqrt();
    let z = standard_normals(master_seed, path_index, 0, n * grid.steps());
    // column-major storage: entry (l, i) sits at i * n + l, matching the counter layout
    let data = DMatrix::from_iterator(n, grid.steps(), z.into_iter().map(|v| v * sqrt_dt));
    WienerIncrements {
        data,
        dt: grid.dt(),
        seed_info: SeedInfo {
            master_seed,
            path_index,
        },
    }
}

/// Sum consecutive blocks of `factor` increments.
pub fn coarsen(fine: &WienerIncrements, factor: usize) -> Result<WienerIncrements> {
    if factor == 0 {
        return Err(Error::InvalidArgument("coarsening factor must be at least 1".into()));
    }
    if fine.steps() % factor != 0 {
        return Err(Error::GridMismatch(format!(
            "coarsening factor {factor} does not divide {} steps",
            fine.steps()
        )));
    }
    let coarse_steps = fine.steps() / factor;
    let mut data = DMatrix::zeros(fine.n(), coarse_steps);
    for j in 0..coarse_steps {
        for l in 0..fine.n() {
            let mut acc = 0.0;
            for i in j * factor..(j + 1) * factor {
                acc += fine.data[(l, i)];
            }
            data[(l, j)] = acc;
        }
    }
    Ok(WienerIncrements {
        data,
        dt: fine.dt * factor as f64,
        seed_info: fine.seed_info,
    })
}

/// Increments on `grid` obtained by generating on a grid `base_refine` times
/// finer and coarsening. Runs that share `(master_seed, path_index)` and the
/// same base resolution see the same Brownian path.
pub fn path_increments(
    grid: &TimeGrid,
    n: usize,
    master_seed: u64,
    path_index: u64,
    base_refine: usize,
) -> Result<WienerIncrements> {
    if base_refine == 1 {
        return Ok(generate_increments(grid, n, master_seed, path_index));
    }
    let fine = generate_increments(&grid.refine(base_refine)?, n, master_seed, path_index);
    coarsen(&fine, base_refine)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dt: f64, steps: usize) -> TimeGrid {
        TimeGrid::new(0.0, dt, steps).unwrap()
    }

    #[test]
    fn empty_grid_gives_empty_matrix() {
        let w = generate_increments(&grid(0.1, 0), 2, 7, 0);
        assert_eq!(w.data().shape(), (2, 0));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate_increments(&grid(0.01, 64), 3, 42, 5);
        let b = generate_increments(&grid(0.01, 64), 3, 42, 5);
        assert_eq!(a, b);
        let c = generate_increments(&grid(0.01, 64), 3, 42, 6);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn counter_layout_allows_random_access() {
        let all = standard_normals(9, 3, 0, 100);
        let tail = standard_normals(9, 3, 60, 40);
        assert_eq!(&all[60..], &tail[..]);
    }

    #[test]
    fn gaussian_moments() {
        let dt = 0.01;
        let w = generate_increments(&grid(dt, 100_000), 1, 2024, 0);
        let n = w.steps() as f64;
        let mean = w.data().sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 * (dt / n).sqrt(), "mean {mean}");
        assert!((var / dt - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn inverse_cdf_matches_known_quantiles() {
        assert!(standard_normal_from_uniform(0.5).abs() < 1e-15);
        assert!((standard_normal_from_uniform(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((standard_normal_from_uniform(0.025) + 1.959963984540054).abs() < 1e-12);
    }

    #[test]
    fn coarsen_identity_and_sums() {
        let w = WienerIncrements::from_matrix(
            DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]),
            0.5,
            SeedInfo { master_seed: 0, path_index: 0 },
        );
        assert_eq!(coarsen(&w, 1).unwrap(), w);
        let c = coarsen(&w, 2).unwrap();
        assert_eq!(c.data().as_slice(), &[3.0, 7.0]);
        assert_eq!(c.dt(), 1.0);
        assert!(matches!(coarsen(&w, 3), Err(Error::GridMismatch(_))));
        assert!(coarsen(&w, 0).is_err());
    }

    #[test]
    fn grid_times_use_index_multiplication() {
        let g = grid(0.1, 10);
        assert_eq!(g.time(7), 0.0 + 7.0 * 0.1);
        assert!(TimeGrid::new(0.0, 0.0, 3).is_err());
        assert!(TimeGrid::new(0.0, -1.0, 3).is_err());
        assert_eq!(TimeGrid::covering(0.0, 6e-6, 1e-3).unwrap().steps(), 167);
        assert_eq!(TimeGrid::covering(0.0, 0.0625, 10.0).unwrap().steps(), 160);
        assert!(TimeGrid::covering(0.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn shared_base_resolution_couples_paths() {
        let coarse = grid(0.25, 8);
        let fine = generate_increments(&coarse.refine(16).unwrap(), 2, 11, 4);
        let via_base = path_increments(&coarse, 2, 11, 4, 16).unwrap();
        assert_eq!(coarsen(&fine, 16).unwrap(), via_base);
    }
}
