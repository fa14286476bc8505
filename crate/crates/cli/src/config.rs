//! Run configuration: JSON file, environment and flag layers resolved into a
//! [`RunConfig`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use gcmilstein::girsanov::{ErrorQuadrature, GammaParams};
use gcmilstein::oscillators::{
    gbm_exact, make_duffing_holmes, make_duffing_van_der_pol, make_gbm, make_mems_gyroscope, DuffingHolmesParams,
    DuffingVanDerPolParams, GyroParams, SpinSoftening,
};
use gcmilstein::sde::SdeSystem;
use gcmilstein::steppers::{MilsteinTermMode, SchemeKind};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const OUTPUT_DIR_ENV: &str = "GCMILSTEIN_OUTPUT_DIR";

/// A configuration problem, reported with exit code 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Oscillator {
    Dvp,
    Dh,
    Gyro,
    Gbm,
}

impl Oscillator {
    pub const NAMES: &'static str = "dvp, dh, gyro, gbm";

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dvp" => Some(Oscillator::Dvp),
            "dh" => Some(Oscillator::Dh),
            "gyro" => Some(Oscillator::Gyro),
            "gbm" => Some(Oscillator::Gbm),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Oscillator::Dvp => "dvp",
            Oscillator::Dh => "dh",
            Oscillator::Gyro => "gyro",
            Oscillator::Gbm => "gbm",
        }
    }

    fn default_dt(self) -> f64 {
        match self {
            Oscillator::Dvp | Oscillator::Gbm => 0.0625,
            Oscillator::Dh => 0.01,
            Oscillator::Gyro => 6e-6,
        }
    }

    fn default_t_end(self) -> f64 {
        match self {
            Oscillator::Dvp => 10.0,
            Oscillator::Dh => 20.0,
            Oscillator::Gyro => 0.001,
            Oscillator::Gbm => 1.0,
        }
    }

    fn default_refine(self) -> usize {
        match self {
            Oscillator::Dvp | Oscillator::Gbm => 256,
            Oscillator::Dh => 100,
            Oscillator::Gyro => 1000,
        }
    }
}

/// `ml`, `siml`, `iml`, or the Euler–Maruyama control `em`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Ml,
    Siml,
    Iml,
    Em,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ml" => Some(Scheme::Ml),
            "siml" => Some(Scheme::Siml),
            "iml" => Some(Scheme::Iml),
            "em" => Some(Scheme::Em),
            _ => None,
        }
    }

    pub fn milstein(self) -> Option<SchemeKind> {
        match self {
            Scheme::Ml => Some(SchemeKind::Explicit),
            Scheme::Siml => Some(SchemeKind::SemiImplicit),
            Scheme::Iml => Some(SchemeKind::Implicit),
            Scheme::Em => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Ml => "ml",
            Scheme::Siml => "siml",
            Scheme::Iml => "iml",
            Scheme::Em => "em",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RhoSpec {
    Named(String),
    Matrix(Vec<Vec<f64>>),
}

impl RhoSpec {
    pub fn identity() -> Self {
        RhoSpec::Named("identity".into())
    }

    /// `identity` or a JSON matrix such as `[[2,0],[0,1]]`.
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        if s == "identity" {
            return Ok(Self::identity());
        }
        serde_json::from_str::<Vec<Vec<f64>>>(s)
            .map(RhoSpec::Matrix)
            .map_err(|e| bad(format!("rho: expected \"identity\" or a JSON matrix, got '{s}' ({e})")))
    }

    pub fn gamma(&self, n: usize) -> Result<GammaParams, ConfigError> {
        match self {
            RhoSpec::Named(s) if s == "identity" => Ok(GammaParams::identity(n)),
            RhoSpec::Named(s) => Err(bad(format!("rho: unknown value '{s}' (expected \"identity\" or a matrix)"))),
            RhoSpec::Matrix(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(bad(format!("rho: must be {n}×{n} for this oscillator")));
                }
                let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
                GammaParams::new(m).map_err(|e| bad(format!("rho: {e}")))
            }
        }
    }
}

/// One configuration layer. Every field is optional; later layers win.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub oscillator: Option<String>,
    pub params: Option<BTreeMap<String, f64>>,
    pub spin_softening: Option<String>,
    pub scheme: Option<String>,
    pub corrected: Option<bool>,
    pub dt: Option<f64>,
    #[serde(rename = "T")]
    pub t_end: Option<f64>,
    #[serde(rename = "N")]
    pub n_paths: Option<usize>,
    pub seed: Option<u64>,
    pub rho: Option<RhoSpec>,
    pub milstein_mode: Option<String>,
    pub quadrature: Option<String>,
    pub base_refine: Option<usize>,
    pub record_stride: Option<usize>,
    pub refine: Option<usize>,
    pub dts: Option<Vec<f64>>,
    pub output_dir: Option<PathBuf>,
}

impl PartialConfig {
    /// Reads a JSON configuration, or the `config=` line of a metadata sidecar.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let json = metadata_config(&text).unwrap_or(&text);
        serde_json::from_str(json).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn from_env() -> Self {
        Self {
            output_dir: std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from),
            ..Self::default()
        }
    }

    /// Fields set in `over` replace those here; `params` merge key by key.
    pub fn merge(mut self, over: PartialConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f; } )* };
        }
        take!(
            oscillator, spin_softening, scheme, corrected, dt, t_end, n_paths, seed, rho, milstein_mode, quadrature,
            base_refine, record_stride, refine, dts, output_dir
        );
        if let Some(p) = over.params {
            self.params.get_or_insert_with(BTreeMap::new).extend(p);
        }
        self
    }

    pub fn resolve(self) -> Result<RunConfig, ConfigError> {
        let oscillator = match self.oscillator.as_deref() {
            None => Oscillator::Dvp,
            Some(s) => Oscillator::parse(s)
                .ok_or_else(|| bad(format!("oscillator: unknown value '{s}' (expected {})", Oscillator::NAMES)))?,
        };
        let scheme = match self.scheme.as_deref() {
            None => Scheme::Ml,
            Some(s) => Scheme::parse(s).ok_or_else(|| bad(format!("scheme: unknown value '{s}' (expected ml, siml, iml, em)")))?,
        };
        let milstein_mode = match self.milstein_mode.as_deref() {
            None => MilsteinTermMode::default(),
            Some(s) => MilsteinTermMode::from_short_name(s)
                .ok_or_else(|| bad(format!("milstein_mode: unknown value '{s}' (expected operator, outer-product)")))?,
        };
        let quadrature = match self.quadrature.as_deref() {
            None => ErrorQuadrature::default(),
            Some(s) => ErrorQuadrature::from_short_name(s)
                .ok_or_else(|| bad(format!("quadrature: unknown value '{s}' (expected trapezoid, right-point)")))?,
        };
        let spin_softening = self.spin_softening.unwrap_or_else(|| "kappa2".into());
        let dt = self.dt.unwrap_or(oscillator.default_dt());
        let cfg = RunConfig {
            oscillator,
            params: self.params.unwrap_or_default(),
            spin_softening,
            scheme,
            corrected: self.corrected.unwrap_or(false),
            dt,
            t_end: self.t_end.unwrap_or(oscillator.default_t_end()),
            n_paths: self.n_paths.unwrap_or(200),
            seed: self.seed.unwrap_or(42),
            rho: self.rho.unwrap_or_else(RhoSpec::identity),
            milstein_mode: milstein_mode.short_name().to_string(),
            quadrature: quadrature.short_name().to_string(),
            base_refine: self.base_refine.unwrap_or(1),
            record_stride: self.record_stride.unwrap_or(1),
            refine: self.refine.unwrap_or(oscillator.default_refine()),
            dts: self.dts.unwrap_or_else(|| (0..6).map(|k| dt / f64::from(1u32 << k)).collect()),
            output_dir: self.output_dir.unwrap_or_else(default_output_dir),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub oscillator: Oscillator,
    /// Parameter overrides on top of the oscillator defaults.
    pub params: BTreeMap<String, f64>,
    /// `kappa2` or `kappa1` (gyroscope only).
    pub spin_softening: String,
    pub scheme: Scheme,
    pub corrected: bool,
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    #[serde(rename = "N")]
    pub n_paths: usize,
    pub seed: u64,
    pub rho: RhoSpec,
    pub milstein_mode: String,
    pub quadrature: String,
    pub base_refine: usize,
    pub record_stride: usize,
    pub refine: usize,
    pub dts: Vec<f64>,
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

/// What a configuration builds: the system, its initial state and, for GBM,
/// the closed-form terminal state.
pub struct Problem {
    pub sys: SdeSystem,
    pub x0: DVector<f64>,
    pub exact: Option<Box<dyn Fn(&DVector<f64>, f64, &DVector<f64>) -> DVector<f64> + Sync>>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(bad(format!("dt: must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= self.dt && self.t_end.is_finite()) {
            return Err(bad(format!("T: must be at least dt ({}), got {}", self.dt, self.t_end)));
        }
        if self.n_paths == 0 {
            return Err(bad("N: must be at least 1"));
        }
        if self.base_refine == 0 {
            return Err(bad("base_refine: must be at least 1"));
        }
        if self.record_stride == 0 {
            return Err(bad("record_stride: must be at least 1"));
        }
        if self.refine == 0 {
            return Err(bad("refine: must be at least 1"));
        }
        if self.corrected && self.scheme == Scheme::Em {
            return Err(bad("scheme: em has no corrected variant"));
        }
        if !matches!(self.spin_softening.as_str(), "kappa1" | "kappa2") {
            return Err(bad(format!("spin_softening: unknown value '{}' (expected kappa2, kappa1)", self.spin_softening)));
        }
        self.mode()?;
        self.quadrature_kind()?;
        let problem = self.problem()?;
        self.rho.gamma(problem.sys.n())?;
        Ok(())
    }

    pub fn mode(&self) -> Result<MilsteinTermMode, ConfigError> {
        MilsteinTermMode::from_short_name(&self.milstein_mode)
            .ok_or_else(|| bad(format!("milstein_mode: unknown value '{}'", self.milstein_mode)))
    }

    pub fn quadrature_kind(&self) -> Result<ErrorQuadrature, ConfigError> {
        ErrorQuadrature::from_short_name(&self.quadrature)
            .ok_or_else(|| bad(format!("quadrature: unknown value '{}'", self.quadrature)))
    }

    pub fn problem(&self) -> Result<Problem, ConfigError> {
        let mut params = self.params.clone();
        let mut take = |key: &str, default: f64| params.remove(key).unwrap_or(default);
        let problem = match self.oscillator {
            Oscillator::Dvp => {
                let d = DuffingVanDerPolParams::default();
                let p = DuffingVanDerPolParams {
                    alpha: take("alpha", d.alpha),
                    sigma: take("sigma", d.sigma),
                    x0: [take("x1_0", d.x0[0]), take("x2_0", d.x0[1])],
                };
                if p.sigma < 0.0 {
                    return Err(bad("params.sigma: must be non-negative"));
                }
                Problem {
                    sys: make_duffing_van_der_pol(p),
                    x0: DVector::from_column_slice(&p.x0),
                    exact: None,
                }
            }
            Oscillator::Dh => {
                let d = DuffingHolmesParams::default();
                let p = DuffingHolmesParams {
                    eps1: take("eps1", d.eps1),
                    eps2: take("eps2", d.eps2),
                    eps3: take("eps3", d.eps3),
                    eps4: take("eps4", d.eps4),
                    x0: [take("x1_0", d.x0[0]), take("x2_0", d.x0[1])],
                };
                if p.eps4 < 0.0 {
                    return Err(bad("params.eps4: must be non-negative"));
                }
                Problem {
                    sys: make_duffing_holmes(p),
                    x0: DVector::from_column_slice(&p.x0),
                    exact: None,
                }
            }
            Oscillator::Gyro => {
                let d = GyroParams::default();
                let omega01 = take("omega01", f64::NAN);
                let omega02 = take("omega02", f64::NAN);
                let natural_frequencies = match (omega01.is_nan(), omega02.is_nan()) {
                    (true, true) => None,
                    (false, false) => Some((omega01, omega02)),
                    _ => return Err(bad("params.omega01/omega02: set both natural frequencies or neither")),
                };
                let p = GyroParams {
                    rho_density: take("rho_density", d.rho_density),
                    youngs_e: take("youngs_e", d.youngs_e),
                    radius_r: take("radius_r", d.radius_r),
                    radial_h: take("radial_h", d.radial_h),
                    axial_b: take("axial_b", d.axial_b),
                    xi: take("xi", d.xi),
                    mu0: take("mu0", d.mu0),
                    omega0_max: take("omega0_max", d.omega0_max),
                    ramp_t: take("ramp_t", d.ramp_t),
                    p_force: take("p_force", d.p_force),
                    omega_f: take("omega_f", d.omega_f),
                    delta_m: take("delta_m", d.delta_m),
                    q1_0: take("q1_0", d.q1_0),
                    natural_frequencies,
                    spin_softening: if self.spin_softening == "kappa1" {
                        SpinSoftening::Kappa1
                    } else {
                        SpinSoftening::Kappa2
                    },
                };
                let sys = make_mems_gyroscope(p).map_err(|e| bad(format!("params: {e}")))?;
                Problem {
                    sys,
                    x0: DVector::from_column_slice(&p.x0()),
                    exact: None,
                }
            }
            Oscillator::Gbm => {
                let a = take("a", 0.05);
                let b = take("b", 0.2);
                let x0 = take("x0", 1.0);
                Problem {
                    sys: make_gbm(a, b),
                    x0: DVector::from_element(1, x0),
                    exact: Some(Box::new(move |x0: &DVector<f64>, t: f64, w: &DVector<f64>| {
                        DVector::from_element(1, gbm_exact(x0[0], a, b, t, w[0]))
                    })),
                }
            }
        };
        if let Some(key) = params.keys().next() {
            return Err(bad(format!("params.{key}: unknown parameter for oscillator {}", self.oscillator.name())));
        }
        Ok(problem)
    }

    /// `<oscillator>_<run>_dt<dt>_seed<seed>`, with `run` one of `ml`,
    /// `gc-ml`, ..., `em`.
    pub fn run_name(&self) -> String {
        let label = if self.corrected {
            format!("gc-{}", self.scheme.name())
        } else {
            self.scheme.name().to_string()
        };
        format!("{}_{label}_dt{:e}_seed{}", self.oscillator.name(), self.dt, self.seed)
    }

    pub fn reference_name(&self) -> String {
        format!("{}_ref_dt{:e}_x{}_seed{}", self.oscillator.name(), self.dt, self.refine, self.seed)
    }

    pub fn convergence_name(&self) -> String {
        format!("{}_{}_converge_seed{}", self.oscillator.name(), self.scheme.name(), self.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("configuration serializes")
    }

}

fn metadata_config(text: &str) -> Option<&str> {
    text.lines().find_map(|l| l.strip_prefix("config="))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn json(s: &str) -> PartialConfig {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn defaults_follow_oscillator() {
        let c = PartialConfig::default().resolve().unwrap();
        assert_eq!(c.oscillator, Oscillator::Dvp);
        assert_eq!(c.dt, 0.0625);
        assert_eq!(c.n_paths, 200);
        let g = json(r#"{"oscillator": "gyro"}"#).resolve().unwrap();
        assert_eq!(g.dt, 6e-6);
        assert_eq!(g.refine, 1000);
        assert_eq!(g.dts.len(), 6);
    }

    #[test]
    fn later_layers_win_and_params_merge() {
        let base = json(r#"{"oscillator": "dh", "dt": 0.02, "params": {"eps1": 0.3, "eps2": 0.4}}"#);
        let over = json(r#"{"dt": 0.005, "params": {"eps2": 0.6}}"#);
        let c = base.merge(over).resolve().unwrap();
        assert_eq!(c.dt, 0.005);
        assert_eq!(c.params["eps1"], 0.3);
        assert_eq!(c.params["eps2"], 0.6);
    }

    #[test]
    fn errors_name_the_field() {
        let e = json(r#"{"oscillator": "pendulum"}"#).resolve().unwrap_err();
        assert!(e.0.starts_with("oscillator:"), "{e}");
        let e = json(r#"{"scheme": "rk4"}"#).resolve().unwrap_err();
        assert!(e.0.starts_with("scheme:"), "{e}");
        let e = json(r#"{"dt": 0}"#).resolve().unwrap_err();
        assert!(e.0.starts_with("dt:"), "{e}");
        let e = json(r#"{"params": {"beta": 1}}"#).resolve().unwrap_err();
        assert!(e.0.starts_with("params.beta:"), "{e}");
        let e = json(r#"{"rho": [[1, 0], [0, 1]]}"#).resolve().unwrap_err();
        assert!(e.0.starts_with("rho:"), "{e}");
        assert!(serde_json::from_str::<PartialConfig>(r#"{"colour": 1}"#).is_err());
    }

    #[test]
    fn metadata_round_trip() {
        let c = json(r#"{"oscillator": "gbm", "rho": [[2.0]], "params": {"a": 0.1}, "dt": 0.1, "T": 0.3, "output_dir": "runs/x"}"#)
            .resolve()
            .unwrap();
        let meta = format!("kind=gbm\nconfig={}\nn_paths=200\n", c.to_json());
        let back: PartialConfig = serde_json::from_str(metadata_config(&meta).unwrap()).unwrap();
        assert_eq!(back.resolve().unwrap(), c);
    }

    #[test]
    fn run_names_are_distinct() {
        let mut c = PartialConfig::default().resolve().unwrap();
        let a = c.run_name();
        c.corrected = true;
        let b = c.run_name();
        c.seed = 7;
        let d = c.run_name();
        assert_eq!(a, "dvp_ml_dt6.25e-2_seed42");
        assert_eq!(b, "dvp_gc-ml_dt6.25e-2_seed42");
        assert_ne!(b, d);
    }
}
