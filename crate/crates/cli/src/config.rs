//! Versioned JSON experiment configuration.

use nalgebra::DMatrix;
use noisepath::modulation::{control_cw, control_free, control_pulse_train, cpmg_times, uhrig_times};
use noisepath::{BoundaryCondition, ControlModulation, KernelSpec, PolynomialKernel, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema: u32,
    pub kernel: KernelConfig,
    /// Defaults to `decay_at_infinity`.
    #[serde(default)]
    pub boundary: Option<BoundaryCondition>,
    pub grid: GridConfig,
    #[serde(default)]
    pub control: Option<ControlConfig>,
    #[serde(default)]
    pub curve: Option<CurveConfig>,
    #[serde(default)]
    pub modes: Option<ModesConfig>,
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
    #[serde(default)]
    pub spectroscopy: Option<SpectroscopyConfig>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub markov: Option<MarkovConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    White {
        d0: f64,
    },
    OrnsteinUhlenbeck {
        d0: f64,
        d1: f64,
    },
    Quartic {
        d0: f64,
        d2: f64,
    },
    /// Scalar `1/S(ω) = Σ coefficients[k] ω^{2k}`.
    Stationary {
        coefficients: Vec<f64>,
    },
    Harmonic {
        d0: f64,
        d1: f64,
        alpha: f64,
    },
    /// Matrix coefficients, each row-major `dim × dim`.
    Polynomial {
        hermitian: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        antisymmetric: Vec<Option<Vec<Vec<f64>>>>,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_start: f64,
    pub t_end: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlShape {
    Free,
    HahnEcho,
    Cw,
    Cpmg,
    Uhrig,
    PulseTrain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub kind: ControlShape,
    #[serde(default = "one")]
    pub g: f64,
    /// Defaults to the grid start.
    #[serde(default)]
    pub t0: Option<f64>,
    /// Defaults to the rest of the grid.
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default)]
    pub pulses: Option<usize>,
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    /// Channel couplings for multichannel kernels; `g` is ignored when set.
    #[serde(default)]
    pub coupling: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    #[serde(default)]
    pub durations: Option<Vec<f64>>,
    #[serde(default = "default_curve_points")]
    pub points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModesConfig {
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default = "default_functions")]
    pub functions: usize,
    #[serde(default)]
    pub bispectrum: bool,
}

impl Default for ModesConfig {
    fn default() -> Self {
        Self {
            cutoff: default_cutoff(),
            functions: default_functions(),
            bispectrum: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorChoice {
    #[default]
    Covariance,
    Precision,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub factor: FactorChoice,
    /// Agreement threshold in standard errors.
    #[serde(default = "default_sigmas")]
    pub sigmas: f64,
    /// Paths written to `paths.csv`.
    #[serde(default)]
    pub dump_paths: usize,
    /// Largest lag of the path regularity analysis; off when absent.
    #[serde(default)]
    pub regularity_lag: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeConfig {
    /// The leading `count` noise eigenmodes.
    Eigen { count: usize },
    Tones {
        omegas: Vec<f64>,
        #[serde(default)]
        t0: Option<f64>,
        #[serde(default)]
        duration: Option<f64>,
        #[serde(default = "yes")]
        tapered: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub n_max: usize,
    #[serde(default)]
    pub criterion: noisepath::spectroscopy::OrderCriterion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectroscopyConfig {
    pub probes: ProbeConfig,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "one_usize")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fixed probe amplitude; adaptive when absent.
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub fit: Option<FitConfig>,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(rename = "P")]
    pub pulses: usize,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub t0: Option<f64>,
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub coupling: Option<Vec<f64>>,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovConfig {
    pub t0: f64,
    pub tf: f64,
    /// Defaults to the grid spacing.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Initial generalized state, derivative-major.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    /// Intermediate time of the Chapman–Kolmogorov check; midpoint by default.
    #[serde(default)]
    pub t1: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_curve_points() -> usize {
    50
}

fn default_cutoff() -> f64 {
    noisepath::eigenmodes::DEFAULT_CUTOFF
}

fn default_functions() -> usize {
    10
}

fn default_sigmas() -> f64 {
    4.0
}

fn default_starts() -> usize {
    noisepath::OptimizerOptions::default().starts
}

fn invalid(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

/// Parses and validates a config; errors name the offending JSON path.
pub fn parse(text: &str) -> Result<Config, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })?;
    if cfg.schema != SCHEMA_VERSION {
        return Err(invalid(
            "schema",
            format!("unsupported version {} (expected {SCHEMA_VERSION})", cfg.schema),
        ));
    }
    cfg.grid()?;
    cfg.kernel()?;
    Ok(cfg)
}

fn matrix(path: &str, rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(invalid(path, format!("expected a {dim}x{dim} matrix")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

impl Config {
    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        let g = self.grid;
        TimeGrid::new(g.t_start, g.t_end, g.n_points).map_err(|e| invalid("grid", e))
    }

    pub fn boundary(&self) -> BoundaryCondition {
        self.boundary.unwrap_or(BoundaryCondition::DecayAtInfinity)
    }

    pub fn kernel(&self) -> Result<KernelSpec, CliError> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(&format!("kernel.{field}"), format!("must be finite and non-negative, got {v}")))
            }
        };
        Ok(match &self.kernel {
            KernelConfig::White { d0 } => {
                positive("d0", *d0)?;
                KernelSpec::white(*d0)
            }
            KernelConfig::OrnsteinUhlenbeck { d0, d1 } => {
                positive("d0", *d0)?;
                positive("d1", *d1)?;
                KernelSpec::ornstein_uhlenbeck(*d0, *d1)
            }
            KernelConfig::Quartic { d0, d2 } => {
                positive("d0", *d0)?;
                positive("d2", *d2)?;
                KernelSpec::quartic(*d0, *d2)
            }
            KernelConfig::Stationary { coefficients } => {
                if coefficients.is_empty() {
                    return Err(invalid("kernel.coefficients", "needs at least one coefficient"));
                }
                if coefficients.iter().any(|c| !c.is_finite()) {
                    return Err(invalid("kernel.coefficients", "must be finite"));
                }
                KernelSpec::stationary_scalar(coefficients)
            }
            KernelConfig::Harmonic { d0, d1, alpha } => {
                positive("d0", *d0)?;
                positive("d1", *d1)?;
                positive("alpha", *alpha)?;
                KernelSpec::harmonic(*d0, *d1, *alpha)
            }
            KernelConfig::Polynomial {
                hermitian,
                antisymmetric,
            } => {
                let dim = hermitian.first().map(|m| m.len()).unwrap_or(0);
                if dim == 0 {
                    return Err(invalid("kernel.hermitian", "needs at least one non-empty matrix"));
                }
                let h = hermitian
                    .iter()
                    .enumerate()
                    .map(|(k, m)| matrix(&format!("kernel.hermitian[{k}]"), m, dim))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut a = vec![None; h.len()];
                if antisymmetric.len() > h.len() {
                    return Err(invalid("kernel.antisymmetric", "longer than kernel.hermitian"));
                }
                for (k, m) in antisymmetric.iter().enumerate() {
                    if let Some(m) = m {
                        a[k] = Some(matrix(&format!("kernel.antisymmetric[{k}]"), m, dim)?);
                    }
                }
                KernelSpec::StationaryPolynomial(PolynomialKernel {
                    dim,
                    hermitian: h,
                    antisymmetric: a,
                })
            }
        })
    }

    /// Window of the control, or the whole grid.
    pub fn window(&self, t0: Option<f64>, duration: Option<f64>) -> Result<(f64, f64), CliError> {
        let grid = self.grid()?;
        let t0 = t0.unwrap_or(grid.t_start());
        let duration = duration.unwrap_or(grid.t_end() - t0);
        Ok((t0, duration))
    }

    pub fn control_config(&self) -> Result<&ControlConfig, CliError> {
        self.control.as_ref().ok_or_else(|| invalid("control", "required by this command"))
    }

    /// The configured control over its full window.
    pub fn control(&self) -> Result<ControlModulation, CliError> {
        let c = self.control_config()?;
        let (_, duration) = self.window(c.t0, c.duration)?;
        self.control_over(duration)
    }

    /// The control family at duration `d`: pulse sequences are regenerated
    /// for the shorter window, fixed waveforms are truncated.
    pub fn control_over(&self, d: f64) -> Result<ControlModulation, CliError> {
        let c = self.control_config()?;
        let grid = self.grid()?;
        let (t0, full) = self.window(c.t0, c.duration)?;
        let pulses = |name: &str| {
            c.pulses
                .ok_or_else(|| invalid("control.pulses", format!("required for kind {name}")))
        };
        let f = match c.kind {
            ControlShape::Free => control_free(&grid, c.g, t0, d),
            ControlShape::HahnEcho => control_pulse_train(&grid, c.g, t0, d, &cpmg_times(t0, d, 1)),
            ControlShape::Cpmg => control_pulse_train(&grid, c.g, t0, d, &cpmg_times(t0, d, pulses("cpmg")?)),
            ControlShape::Uhrig => control_pulse_train(&grid, c.g, t0, d, &uhrig_times(t0, d, pulses("uhrig")?)),
            ControlShape::Cw => {
                let omega = c.omega.ok_or_else(|| invalid("control.omega", "required for kind cw"))?;
                control_cw(&grid, c.g, omega, t0, d)
            }
            ControlShape::PulseTrain => {
                let times = c
                    .times
                    .as_ref()
                    .ok_or_else(|| invalid("control.times", "required for kind pulse_train"))?;
                control_pulse_train(&grid, c.g, t0, full, times).and_then(|f| f.truncated(d))
            }
        }
        .map_err(|e| invalid("control", e))?;
        let dim = self.kernel()?.dim();
        match &c.coupling {
            Some(v) if v.len() != dim => Err(invalid(
                "control.coupling",
                format!("has {} entries, kernel has {dim} channels", v.len()),
            )),
            Some(v) => f.with_coupling(v.clone()).map_err(|e| invalid("control.coupling", e)),
            None if dim == 1 => Ok(f),
            None => Err(invalid("control.coupling", format!("required for a {dim}-channel kernel"))),
        }
    }

    pub fn modes(&self) -> ModesConfig {
        self.modes.clone().unwrap_or_default()
    }
}
