//! Experiment configuration, read from TOML.
//!
//! ```toml
//! [experiment]
//! steps = 100          # T
//! replicas = 20        # M
//! data_seed = 1
//! seeds = [10, 11]     # optional; defaults to base_seed + m
//! base_seed = 100
//! out = "results"
//!
//! [model]
//! kind = "linear"      # or "swe"
//! nx = 33
//! ny = 33
//!
//! [observations]
//! kind = "swath"       # or "drifters"
//! width = 7
//! sigma_y = 0.05
//!
//! [[filters]]
//! kind = "lsmcmc"      # kf | enkf | lenkf | smcmc | lsmcmc
//! n = 4000
//! n_burn = 2000
//! gamma = 256
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use lsmcmc_core::grid::{make_partition, GridSpec};
use lsmcmc_core::observations::SwathConfig;
use lsmcmc_core::smcmc::{ChainConfig, IndexWalk};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelConfig,
    pub observations: ObservationConfig,
    pub filters: Vec<FilterConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Observation times `T`.
    pub steps: usize,
    /// Independent filter runs `M`.
    pub replicas: usize,
    /// Seed of the truth, the observations and the prior ensemble reference.
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    /// One filter seed per replica; when absent replica `m` uses `base_seed + m`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_base_seed")]
    pub base_seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads; 0 means one per core.
    #[serde(default)]
    pub threads: usize,
    /// Metric threshold; defaults to `sigma_y / 2`.
    #[serde(default)]
    pub threshold: Option<f64>,
}

fn default_data_seed() -> u64 {
    1
}

fn default_base_seed() -> u64 {
    1000
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Linear(LinearConfig),
    Swe(SweConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "one")]
    pub dx: f64,
    #[serde(default = "one")]
    pub dy: f64,
    /// `A = a I`.
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_sigma")]
    pub sigma_z: f64,
    /// The first `floor(d/3)` entries of `z0` are `-amplitude * U[0, 1]`.
    #[serde(default = "default_z0_amplitude")]
    pub z0_amplitude: f64,
}

fn one() -> f64 {
    1.0
}

fn default_a() -> f64 {
    0.25
}

fn default_sigma() -> f64 {
    0.05
}

fn default_z0_amplitude() -> f64 {
    0.15
}

/// Synthetic basin: a flat bottom of depth `depth` with a linear slope and
/// a Gaussian surface bump as the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweConfig {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    /// Time between observations.
    pub tau_obs: f64,
    /// Solver steps per observation interval `L`.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_depth")]
    pub depth: f64,
    /// Relative change of depth from west to east.
    #[serde(default)]
    pub depth_slope: f64,
    #[serde(default = "default_g")]
    pub g: f64,
    #[serde(default)]
    pub f0: f64,
    #[serde(default)]
    pub beta: f64,
    /// Sine modes `J` of the state noise.
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    pub bump_height: f64,
    /// Bump radius in grid spacings.
    pub bump_radius: f64,
}

fn default_substeps() -> usize {
    10
}

fn default_depth() -> f64 {
    100.0
}

fn default_g() -> f64 {
    9.81
}

fn default_modes() -> usize {
    8
}

fn default_noise_sigma() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ObservationConfig {
    Swath {
        #[serde(default = "default_width")]
        width: usize,
        #[serde(default = "one")]
        slope: f64,
        /// Columns moved per observation; defaults to the width.
        #[serde(default)]
        stride: Option<usize>,
        #[serde(default)]
        phase: usize,
        sigma_y: f64,
        /// Observed fields; `[0]` is the first field.
        #[serde(default = "default_fields")]
        fields: Vec<usize>,
    },
    Drifters {
        sigma_y: f64,
        /// Drifter CSV; synthetic drifters are generated when absent.
        #[serde(default)]
        file: Option<PathBuf>,
        /// Number of synthetic drifters.
        #[serde(default = "default_drifters")]
        count: usize,
        /// Forward runs averaged into the reference.
        #[serde(default = "default_prior_runs")]
        prior_runs: usize,
    },
}

fn default_width() -> usize {
    7
}

fn default_fields() -> Vec<usize> {
    vec![0]
}

fn default_drifters() -> usize {
    6
}

fn default_prior_runs() -> usize {
    50
}

impl ObservationConfig {
    pub fn sigma_y(&self) -> f64 {
        match self {
            Self::Swath { sigma_y, .. } | Self::Drifters { sigma_y, .. } => *sigma_y,
        }
    }

    pub fn swath(&self) -> Option<SwathConfig> {
        match *self {
            Self::Swath {
                width, slope, stride, phase, ..
            } => Some(SwathConfig {
                width,
                slope_mag: slope,
                stride: stride.unwrap_or(width),
                phase,
            }),
            Self::Drifters { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WalkConfig {
    #[default]
    Printed,
    Reversible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FilterConfig {
    Kf,
    Enkf {
        n: usize,
    },
    Lenkf {
        n: usize,
        gamma: usize,
        /// Taper length in grid spacings.
        r: f64,
        #[serde(default = "default_w0")]
        w0: f64,
    },
    Smcmc(ChainSettings),
    /// Needs `gamma`.
    Lsmcmc(ChainSettings),
}

fn default_w0() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSettings {
    pub n: usize,
    pub n_burn: usize,
    /// Requested subdomains of the localized filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<usize>,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default = "default_scale")]
    pub proposal_scale: f64,
    #[serde(default)]
    pub scale_with_dimension: bool,
    #[serde(default)]
    pub index_walk: WalkConfig,
}

fn default_q() -> f64 {
    0.2
}

fn default_scale() -> f64 {
    0.5
}

impl ChainSettings {
    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            n: self.n,
            n_burn: self.n_burn,
            q: self.q,
            proposal_scale: self.proposal_scale,
            scale_with_dimension: self.scale_with_dimension,
            index_walk: match self.index_walk {
                WalkConfig::Printed => IndexWalk::AsPrinted,
                WalkConfig::Reversible => IndexWalk::Reversible,
            },
        }
    }
}

impl FilterConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Kf => "kf",
            Self::Enkf { .. } => "enkf",
            Self::Lenkf { .. } => "lenkf",
            Self::Smcmc(_) => "smcmc",
            Self::Lsmcmc { .. } => "lsmcmc",
        }
    }

    /// Samples or members, when the filter has any.
    pub fn samples(&self) -> Option<usize> {
        match self {
            Self::Kf => None,
            Self::Enkf { n } | Self::Lenkf { n, .. } => Some(*n),
            Self::Smcmc(c) | Self::Lsmcmc(c) => Some(c.n),
        }
    }

    pub fn burn_in(&self) -> Option<usize> {
        match self {
            Self::Smcmc(c) | Self::Lsmcmc(c) => Some(c.n_burn),
            _ => None,
        }
    }

    pub fn gamma(&self) -> Option<usize> {
        match self {
            Self::Lenkf { gamma, .. } => Some(*gamma),
            Self::Lsmcmc(c) => c.gamma,
            _ => None,
        }
    }

    pub fn taper_length(&self) -> Option<f64> {
        match self {
            Self::Lenkf { r, .. } => Some(*r),
            _ => None,
        }
    }

    /// Whether two runs of this filter may differ (and so need replicas).
    pub fn is_random(&self) -> bool {
        !matches!(self, Self::Kf)
    }
}

impl ModelConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        Ok(match *self {
            Self::Linear(c) => GridSpec::new(c.nx, c.ny, c.dx, c.dy)?,
            Self::Swe(c) => GridSpec::new(c.nx, c.ny, c.dx, c.dy)?,
        })
    }

    pub fn fields(&self) -> usize {
        match self {
            Self::Linear(_) => 1,
            Self::Swe(_) => 3,
        }
    }

    /// Time between observations.
    pub fn tau_obs(&self) -> f64 {
        match self {
            Self::Linear(_) => 1.0,
            Self::Swe(c) => c.tau_obs,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Filter seed of replica `m`.
    pub fn seed(&self, m: usize) -> u64 {
        match &self.experiment.seeds {
            Some(s) => s[m],
            None => self.experiment.base_seed + m as u64,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.experiment.threshold.unwrap_or(0.5 * self.observations.sigma_y())
    }

    /// Checks every parameter that a run would use.
    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        ensure!(e.steps >= 1, "steps must be at least 1");
        ensure!(e.replicas >= 1, "replicas must be at least 1");
        if let Some(s) = &e.seeds {
            ensure!(
                s.len() >= e.replicas,
                "{} seeds given for {} replicas",
                s.len(),
                e.replicas
            );
        }
        if let Some(t) = e.threshold {
            ensure!(t > 0.0, "threshold must be positive, got {t}");
        }
        let grid = self.model.grid()?;
        match self.model {
            ModelConfig::Linear(c) => {
                lsmcmc_core::dynamics::LinearModel::new(grid, c.a, c.sigma_z)?;
                ensure!(c.z0_amplitude.is_finite(), "z0_amplitude must be finite");
            }
            ModelConfig::Swe(c) => {
                ensure!(c.tau_obs > 0.0, "tau_obs must be positive");
                ensure!(c.substeps >= 1, "substeps must be at least 1");
                ensure!(c.depth > 0.0, "depth must be positive");
                ensure!(c.depth_slope.abs() < 1.0, "depth_slope must lie in (-1, 1)");
                ensure!(c.g > 0.0, "g must be positive");
                ensure!(c.modes >= 1, "modes must be at least 1");
                ensure!(c.noise_sigma >= 0.0, "noise_sigma must be non-negative");
                ensure!(c.bump_radius > 0.0, "bump_radius must be positive");
                ensure!(grid.nx >= 3 && grid.ny >= 3, "shallow-water grid needs an interior");
            }
        }
        let sigma_y = self.observations.sigma_y();
        ensure!(sigma_y > 0.0 && sigma_y.is_finite(), "sigma_y must be positive, got {sigma_y}");
        match &self.observations {
            ObservationConfig::Swath { fields, .. } => {
                self.observations.swath().unwrap().validate(&grid)?;
                ensure!(!fields.is_empty(), "at least one observed field");
                for &f in fields {
                    ensure!(f < self.model.fields(), "observed field {f} does not exist");
                }
            }
            ObservationConfig::Drifters { file, count, prior_runs, .. } => {
                ensure!(matches!(self.model, ModelConfig::Swe(_)), "drifters need the shallow-water model");
                ensure!(file.is_some() || *count >= 1, "need at least one drifter");
                ensure!(*prior_runs >= 1, "prior_runs must be at least 1");
            }
        }
        ensure!(!self.filters.is_empty(), "no filters selected");
        for f in &self.filters {
            match *f {
                FilterConfig::Kf => {
                    if !matches!(self.model, ModelConfig::Linear(_)) {
                        bail!("the Kalman filter needs the linear model");
                    }
                }
                FilterConfig::Enkf { n } => ensure!(n >= 2, "enkf needs n >= 2"),
                FilterConfig::Lenkf { n, gamma, r, w0 } => {
                    ensure!(n >= 2, "lenkf needs n >= 2");
                    make_partition(&grid, gamma)?;
                    ensure!(r > 0.0, "r must be positive");
                    ensure!(w0 > 0.0 && w0 < 1.0, "w0 must lie in (0, 1)");
                }
                FilterConfig::Smcmc(c) => {
                    c.chain_config().validate()?;
                    ensure!(c.gamma.is_none(), "smcmc takes no gamma; use lsmcmc");
                }
                FilterConfig::Lsmcmc(c) => {
                    c.chain_config().validate()?;
                    let gamma = c.gamma.context("lsmcmc needs gamma")?;
                    make_partition(&grid, gamma)?;
                }
            }
        }
        Ok(())
    }
}
