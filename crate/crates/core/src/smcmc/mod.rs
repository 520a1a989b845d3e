//! Sequential MCMC filters.
//!
//! At each observation time a random-walk Metropolis chain targets the
//! mixture `pi(z, j) ~ g(z, y) f(Phi(Z_prev^(j)), z)` over the state and an
//! auxiliary index into the previous samples. The localized filter runs the
//! same chain on the coordinates of the subdomains that contain observations
//! and copies noisy forecasts everywhere else.

mod filter;
mod kernel;

pub use filter::{lsmcmc_step, smcmc_step, SampleBank, StepDiagnostics, StepOutput};
pub use kernel::{propose_index, rwm_joint_kernel, ChainOutput, MixtureTarget, Scratch};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// How the auxiliary index proposal is corrected at the ends of the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexWalk {
    /// A factor `q` on moves that leave a boundary index, nothing else.
    #[default]
    AsPrinted,
    /// The full Hastings ratio of the walk, which also corrects moves into a
    /// boundary index.
    Reversible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainConfig {
    /// Retained samples.
    pub n: usize,
    pub n_burn: usize,
    /// Index move probability in `(0, 1/2]`.
    pub q: f64,
    /// `c` in `Q' = c^2 Q`.
    pub proposal_scale: f64,
    /// Use `c / sqrt(dim)` for a chain of dimension `dim`.
    pub scale_with_dimension: bool,
    pub index_walk: IndexWalk,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            n_burn: 500,
            q: 0.2,
            proposal_scale: 0.5,
            scale_with_dimension: false,
            index_walk: IndexWalk::AsPrinted,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("N", "need at least one retained sample"));
        }
        if !(self.q > 0.0 && self.q <= 0.5) {
            return Err(Error::param("q", format!("must lie in (0, 1/2], got {}", self.q)));
        }
        if !(self.proposal_scale > 0.0) || !self.proposal_scale.is_finite() {
            return Err(Error::param("proposal_scale", format!("must be positive, got {}", self.proposal_scale)));
        }
        Ok(())
    }

    pub fn effective_scale(&self, dim: usize) -> f64 {
        if self.scale_with_dimension {
            self.proposal_scale / (dim.max(1) as f64).sqrt()
        } else {
            self.proposal_scale
        }
    }
}

/// Sample average of `phi` over the columns of `samples`.
pub fn estimate(samples: &DMatrix<f64>, phi: impl Fn(&[f64]) -> f64) -> f64 {
    let d = samples.nrows();
    let n = samples.ncols();
    samples.as_slice().chunks(d).map(phi).sum::<f64>() / n as f64
}

/// Sample mean, the estimate for `phi = identity`.
pub fn filter_mean(samples: &DMatrix<f64>) -> DVector<f64> {
    samples.column_mean()
}

/// Coordinatewise average of per-replica filter means.
pub fn multi_run_mean(means: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = means.first().ok_or_else(|| Error::param("M", "need at least one replica"))?;
    let mut acc = DVector::zeros(first.len());
    for m in means {
        if m.len() != first.len() {
            return Err(Error::DimensionMismatch {
                context: "replica means",
                expected: first.len(),
                actual: m.len(),
            });
        }
        acc += m;
    }
    Ok(acc / means.len() as f64)
}
