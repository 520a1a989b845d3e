//! Forward maps and transition densities.
//!
//! States are flat vectors of `fields` blocks, each `nx * ny` long in grid
//! order (`i + j * nx`). The linear model has one field; the shallow-water
//! model carries depth, `u` and `v`.

mod snapshot;
mod swe;

pub use snapshot::Snapshot;
pub use swe::{BoundaryProvider, Coriolis, FixedBoundary, LinearTrendBoundary, StepReport, SweModel};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::noise::{CovarianceOperator, RestrictedCovariance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateLayout {
    pub grid: GridSpec,
    pub fields: usize,
}

impl StateLayout {
    pub fn points_per_field(&self) -> usize {
        self.grid.points()
    }

    pub fn dim(&self) -> usize {
        self.fields * self.grid.points()
    }

    /// State index of field `f` at grid point `p`.
    pub fn index(&self, f: usize, p: usize) -> usize {
        f * self.grid.points() + p
    }
}

/// Sees the state at the start of each substep: `(l, t_l, state)`.
pub type SubstepObserver<'a> = dyn FnMut(usize, f64, &[f64]) -> Result<()> + 'a;

pub trait Dynamics: Send + Sync {
    fn layout(&self) -> StateLayout;

    /// Substeps per observation interval.
    fn substeps(&self) -> usize;

    /// `Phi(z, t_prev; t_next)` written into `out`.
    fn propagate_into(
        &self,
        z: &[f64],
        t_prev: f64,
        t_next: f64,
        out: &mut [f64],
        observer: Option<&mut SubstepObserver<'_>>,
    ) -> Result<()>;

    fn propagate(&self, z: &DVector<f64>, t_prev: f64, t_next: f64) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(z.len());
        self.propagate_into(z.as_slice(), t_prev, t_next, out.as_mut_slice(), None)?;
        Ok(out)
    }
}

/// `Z_{k+1} = a Z_k + noise`; this type holds the deterministic part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearModel {
    pub grid: GridSpec,
    pub a_scale: f64,
    pub sigma_z: f64,
}

impl LinearModel {
    pub fn new(grid: GridSpec, a_scale: f64, sigma_z: f64) -> Result<Self> {
        if !(a_scale.abs() <= 1.0) {
            return Err(Error::param("a_scale", format!("|a| must be at most 1, got {a_scale}")));
        }
        if !(sigma_z >= 0.0) || !sigma_z.is_finite() {
            return Err(Error::param("sigma_z", format!("must be finite and non-negative, got {sigma_z}")));
        }
        Ok(Self { grid, a_scale, sigma_z })
    }

    pub fn noise(&self) -> CovarianceOperator {
        CovarianceOperator::Diagonal {
            variance: self.sigma_z * self.sigma_z,
            dim: self.grid.points(),
        }
    }
}

pub fn linear_forward(model: &LinearModel, z: &DVector<f64>) -> DVector<f64> {
    z * model.a_scale
}

impl Dynamics for LinearModel {
    fn layout(&self) -> StateLayout {
        StateLayout {
            grid: self.grid,
            fields: 1,
        }
    }

    fn substeps(&self) -> usize {
        1
    }

    fn propagate_into(
        &self,
        z: &[f64],
        t_prev: f64,
        _t_next: f64,
        out: &mut [f64],
        observer: Option<&mut SubstepObserver<'_>>,
    ) -> Result<()> {
        check_len("linear propagate", self.grid.points(), z.len())?;
        check_len("linear propagate output", z.len(), out.len())?;
        if let Some(obs) = observer {
            obs(0, t_prev, z)?;
        }
        for (o, v) in out.iter_mut().zip(z) {
            *o = self.a_scale * v;
        }
        Ok(())
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

/// `log f(z | z_prev)` up to a constant, where `propagated = Phi(z_prev)`.
pub fn transition_logpdf(cov: &CovarianceOperator, propagated: &[f64], z: &[f64]) -> Result<f64> {
    check_len("transition density", propagated.len(), z.len())?;
    let diff: Vec<f64> = z.iter().zip(propagated).map(|(a, b)| a - b).collect();
    cov.log_density(&diff)
}

/// Localized transition density on vectors already restricted to the
/// coordinates of `cov`.
pub fn restricted_transition_logpdf(cov: &RestrictedCovariance<'_>, propagated: &[f64], z: &[f64]) -> Result<f64> {
    check_len("restricted transition density", cov.dim(), z.len())?;
    check_len("restricted transition density", cov.dim(), propagated.len())?;
    let diff: Vec<f64> = z.iter().zip(propagated).map(|(a, b)| a - b).collect();
    let mut scratch = DVector::zeros(0);
    Ok(cov.log_density(&diff, &mut scratch))
}
