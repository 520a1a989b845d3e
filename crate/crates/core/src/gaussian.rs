//! Kalman filter, stochastic EnKF and its R-localized variant.
//!
//! Inverses are never formed: gains come from Cholesky solves, in
//! observation space or, through the Woodbury identity, in ensemble space.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dynamics::{Dynamics, LinearModel, StateLayout};
use crate::error::{Error, Result};
use crate::grid::{expand_fields, Partition};
use crate::noise::CovarianceOperator;
use crate::observations::ObservationBatch;
use crate::rng::{Purpose, Streams};

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl KalmanState {
    /// A known initial state.
    pub fn exact(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(d, d),
        }
    }
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let lmin = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &l| a.min(l.abs()));
    if lmin > 0.0 {
        lmax / lmin
    } else {
        f64::INFINITY
    }
}

fn cholesky_or_singular(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => Err(Error::SingularInnovation {
            condition: condition_estimate(&m),
        }),
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Predict with `A = a I` and covariance `q`, then update with `batch`.
pub fn kf_step(model: &LinearModel, q: &DMatrix<f64>, state: &KalmanState, batch: &ObservationBatch) -> Result<KalmanState> {
    let d = state.mean.len();
    if q.nrows() != d || state.cov.nrows() != d {
        return Err(Error::DimensionMismatch {
            context: "Kalman filter",
            expected: d,
            actual: q.nrows().min(state.cov.nrows()),
        });
    }
    let a = model.a_scale;
    let mean_f = &state.mean * a;
    let cov_f = &state.cov * (a * a) + q;
    if batch.is_empty() {
        return Ok(KalmanState { mean: mean_f, cov: cov_f });
    }

    let idx = batch.state_indices(model.grid.points());
    let cp = cov_f.select_rows(&idx);
    let mut s = cp.select_columns(&idx);
    let r = batch.sigma_y * batch.sigma_y;
    for i in 0..idx.len() {
        s[(i, i)] += r;
    }
    let chol = cholesky_or_singular(s.clone())?;
    // K^T = S^-1 C P'
    let kt = chol.solve(&cp);
    let innov = DVector::from_iterator(idx.len(), idx.iter().zip(batch.values.iter()).map(|(&i, y)| y - mean_f[i]));
    let mean = &mean_f + kt.tr_mul(&innov);

    let kcp = kt.tr_mul(&cp);
    let sk = &s * &kt;
    let ksk = kt.tr_mul(&sk);
    let mut cov = &cov_f - &kcp - kcp.transpose() + ksk;
    symmetrize(&mut cov);
    Ok(KalmanState { mean, cov })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    /// `d x N`, one member per column.
    pub members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::param("N", format!("ensemble needs at least 2 members, got {}", members.ncols())));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble member".into()));
        }
        Ok(Self { members })
    }

    /// `n` copies of `z0`.
    pub fn replicate(z0: &DVector<f64>, n: usize) -> Result<Self> {
        Self::new(DMatrix::from_fn(z0.len(), n, |i, _| z0[i]))
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }
}

/// Deterministic forecast of each member plus fresh state noise from the
/// `(EnsembleForecast, k, i)` streams.
pub fn forecast_ensemble(
    dynamics: &dyn Dynamics,
    cov: &CovarianceOperator,
    ens: &Ensemble,
    t_prev: f64,
    t_next: f64,
    streams: &Streams,
    k: usize,
) -> Result<Ensemble> {
    Ok(forecast_members(dynamics, cov, ens, t_prev, t_next, streams, k, None)?.0)
}

/// [`forecast_ensemble`] that also records fields `fields` of each member
/// at the start of every substep, before the noise is added.
#[allow(clippy::too_many_arguments)]
pub fn forecast_ensemble_traced(
    dynamics: &dyn Dynamics,
    cov: &CovarianceOperator,
    ens: &Ensemble,
    t_prev: f64,
    t_next: f64,
    streams: &Streams,
    k: usize,
    fields: &[usize],
) -> Result<(Ensemble, Vec<Vec<Vec<f64>>>)> {
    forecast_members(dynamics, cov, ens, t_prev, t_next, streams, k, Some(fields))
}

#[allow(clippy::too_many_arguments)]
fn forecast_members(
    dynamics: &dyn Dynamics,
    cov: &CovarianceOperator,
    ens: &Ensemble,
    t_prev: f64,
    t_next: f64,
    streams: &Streams,
    k: usize,
    fields: Option<&[usize]>,
) -> Result<(Ensemble, Vec<Vec<Vec<f64>>>)> {
    let d = ens.members.nrows();
    let n = dynamics.layout().points_per_field();
    let mut out = DMatrix::zeros(d, ens.size());
    let traces = out
        .as_mut_slice()
        .par_chunks_mut(d)
        .zip(ens.members.as_slice().par_chunks(d))
        .enumerate()
        .map(|(i, (o, z))| -> Result<Vec<Vec<f64>>> {
            let mut trace = Vec::new();
            match fields {
                Some(fields) => {
                    let mut obs = |_l: usize, _t: f64, s: &[f64]| -> Result<()> {
                        trace.push(fields.iter().flat_map(|&f| s[f * n..(f + 1) * n].iter().copied()).collect());
                        Ok(())
                    };
                    dynamics.propagate_into(z, t_prev, t_next, o, Some(&mut obs))?;
                }
                None => dynamics.propagate_into(z, t_prev, t_next, o, None)?,
            }
            let mut rng = streams.stream(Purpose::EnsembleForecast, k, i);
            let w = cov.sample(&mut rng);
            for (a, b) in o.iter_mut().zip(w.iter()) {
                *a += b;
            }
            Ok(trace)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Ensemble::new(out)?, traces))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnkfBranch {
    Direct,
    Woodbury,
    /// Woodbury when there are more observations than members.
    #[default]
    Auto,
}

/// Standard normal perturbations, `d_y x N`, one set per step.
pub fn observation_perturbations(streams: &Streams, k: usize, dy: usize, n: usize) -> DMatrix<f64> {
    let mut rng = streams.stream(Purpose::ObservationPerturbation, k, 0);
    let mut e = DMatrix::zeros(dy, n);
    for i in 0..n {
        for a in 0..dy {
            e[(a, i)] = rng.sample(StandardNormal);
        }
    }
    e
}

/// Analysis increment for `rows` of the ensemble from the observation
/// values `obs` (indices into the batch), observed state rows `obs_rows`
/// and error variances `r`.
#[allow(clippy::too_many_arguments)]
fn local_increment(
    zf: &DMatrix<f64>,
    anomalies: &DMatrix<f64>,
    rows: &[usize],
    obs: &[usize],
    obs_rows: &[usize],
    r: &[f64],
    batch: &ObservationBatch,
    perturb: &DMatrix<f64>,
    branch: EnkfBranch,
) -> Result<DMatrix<f64>> {
    let n = zf.ncols();
    let m = obs.len();
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let hx = anomalies.select_rows(obs_rows) * scale;
    let mut innov = DMatrix::zeros(m, n);
    for i in 0..n {
        for (a, (&o, &row)) in obs.iter().zip(obs_rows).enumerate() {
            innov[(a, i)] = batch.values[o] + r[a].sqrt() * perturb[(o, i)] - zf[(row, i)];
        }
    }
    let use_woodbury = match branch {
        EnkfBranch::Direct => false,
        EnkfBranch::Woodbury => true,
        EnkfBranch::Auto => m > n,
    };
    let b = if use_woodbury {
        // (HX HX^T + R)^-1 D = R^-1 D - R^-1 HX (I + HX^T R^-1 HX)^-1 HX^T R^-1 D
        let mut rinv_d = innov.clone();
        let mut rinv_hx = hx.clone();
        for a in 0..m {
            let w = 1.0 / r[a];
            rinv_d.row_mut(a).scale_mut(w);
            rinv_hx.row_mut(a).scale_mut(w);
        }
        let mut small = hx.tr_mul(&rinv_hx);
        for i in 0..n {
            small[(i, i)] += 1.0;
        }
        let chol = cholesky_or_singular(small)?;
        let t = chol.solve(&hx.tr_mul(&rinv_d));
        rinv_d - rinv_hx * t
    } else {
        let mut pyy = &hx * hx.transpose();
        for a in 0..m {
            pyy[(a, a)] += r[a];
        }
        let chol = cholesky_or_singular(pyy)?;
        chol.solve(&innov)
    };
    let x = anomalies.select_rows(rows) * scale;
    // (X HX^T) B keeps the intermediate rows x m instead of N x N
    Ok((x * hx.transpose()) * b)
}

fn anomalies(zf: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = zf.column_mean();
    let mut x = zf.clone();
    for mut c in x.column_iter_mut() {
        c -= &mean;
    }
    x
}

/// Perturbed-observation analysis of a forecast ensemble.
pub fn enkf_analysis(
    forecast: &Ensemble,
    batch: &ObservationBatch,
    layout: &StateLayout,
    streams: &Streams,
    branch: EnkfBranch,
) -> Result<Ensemble> {
    if batch.is_empty() {
        return Ok(forecast.clone());
    }
    let zf = &forecast.members;
    let d = zf.nrows();
    let obs_rows = batch.state_indices(layout.points_per_field());
    let obs: Vec<usize> = (0..batch.dim()).collect();
    let r = vec![batch.sigma_y * batch.sigma_y; batch.dim()];
    let e = observation_perturbations(streams, batch.k, batch.dim(), zf.ncols());
    let rows: Vec<usize> = (0..d).collect();
    let inc = local_increment(zf, &anomalies(zf), &rows, &obs, &obs_rows, &r, batch, &e, branch)?;
    Ensemble::new(zf + inc)
}

#[allow(clippy::too_many_arguments)]
pub fn enkf_step(
    dynamics: &dyn Dynamics,
    cov: &CovarianceOperator,
    ens: &Ensemble,
    batch: &ObservationBatch,
    t_prev: f64,
    t_next: f64,
    streams: &Streams,
    branch: EnkfBranch,
) -> Result<Ensemble> {
    let f = forecast_ensemble(dynamics, cov, ens, t_prev, t_next, streams, batch.k)?;
    enkf_analysis(&f, batch, &dynamics.layout(), streams, branch)
}

/// Gaspari-Cohn taper on `[0, inf)`.
pub fn gaspari_cohn(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::param("x", format!("taper argument must be non-negative, got {x}")));
    }
    Ok(gc(x))
}

fn gc(x: f64) -> f64 {
    if x < 1.0 {
        let x2 = x * x;
        let x3 = x2 * x;
        -0.25 * x3 * x2 + 0.5 * x2 * x2 + 0.625 * x3 - 5.0 / 3.0 * x2 + 1.0
    } else if x <= 2.0 {
        let x2 = x * x;
        let x3 = x2 * x;
        x3 * x2 / 12.0 - 0.5 * x2 * x2 + 0.625 * x3 + 5.0 / 3.0 * x2 - 5.0 * x + 4.0 - 2.0 / (3.0 * x)
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct LocalizationConfig {
    pub partition: Partition,
    /// Length scale in grid points.
    pub r: f64,
    pub w0: f64,
}

impl LocalizationConfig {
    pub const DEFAULT_W0: f64 = 1e-10;

    pub fn new(partition: Partition, r: f64, w0: f64) -> Result<Self> {
        if !(r > 0.0) {
            return Err(Error::param("r", format!("must be positive, got {r}")));
        }
        if !(w0 > 0.0 && w0 < 1.0) {
            return Err(Error::param("w0", format!("must lie in (0, 1), got {w0}")));
        }
        Ok(Self { partition, r, w0 })
    }
}

/// Kept observation values and their tapered weights for one subdomain.
pub fn local_observations(
    loc: &LocalizationConfig,
    owned: &[usize],
    batch: &ObservationBatch,
) -> (Vec<usize>, Vec<f64>) {
    let grid = loc.partition.grid();
    let s = batch.fields.len();
    let length = loc.r * grid.dx.min(grid.dy);
    let mut kept = Vec::new();
    let mut weights = Vec::new();
    for (a, &l) in batch.locations.iter().enumerate() {
        let (xo, yo) = grid.coords(l);
        let mut w = 0.0;
        for &p in owned {
            let (x, y) = grid.coords(p);
            w += gc(((x - xo).powi(2) + (y - yo).powi(2)).sqrt() / length);
        }
        w /= owned.len() as f64;
        if w > loc.w0 {
            for c in 0..s {
                kept.push(a * s + c);
                weights.push(w);
            }
        }
    }
    (kept, weights)
}

/// Per-subdomain analysis with tapered observation errors; owned rows are
/// updated from the global forecast statistics.
pub fn lenkf_analysis(
    forecast: &Ensemble,
    batch: &ObservationBatch,
    loc: &LocalizationConfig,
    layout: &StateLayout,
    streams: &Streams,
    branch: EnkfBranch,
) -> Result<Ensemble> {
    if batch.is_empty() {
        return Ok(forecast.clone());
    }
    let updates = local_updates(forecast, batch, loc, layout, streams, branch)?;
    Ensemble::new(apply_updates(&forecast.members, updates.into_iter()))
}

/// `(rows, increment)` for every subdomain that keeps an observation.
fn local_updates(
    forecast: &Ensemble,
    batch: &ObservationBatch,
    loc: &LocalizationConfig,
    layout: &StateLayout,
    streams: &Streams,
    branch: EnkfBranch,
) -> Result<Vec<(Vec<usize>, DMatrix<f64>)>> {
    let zf = &forecast.members;
    let x = anomalies(zf);
    let e = observation_perturbations(streams, batch.k, batch.dim(), zf.ncols());
    let all_rows = batch.state_indices(layout.points_per_field());
    let sigma2 = batch.sigma_y * batch.sigma_y;
    let gamma = loc.partition.gamma_effective();

    let updates: Vec<Option<(Vec<usize>, DMatrix<f64>)>> = (0..gamma)
        .into_par_iter()
        .map(|label| -> Result<Option<(Vec<usize>, DMatrix<f64>)>> {
            let owned = loc.partition.owned_points(label);
            let (kept, weights) = local_observations(loc, &owned, batch);
            if kept.is_empty() {
                return Ok(None);
            }
            let rows = expand_fields(&owned, layout.fields, layout.points_per_field());
            let obs_rows: Vec<usize> = kept.iter().map(|&a| all_rows[a]).collect();
            let r: Vec<f64> = weights.iter().map(|w| sigma2 / w).collect();
            let inc = local_increment(zf, &x, &rows, &kept, &obs_rows, &r, batch, &e, branch)?;
            Ok(Some((rows, inc)))
        })
        .collect::<Result<_>>()?;
    Ok(updates.into_iter().flatten().collect())
}

/// Adds each subdomain's increment to its own rows. Row sets are disjoint,
/// so the order of `updates` does not matter.
fn apply_updates(zf: &DMatrix<f64>, updates: impl Iterator<Item = (Vec<usize>, DMatrix<f64>)>) -> DMatrix<f64> {
    let mut za = zf.clone();
    for (rows, inc) in updates {
        for (a, &row) in rows.iter().enumerate() {
            for i in 0..za.ncols() {
                za[(row, i)] += inc[(a, i)];
            }
        }
    }
    za
}

#[allow(clippy::too_many_arguments)]
pub fn lenkf_step(
    dynamics: &dyn Dynamics,
    cov: &CovarianceOperator,
    ens: &Ensemble,
    batch: &ObservationBatch,
    loc: &LocalizationConfig,
    t_prev: f64,
    t_next: f64,
    streams: &Streams,
    branch: EnkfBranch,
) -> Result<Ensemble> {
    let f = forecast_ensemble(dynamics, cov, ens, t_prev, t_next, streams, batch.k)?;
    lenkf_analysis(&f, batch, loc, &dynamics.layout(), streams, branch)
}
