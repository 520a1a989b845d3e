//! Truth and observation generation, filter runs over replicas, results.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use lsmcmc_core::dynamics::{Coriolis, Dynamics, FixedBoundary, LinearModel, StateLayout, SweModel};
use lsmcmc_core::gaussian::{
    enkf_analysis, forecast_ensemble, forecast_ensemble_traced, kf_step, lenkf_analysis, EnkfBranch, Ensemble,
    KalmanState, LocalizationConfig,
};
use lsmcmc_core::grid::{make_partition, GridSpec, Partition};
use lsmcmc_core::noise::{CovarianceOperator, FourierSineCovariance};
use lsmcmc_core::observations::{
    advect_drifters, bilinear, drifter_batch, nearest_point, read_drifter_csv, swath_locations,
    synthesize_observations, write_batches_csv, write_drifter_csv, DrifterRecord, DrifterSet, ObservationBatch,
};
use lsmcmc_core::rng::{Purpose, Streams};
use lsmcmc_core::smcmc::{lsmcmc_step, multi_run_mean, smcmc_step, SampleBank};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, FilterConfig, ModelConfig, ObservationConfig, SweConfig};
use crate::metric::{error_metric, rmse, write_means_csv};

/// Velocity fields of the shallow-water state.
const U_FIELD: usize = 1;
const V_FIELD: usize = 2;

#[derive(Debug, Clone)]
pub enum ProblemModel {
    Linear(LinearModel),
    Swe(SweModel),
}

impl ProblemModel {
    pub fn dynamics(&self) -> &dyn Dynamics {
        match self {
            Self::Linear(m) => m,
            Self::Swe(m) => m,
        }
    }
}

/// Drifter observations: start positions and per-time velocities.
#[derive(Debug, Clone)]
pub struct DrifterData {
    pub initial: Vec<[f64; 2]>,
    /// `velocities[k - 1][j]`, absent when drifter `j` reported nothing.
    pub velocities: Vec<Vec<Option<[f64; 2]>>>,
    /// Positions of synthetic drifters in the truth run, `tracks[k][j]`.
    pub truth_tracks: Option<Vec<Vec<[f64; 2]>>>,
    pub sigma_y: f64,
}

#[derive(Debug, Clone)]
pub enum ObservationData {
    /// Locations known in advance, one batch per time.
    Fixed(Vec<ObservationBatch>),
    /// Locations follow the filter's own drifter estimate.
    Drifters(DrifterData),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    Kalman,
    Truth,
    PriorMean,
}

impl ReferenceKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Kalman => "kf",
            Self::Truth => "truth",
            Self::PriorMean => "prior_mean",
        }
    }
}

/// Everything a filter run needs, shared by all filters and replicas.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: ProblemModel,
    pub noise: CovarianceOperator,
    pub z0: DVector<f64>,
    pub grid: GridSpec,
    pub layout: StateLayout,
    pub tau_obs: f64,
    pub steps: usize,
    /// `T x d` truth trajectory.
    pub truth: DMatrix<f64>,
    pub data: ObservationData,
    pub reference: DMatrix<f64>,
    pub reference_kind: ReferenceKind,
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn times(&self, k: usize) -> (f64, f64) {
        ((k - 1) as f64 * self.tau_obs, k as f64 * self.tau_obs)
    }

    fn substep_dt(&self) -> f64 {
        self.tau_obs / self.model.dynamics().substeps() as f64
    }

    pub fn fixed_batches(&self) -> Option<&[ObservationBatch]> {
        match &self.data {
            ObservationData::Fixed(b) => Some(b),
            ObservationData::Drifters(_) => None,
        }
    }
}

/// `z0` of the linear benchmark: the first `floor(d/3)` entries are
/// `-amplitude * U[0, 1]`, the rest zero.
pub fn linear_initial_state(d: usize, amplitude: f64, streams: &Streams) -> DVector<f64> {
    let mut rng = streams.stream(Purpose::Initial, 0, 0);
    let mut z = DVector::zeros(d);
    for v in z.iter_mut().take(d / 3) {
        *v = -amplitude * rng.random::<f64>();
    }
    z
}

/// Exact Kalman filter means, `T x d`.
pub fn kalman_means(model: &LinearModel, z0: &DVector<f64>, batches: &[ObservationBatch]) -> Result<DMatrix<f64>> {
    let d = z0.len();
    let q = DMatrix::from_diagonal_element(d, d, model.sigma_z * model.sigma_z);
    let mut state = KalmanState::exact(z0.clone());
    let mut out = DMatrix::zeros(batches.len(), d);
    for (t, b) in batches.iter().enumerate() {
        state = kf_step(model, &q, &state, b).with_context(|| format!("Kalman step {}", b.k))?;
        out.row_mut(t).copy_from(&state.mean.transpose());
    }
    Ok(out)
}

fn swe_setup(c: &SweConfig, grid: GridSpec) -> Result<(SweModel, DVector<f64>)> {
    let n = grid.points();
    let (cx, cy) = (0.5 * (grid.x0 + grid.x_max()), 0.5 * (grid.y0 + grid.y_max()));
    let radius = c.bump_radius * grid.dx.min(grid.dy);
    let mut bathymetry = vec![0.0; n];
    let mut z0 = DVector::zeros(3 * n);
    for p in 0..n {
        let (x, y) = grid.coords(p);
        let xi = if grid.nx > 1 { (x - grid.x0) / (grid.x_max() - grid.x0) } else { 0.5 };
        bathymetry[p] = c.depth * (1.0 + c.depth_slope * (xi - 0.5));
        let r2 = (x - cx).powi(2) + (y - cy).powi(2);
        z0[p] = bathymetry[p] + c.bump_height * (-0.5 * r2 / (radius * radius)).exp();
    }
    let boundary = Arc::new(FixedBoundary::from_state(&grid, z0.as_slice())?);
    let coriolis = Coriolis {
        f0: c.f0,
        beta: c.beta,
        y_ref: cy,
    };
    let model = SweModel::new(grid, bathymetry, c.g, coriolis, boundary, c.substeps)?;
    Ok((model, z0))
}

/// Truth run `Z_k = Phi(Z_{k-1}) + W_k`, with the velocity fields of every
/// substep when `trace` is set.
fn truth_run(
    dynamics: &dyn Dynamics,
    noise: &CovarianceOperator,
    z0: &DVector<f64>,
    tau: f64,
    steps: usize,
    streams: &Streams,
    trace: bool,
) -> Result<(DMatrix<f64>, Vec<Vec<Vec<f64>>>)> {
    let d = z0.len();
    let n = dynamics.layout().points_per_field();
    let mut truth = DMatrix::zeros(steps, d);
    let mut traces = Vec::new();
    let mut z = z0.clone();
    let mut next = DVector::zeros(d);
    for k in 1..=steps {
        let (t0, t1) = ((k - 1) as f64 * tau, k as f64 * tau);
        let mut step_trace = Vec::new();
        if trace {
            let mut obs = |_l: usize, _t: f64, s: &[f64]| -> lsmcmc_core::Result<()> {
                step_trace.push(s[U_FIELD * n..(V_FIELD + 1) * n].to_vec());
                Ok(())
            };
            dynamics.propagate_into(z.as_slice(), t0, t1, next.as_mut_slice(), Some(&mut obs))
        } else {
            dynamics.propagate_into(z.as_slice(), t0, t1, next.as_mut_slice(), None)
        }
        .with_context(|| format!("truth step {k}"))?;
        next += noise.sample(&mut streams.stream(Purpose::Truth, k, 0));
        std::mem::swap(&mut z, &mut next);
        truth.row_mut(k - 1).copy_from(&z.transpose());
        traces.push(step_trace);
    }
    Ok((truth, traces))
}

/// Average of `runs` noisy forward runs from `z0`.
fn prior_mean(
    dynamics: &dyn Dynamics,
    noise: &CovarianceOperator,
    z0: &DVector<f64>,
    tau: f64,
    steps: usize,
    runs: usize,
    streams: &Streams,
) -> Result<DMatrix<f64>> {
    let d = z0.len();
    let per_run: Vec<DMatrix<f64>> = (0..runs)
        .into_par_iter()
        .map(|r| -> Result<DMatrix<f64>> {
            let mut out = DMatrix::zeros(steps, d);
            let mut z = z0.clone();
            for k in 1..=steps {
                let mut next = dynamics
                    .propagate(&z, (k - 1) as f64 * tau, k as f64 * tau)
                    .with_context(|| format!("prior run {r}, step {k}"))?;
                next += noise.sample(&mut streams.stream(Purpose::Prior, k, r));
                z = next;
                out.row_mut(k - 1).copy_from(&z.transpose());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut acc = DMatrix::zeros(steps, d);
    for m in &per_run {
        acc += m;
    }
    Ok(acc / runs as f64)
}

fn synthetic_drifters(
    grid: &GridSpec,
    truth: &DMatrix<f64>,
    traces: &[Vec<Vec<f64>>],
    dt: f64,
    count: usize,
    sigma_y: f64,
    streams: &Streams,
) -> Result<DrifterData> {
    let n = grid.points();
    let mut rng = streams.stream(Purpose::Initial, 0, 1);
    let (w, h) = (grid.x_max() - grid.x0, grid.y_max() - grid.y0);
    let initial: Vec<[f64; 2]> = (0..count)
        .map(|_| {
            [
                grid.x0 + w * (0.2 + 0.6 * rng.random::<f64>()),
                grid.y0 + h * (0.2 + 0.6 * rng.random::<f64>()),
            ]
        })
        .collect();
    let mut set = DrifterSet::new(grid, initial.clone(), 1)?;
    let mut tracks = vec![set.mean_positions.clone()];
    let mut velocities = Vec::with_capacity(traces.len());
    for (t, step) in traces.iter().enumerate() {
        for s in step {
            set.euler_substep(grid, 0, &s[..n], &s[n..], dt)?;
        }
        set.update_mean();
        let row = truth.row(t).transpose();
        let z = row.as_slice();
        let mut noise = streams.stream(Purpose::ObservationNoise, t + 1, 1);
        let obs = set
            .mean_positions
            .iter()
            .map(|&[x, y]| {
                let u = bilinear(grid, &z[U_FIELD * n..(U_FIELD + 1) * n], x, y);
                let v = bilinear(grid, &z[V_FIELD * n..(V_FIELD + 1) * n], x, y);
                let (eu, ev): (f64, f64) = (noise.sample(StandardNormal), noise.sample(StandardNormal));
                Some([u + sigma_y * eu, v + sigma_y * ev])
            })
            .collect();
        velocities.push(obs);
        tracks.push(set.mean_positions.clone());
    }
    Ok(DrifterData {
        initial,
        velocities,
        truth_tracks: Some(tracks),
        sigma_y,
    })
}

/// Drifter data from a CSV whose records sit at multiples of `tau`:
/// positions at time 0 start the drifters, velocities at `k tau` are
/// the observations of step `k`.
pub fn drifters_from_records(records: &[DrifterRecord], tau: f64, steps: usize, sigma_y: f64) -> Result<DrifterData> {
    let mut ids: Vec<usize> = records.iter().map(|r| r.drifter_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let slot = |id: usize| ids.binary_search(&id).unwrap();
    let mut initial: Vec<Option<[f64; 2]>> = vec![None; ids.len()];
    let mut velocities = vec![vec![None; ids.len()]; steps];
    for r in records {
        let kf = r.time_s / tau;
        let k = kf.round();
        ensure!(
            (kf - k).abs() < 1e-6 && k >= 0.0,
            "drifter {} record at t = {} s is not a multiple of {tau} s",
            r.drifter_id,
            r.time_s
        );
        let k = k as usize;
        if k == 0 {
            initial[slot(r.drifter_id)] = Some([r.x_m, r.y_m]);
        } else if k <= steps {
            velocities[k - 1][slot(r.drifter_id)] = Some([r.u_mps, r.v_mps]);
        }
    }
    let initial = initial
        .into_iter()
        .zip(&ids)
        .map(|(p, id)| p.ok_or_else(|| anyhow!("drifter {id} has no record at t = 0")))
        .collect::<Result<_>>()?;
    Ok(DrifterData {
        initial,
        velocities,
        truth_tracks: None,
        sigma_y,
    })
}

fn drifter_records(data: &DrifterData, tau: f64) -> Vec<DrifterRecord> {
    let tracks = data.truth_tracks.as_ref();
    let mut out = Vec::new();
    for (j, p) in data.initial.iter().enumerate() {
        out.push(DrifterRecord {
            time_s: 0.0,
            drifter_id: j,
            x_m: p[0],
            y_m: p[1],
            u_mps: 0.0,
            v_mps: 0.0,
        });
    }
    for (t, row) in data.velocities.iter().enumerate() {
        for (j, uv) in row.iter().enumerate() {
            if let Some([u, v]) = uv {
                let p = tracks.map_or([f64::NAN; 2], |tr| tr[t + 1][j]);
                out.push(DrifterRecord {
                    time_s: (t + 1) as f64 * tau,
                    drifter_id: j,
                    x_m: p[0],
                    y_m: p[1],
                    u_mps: *u,
                    v_mps: *v,
                });
            }
        }
    }
    out
}

/// Model, truth, observations and reference of an experiment.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    cfg.validate()?;
    let steps = cfg.experiment.steps;
    let streams = Streams::new(cfg.experiment.data_seed);
    let grid = cfg.model.grid()?;
    let tau = cfg.model.tau_obs();
    let (model, noise, z0) = match cfg.model {
        ModelConfig::Linear(c) => {
            let m = LinearModel::new(grid, c.a, c.sigma_z)?;
            let z0 = linear_initial_state(grid.points(), c.z0_amplitude, &streams);
            (ProblemModel::Linear(m), m.noise(), z0)
        }
        ModelConfig::Swe(c) => {
            let (m, z0) = swe_setup(&c, grid)?;
            let cov = FourierSineCovariance::new(&grid, c.modes, c.noise_sigma, 3)?;
            (ProblemModel::Swe(m), CovarianceOperator::FourierSine(cov), z0)
        }
    };
    let dynamics = model.dynamics();
    let layout = dynamics.layout();
    let drifters = matches!(cfg.observations, ObservationConfig::Drifters { .. });
    let (truth, traces) = truth_run(dynamics, &noise, &z0, tau, steps, &streams, drifters)?;

    let (data, reference, reference_kind) = match &cfg.observations {
        ObservationConfig::Swath { fields, sigma_y, .. } => {
            let swath = cfg.observations.swath().unwrap();
            let rows: Vec<DVector<f64>> = truth.row_iter().map(|r| r.transpose()).collect();
            let locations: Vec<Vec<usize>> = (1..=steps).map(|k| swath_locations(&swath, &grid, k)).collect();
            let batches = synthesize_observations(&rows, &locations, fields, grid.points(), *sigma_y, &streams)?;
            let (reference, kind) = match &model {
                ProblemModel::Linear(m) => (kalman_means(m, &z0, &batches)?, ReferenceKind::Kalman),
                ProblemModel::Swe(_) => (truth.clone(), ReferenceKind::Truth),
            };
            (ObservationData::Fixed(batches), reference, kind)
        }
        ObservationConfig::Drifters {
            sigma_y,
            file,
            count,
            prior_runs,
        } => {
            let data = match file {
                Some(path) => drifters_from_records(&read_drifter_csv(path)?, tau, steps, *sigma_y)?,
                None => {
                    let dt = tau / dynamics.substeps() as f64;
                    synthetic_drifters(&grid, &truth, &traces, dt, *count, *sigma_y, &streams)?
                }
            };
            let reference = prior_mean(dynamics, &noise, &z0, tau, steps, *prior_runs, &streams)?;
            (ObservationData::Drifters(data), reference, ReferenceKind::PriorMean)
        }
    };
    Ok(Problem {
        model,
        noise,
        z0,
        grid,
        layout,
        tau_obs: tau,
        steps,
        truth,
        data,
        reference,
        reference_kind,
    })
}

/// One row of `diagnostics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub acceptance_rate: Option<f64>,
    /// Dimension the analysis worked on.
    pub d_k: usize,
    pub wall_time_ms: f64,
    pub checksum: f64,
}

#[derive(Debug, Clone)]
pub struct ReplicaRun {
    pub replica: usize,
    pub seed: u64,
    /// `T x d` filter means.
    pub means: DMatrix<f64>,
    pub steps: Vec<StepRecord>,
    pub wall_s: f64,
    /// Estimated drifter positions after each step.
    pub tracks: Option<Vec<Vec<[f64; 2]>>>,
}

/// A replica that stopped early, with the rows it finished.
#[derive(Debug)]
pub struct ReplicaFailure {
    pub replica: usize,
    pub step: usize,
    pub partial: DMatrix<f64>,
    pub error: anyhow::Error,
}

enum Analysis<'a> {
    Kf(&'a LinearModel),
    Enkf,
    Lenkf(LocalizationConfig),
    Smcmc(lsmcmc_core::smcmc::ChainConfig),
    Lsmcmc(lsmcmc_core::smcmc::ChainConfig, Partition),
}

fn analysis_for<'a>(problem: &'a Problem, filter: &FilterConfig) -> Result<Analysis<'a>> {
    Ok(match *filter {
        FilterConfig::Kf => match &problem.model {
            ProblemModel::Linear(m) => Analysis::Kf(m),
            ProblemModel::Swe(_) => bail!("the Kalman filter needs the linear model"),
        },
        FilterConfig::Enkf { .. } => Analysis::Enkf,
        FilterConfig::Lenkf { gamma, r, w0, .. } => {
            Analysis::Lenkf(LocalizationConfig::new(make_partition(&problem.grid, gamma)?, r, w0)?)
        }
        FilterConfig::Smcmc(c) => Analysis::Smcmc(c.chain_config()),
        FilterConfig::Lsmcmc(c) => {
            let gamma = c.gamma.context("lsmcmc needs gamma")?;
            Analysis::Lsmcmc(c.chain_config(), make_partition(&problem.grid, gamma)?)
        }
    })
}

enum FilterState {
    Kalman(KalmanState),
    Ensemble(Ensemble),
    Bank(SampleBank),
}

/// Batch of step `k`; drifter batches use the current position estimate.
fn drifter_step_batch(grid: &GridSpec, set: &DrifterSet, data: &DrifterData, k: usize) -> Result<ObservationBatch> {
    let mut points = Vec::new();
    let mut vel = Vec::new();
    for (j, uv) in data.velocities[k - 1].iter().enumerate() {
        if let Some(uv) = uv {
            points.push(nearest_point(grid, set.mean_positions[j]));
            vel.push(*uv);
        }
    }
    Ok(drifter_batch(k, &points, &vel, U_FIELD, V_FIELD, data.sigma_y)?)
}

/// Filter `filter` over all steps with seed `seed`.
pub fn run_replica(problem: &Problem, filter: &FilterConfig, replica: usize, seed: u64) -> Result<ReplicaRun, ReplicaFailure> {
    let started = Instant::now();
    let d = problem.dim();
    let mut means = DMatrix::zeros(problem.steps, d);
    let fail = |step: usize, means: &DMatrix<f64>, error: anyhow::Error| ReplicaFailure {
        replica,
        step,
        partial: means.rows(0, step.saturating_sub(1)).into_owned(),
        error,
    };
    let analysis = analysis_for(problem, filter).map_err(|e| fail(0, &means, e))?;
    let streams = Streams::new(seed);
    let dynamics = problem.model.dynamics();
    let mut state = match (&analysis, filter.samples()) {
        (Analysis::Kf(_), _) => FilterState::Kalman(KalmanState::exact(problem.z0.clone())),
        (Analysis::Enkf | Analysis::Lenkf(_), Some(n)) => {
            FilterState::Ensemble(Ensemble::replicate(&problem.z0, n).map_err(|e| fail(0, &means, e.into()))?)
        }
        _ => FilterState::Bank(SampleBank::initial(&problem.z0)),
    };
    let mut drifters = match &problem.data {
        ObservationData::Drifters(data) => {
            Some(DrifterSet::new(&problem.grid, data.initial.clone(), 1).map_err(|e| fail(0, &means, e.into()))?)
        }
        ObservationData::Fixed(_) => None,
    };
    let mut tracks = drifters.as_ref().map(|s| vec![s.mean_positions.clone()]);
    let mut records = Vec::with_capacity(problem.steps);

    for k in 1..=problem.steps {
        let step_started = Instant::now();
        let (t0, t1) = problem.times(k);
        let result = (|| -> Result<(DVector<f64>, Option<f64>, usize)> {
            // forecast, with traces when drifter positions must be advanced
            let velocity_fields = [U_FIELD, V_FIELD];
            let mut forecast_ens = None;
            let traces = match &mut state {
                FilterState::Kalman(_) => None,
                FilterState::Ensemble(ens) => {
                    if drifters.is_some() {
                        let (f, tr) = forecast_ensemble_traced(
                            dynamics,
                            &problem.noise,
                            ens,
                            t0,
                            t1,
                            &streams,
                            k,
                            &velocity_fields,
                        )?;
                        forecast_ens = Some(f);
                        Some(tr)
                    } else {
                        forecast_ens = Some(forecast_ensemble(dynamics, &problem.noise, ens, t0, t1, &streams, k)?);
                        None
                    }
                }
                FilterState::Bank(bank) => {
                    if drifters.is_some() {
                        Some(bank.forecast_traced(dynamics, t0, t1, &velocity_fields)?)
                    } else {
                        bank.forecast(dynamics, t0, t1)?;
                        None
                    }
                }
            };
            let batch = match (&problem.data, drifters.as_mut()) {
                (ObservationData::Fixed(b), _) => b[k - 1].clone(),
                (ObservationData::Drifters(data), Some(set)) => {
                    let traces = traces.context("drifters need substep traces")?;
                    *set = advect_drifters(set, &traces, &problem.grid, problem.substep_dt(), 0, 1)?;
                    drifter_step_batch(&problem.grid, set, data, k)?
                }
                (ObservationData::Drifters(_), None) => unreachable!("drifter set exists for drifter data"),
            };
            Ok(match (&analysis, &mut state) {
                (Analysis::Kf(m), FilterState::Kalman(s)) => {
                    let q = DMatrix::from_diagonal_element(d, d, m.sigma_z * m.sigma_z);
                    *s = kf_step(m, &q, s, &batch)?;
                    (s.mean.clone(), None, d)
                }
                (Analysis::Enkf, FilterState::Ensemble(ens)) => {
                    let f = forecast_ens.take().unwrap();
                    *ens = enkf_analysis(&f, &batch, &problem.layout, &streams, EnkfBranch::Auto)?;
                    (ens.mean(), None, d)
                }
                (Analysis::Lenkf(loc), FilterState::Ensemble(ens)) => {
                    let f = forecast_ens.take().unwrap();
                    *ens = lenkf_analysis(&f, &batch, loc, &problem.layout, &streams, EnkfBranch::Auto)?;
                    (ens.mean(), None, d)
                }
                (Analysis::Smcmc(c), FilterState::Bank(bank)) => {
                    let out = smcmc_step(bank, &batch, &problem.noise, &problem.layout, c, &streams)?;
                    let diag = out.diagnostics;
                    let mean = out.mean.clone();
                    *bank = out.into_bank();
                    (mean, Some(diag.acceptance_rate), diag.d_k)
                }
                (Analysis::Lsmcmc(c, part), FilterState::Bank(bank)) => {
                    let out = lsmcmc_step(bank, &batch, &problem.noise, &problem.layout, part, c, &streams)?;
                    let diag = out.diagnostics;
                    let mean = out.mean.clone();
                    *bank = out.into_bank();
                    (mean, Some(diag.acceptance_rate), diag.d_k)
                }
                _ => unreachable!("filter state matches its analysis"),
            })
        })();
        let (mean, acceptance_rate, d_k) = result
            .with_context(|| format!("{} replica {replica}, step {k}", filter.name()))
            .map_err(|e| fail(k, &means, e))?;
        means.row_mut(k - 1).copy_from(&mean.transpose());
        if let (Some(tr), Some(set)) = (tracks.as_mut(), drifters.as_ref()) {
            tr.push(set.mean_positions.clone());
        }
        records.push(StepRecord {
            k,
            acceptance_rate,
            d_k,
            wall_time_ms: step_started.elapsed().as_secs_f64() * 1e3,
            checksum: mean.sum(),
        });
    }
    Ok(ReplicaRun {
        replica,
        seed,
        means,
        steps: records,
        wall_s: started.elapsed().as_secs_f64(),
        tracks,
    })
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub filter: FilterConfig,
    pub replicas: Vec<ReplicaRun>,
    /// Replica-averaged means, `T x d`.
    pub mean: DMatrix<f64>,
    /// Wall time of all replicas together.
    pub wall_s: f64,
    pub pct_below_threshold: f64,
}

impl FilterRun {
    pub fn wall_per_replica_s(&self) -> f64 {
        self.replicas.iter().map(|r| r.wall_s).sum::<f64>() / self.replicas.len() as f64
    }

    /// Mean wall time of one assimilation step over replicas and steps.
    pub fn step_time_ms(&self) -> f64 {
        let (sum, n) = self
            .replicas
            .iter()
            .flat_map(|r| &r.steps)
            .fold((0.0, 0usize), |(s, n), st| (s + st.wall_time_ms, n + 1));
        sum / n.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub reference: DMatrix<f64>,
    pub reference_kind: ReferenceKind,
    pub threshold: f64,
    pub filters: Vec<FilterRun>,
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

/// Averaged means of `M` replicas of one filter; replica order fixes the
/// reduction order so the result does not depend on scheduling.
pub fn run_filter(
    problem: &Problem,
    filter: &FilterConfig,
    seeds: &[u64],
    threshold: f64,
    partial_dir: Option<&Path>,
) -> Result<FilterRun> {
    let started = Instant::now();
    let seeds = if filter.is_random() { seeds } else { &seeds[..1] };
    let outcomes: Vec<Result<ReplicaRun, ReplicaFailure>> = seeds
        .par_iter()
        .enumerate()
        .map(|(m, &s)| run_replica(problem, filter, m, s))
        .collect();
    let mut replicas = Vec::with_capacity(outcomes.len());
    let mut first_error = None;
    for o in outcomes {
        match o {
            Ok(r) => replicas.push(r),
            Err(f) => {
                if let Some(dir) = partial_dir {
                    let p = dir.join(format!("partial_{}_replica{}.csv", filter.name(), f.replica));
                    if let Err(e) = write_means_csv(&p, &f.partial) {
                        log::error!("could not flush partial results to {}: {e:#}", p.display());
                    }
                }
                log::error!("replica {} failed at step {}: {:#}", f.replica, f.step, f.error);
                first_error.get_or_insert(f.error);
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    let rows: Vec<DVector<f64>> = replicas
        .iter()
        .map(|r| DVector::from_column_slice(r.means.as_slice()))
        .collect();
    let avg = multi_run_mean(&rows)?;
    let mean = DMatrix::from_column_slice(problem.steps, problem.dim(), avg.as_slice());
    let pct = error_metric(&mean, &problem.reference, threshold)?;
    Ok(FilterRun {
        filter: *filter,
        replicas,
        mean,
        wall_s: started.elapsed().as_secs_f64(),
        pct_below_threshold: pct,
    })
}

/// Every configured filter on one problem, in a pool of `threads` workers.
pub fn run_problem(cfg: &ExperimentConfig, problem: &Problem, partial_dir: Option<&Path>) -> Result<RunResult> {
    let seeds: Vec<u64> = (0..cfg.experiment.replicas).map(|m| cfg.seed(m)).collect();
    let threshold = cfg.threshold();
    let pool = thread_pool(cfg.experiment.threads)?;
    let filters = pool.install(|| {
        cfg.filters
            .iter()
            .map(|f| {
                log::info!("running {} with {} replicas", f.name(), seeds.len());
                run_filter(problem, f, &seeds, threshold, partial_dir)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    soft_timing_check(&filters);
    Ok(RunResult {
        reference: problem.reference.clone(),
        reference_kind: problem.reference_kind,
        threshold,
        filters,
    })
}

/// Warn when the localized chain is not faster per step than the plain one
/// at the same chain length.
fn soft_timing_check(filters: &[FilterRun]) {
    for l in filters.iter().filter(|f| matches!(f.filter, FilterConfig::Lsmcmc(_))) {
        for s in filters.iter().filter(|f| matches!(f.filter, FilterConfig::Smcmc(_))) {
            if l.filter.samples() == s.filter.samples() && l.filter.burn_in() == s.filter.burn_in() {
                let ratio = l.step_time_ms() / s.step_time_ms();
                if ratio > 1.0 {
                    log::warn!("lsmcmc step time is {ratio:.2}x smcmc's at equal N");
                } else {
                    log::info!("lsmcmc / smcmc step time ratio {ratio:.3}");
                }
            }
        }
    }
}

/// Build, run and write everything under the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Problem, RunResult)> {
    cfg.validate()?;
    let out = cfg.experiment.out.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let problem = build_problem(cfg)?;
    write_inputs(cfg, &problem, &out)?;
    let result = run_problem(cfg, &problem, Some(&out))?;
    write_outputs(cfg, &problem, &result, &out)?;
    Ok((problem, result))
}

fn write_inputs(cfg: &ExperimentConfig, problem: &Problem, out: &Path) -> Result<()> {
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    write_means_csv(&out.join("truth.csv"), &problem.truth)?;
    write_means_csv(&out.join(format!("means_{}.csv", problem.reference_kind.name())), &problem.reference)?;
    match &problem.data {
        ObservationData::Fixed(b) => write_batches_csv(&out.join("observations.csv"), b)?,
        ObservationData::Drifters(d) => write_drifter_csv(&out.join("drifters.csv"), &drifter_records(d, problem.tau_obs))?,
    }
    Ok(())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// File stem for a filter; repeated kinds get a numeric suffix.
pub fn filter_labels(filters: &[FilterConfig]) -> Vec<String> {
    filters
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let dup = filters.iter().filter(|g| g.name() == f.name()).count() > 1;
            if dup {
                let nth = filters[..i].iter().filter(|g| g.name() == f.name()).count();
                format!("{}{}", f.name(), nth + 1)
            } else {
                f.name().to_string()
            }
        })
        .collect()
}

/// `means_<filter>.csv`, `diagnostics.csv`, `summary.csv` and the
/// `plotdata_*.csv` tables.
pub fn write_outputs(cfg: &ExperimentConfig, problem: &Problem, result: &RunResult, out: &Path) -> Result<Vec<PathBuf>> {
    let labels = filter_labels(&cfg.filters);
    let mut written = Vec::new();

    for (run, label) in result.filters.iter().zip(&labels) {
        let p = out.join(format!("means_{label}.csv"));
        write_means_csv(&p, &run.mean)?;
        written.push(p);
    }

    let p = out.join("diagnostics.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["filter", "replica", "seed", "k", "acceptance_rate", "d_k", "wall_time_ms", "checksum"])?;
    for (run, label) in result.filters.iter().zip(&labels) {
        for r in &run.replicas {
            for s in &r.steps {
                w.write_record([
                    label.clone(),
                    r.replica.to_string(),
                    r.seed.to_string(),
                    s.k.to_string(),
                    opt(s.acceptance_rate),
                    s.d_k.to_string(),
                    format!("{:.3}", s.wall_time_ms),
                    format!("{:e}", s.checksum),
                ])?;
            }
        }
    }
    w.flush()?;
    written.push(p);

    let p = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record([
        "filter",
        "gamma",
        "r",
        "N",
        "N_burn",
        "M",
        "wall_s",
        "wall_per_replica_s",
        "step_ms",
        "pct_below_threshold",
        "reference",
    ])?;
    for (run, label) in result.filters.iter().zip(&labels) {
        let f = &run.filter;
        w.write_record([
            label.clone(),
            opt(f.gamma()),
            opt(f.taper_length()),
            opt(f.samples()),
            opt(f.burn_in()),
            run.replicas.len().to_string(),
            format!("{:.3}", run.wall_s),
            format!("{:.3}", run.wall_per_replica_s()),
            format!("{:.3}", run.step_time_ms()),
            format!("{:.4}", run.pct_below_threshold),
            result.reference_kind.name().to_string(),
        ])?;
    }
    w.flush()?;
    written.push(p);

    // per-step accuracy and chain statistics for plotting
    for (run, label) in result.filters.iter().zip(&labels) {
        let p = out.join(format!("plotdata_{label}.csv"));
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(["k", "pct_below_threshold", "rmse", "mean_acceptance", "mean_d_k"])?;
        for t in 0..problem.steps {
            let a = run.mean.rows(t, 1).into_owned();
            let b = result.reference.rows(t, 1).into_owned();
            let acc: Vec<f64> = run.replicas.iter().filter_map(|r| r.steps[t].acceptance_rate).collect();
            let dk = run.replicas.iter().map(|r| r.steps[t].d_k as f64).sum::<f64>() / run.replicas.len() as f64;
            w.write_record([
                (t + 1).to_string(),
                format!("{:.4}", error_metric(&a, &b, result.threshold)?),
                format!("{:e}", rmse(&a, &b)?),
                if acc.is_empty() {
                    String::new()
                } else {
                    format!("{:.6}", acc.iter().sum::<f64>() / acc.len() as f64)
                },
                format!("{dk}"),
            ])?;
        }
        w.flush()?;
        written.push(p);
    }

    if let ObservationData::Drifters(data) = &problem.data {
        let p = out.join("plotdata_tracks.csv");
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(["source", "drifter", "k", "x_m", "y_m"])?;
        let mut emit = |source: &str, tracks: &[Vec<[f64; 2]>]| -> Result<()> {
            for (k, row) in tracks.iter().enumerate() {
                for (j, [x, y]) in row.iter().enumerate() {
                    w.write_record([source.to_string(), j.to_string(), k.to_string(), format!("{x:e}"), format!("{y:e}")])?;
                }
            }
            Ok(())
        };
        if let Some(tr) = &data.truth_tracks {
            emit("truth", tr)?;
        }
        for (run, label) in result.filters.iter().zip(&labels) {
            if let Some(tr) = run.replicas.first().and_then(|r| r.tracks.as_ref()) {
                emit(label, tr)?;
            }
        }
        w.flush()?;
        written.push(p);
    }
    Ok(written)
}
