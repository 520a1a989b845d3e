//! One assimilation step of the plain and the localized filter.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use super::kernel::{rwm_joint_kernel, MixtureTarget};
use super::ChainConfig;
use crate::dynamics::{Dynamics, StateLayout};
use crate::error::{Error, Result};
use crate::grid::{active_set, Partition};
use crate::noise::CovarianceOperator;
use crate::observations::ObservationBatch;
use crate::rng::{Purpose, Streams};

/// Samples at the previous time and their forecasts.
#[derive(Debug, Clone)]
pub struct SampleBank {
    /// `d x N`, the support of the previous empirical measure.
    pub samples: DMatrix<f64>,
    /// `Phi` applied to each sample.
    pub propagated: Option<DMatrix<f64>>,
}

impl SampleBank {
    /// The initial condition as a one-sample bank.
    pub fn initial(z0: &DVector<f64>) -> Self {
        Self {
            samples: DMatrix::from_column_slice(z0.len(), 1, z0.as_slice()),
            propagated: None,
        }
    }

    pub fn from_samples(samples: DMatrix<f64>) -> Self {
        Self {
            samples,
            propagated: None,
        }
    }

    pub fn size(&self) -> usize {
        self.samples.ncols()
    }

    /// Deterministic forecasts of every sample, in parallel.
    pub fn forecast(&mut self, dynamics: &dyn Dynamics, t_prev: f64, t_next: f64) -> Result<()> {
        let d = self.samples.nrows();
        let mut out = DMatrix::zeros(d, self.size());
        out.as_mut_slice()
            .par_chunks_mut(d)
            .zip(self.samples.as_slice().par_chunks(d))
            .try_for_each(|(o, z)| dynamics.propagate_into(z, t_prev, t_next, o, None))?;
        self.propagated = Some(out);
        Ok(())
    }

    /// Like [`forecast`](Self::forecast), also returning fields `fields` of
    /// every sample at the start of each substep: `traces[i][l]`.
    pub fn forecast_traced(
        &mut self,
        dynamics: &dyn Dynamics,
        t_prev: f64,
        t_next: f64,
        fields: &[usize],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let d = self.samples.nrows();
        let n = dynamics.layout().points_per_field();
        let mut out = DMatrix::zeros(d, self.size());
        let traces = out
            .as_mut_slice()
            .par_chunks_mut(d)
            .zip(self.samples.as_slice().par_chunks(d))
            .map(|(o, z)| -> Result<Vec<Vec<f64>>> {
                let mut trace = Vec::new();
                let mut obs = |_l: usize, _t: f64, s: &[f64]| -> Result<()> {
                    let mut sel = Vec::with_capacity(fields.len() * n);
                    for &f in fields {
                        sel.extend_from_slice(&s[f * n..(f + 1) * n]);
                    }
                    trace.push(sel);
                    Ok(())
                };
                dynamics.propagate_into(z, t_prev, t_next, o, Some(&mut obs))?;
                Ok(trace)
            })
            .collect::<Result<Vec<_>>>()?;
        self.propagated = Some(out);
        Ok(traces)
    }

    fn propagated(&self) -> Result<&DMatrix<f64>> {
        self.propagated
            .as_ref()
            .ok_or_else(|| Error::param("bank", "forecast the bank before assimilating"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub k: usize,
    pub acceptance_rate: f64,
    pub d_k: usize,
    pub wall_time_ms: f64,
    /// Sum of the filter mean.
    pub checksum: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// New samples, `d x N`.
    pub samples: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub diagnostics: StepDiagnostics,
}

impl StepOutput {
    pub fn into_bank(self) -> SampleBank {
        SampleBank::from_samples(self.samples)
    }
}

fn draw_j0(rng: &mut impl Rng, n_bank: usize) -> usize {
    if n_bank > 1 {
        rng.random_range(0..n_bank)
    } else {
        0
    }
}

fn forecast_noise(cov: &CovarianceOperator, streams: &Streams, k: usize, i: usize) -> DVector<f64> {
    cov.sample(&mut streams.stream(Purpose::ForecastNoise, k, i))
}

fn finish(samples: DMatrix<f64>, k: usize, acceptance_rate: f64, d_k: usize, started: Instant) -> StepOutput {
    let mean = samples.column_mean();
    let checksum = mean.sum();
    StepOutput {
        samples,
        mean,
        diagnostics: StepDiagnostics {
            k,
            acceptance_rate,
            d_k,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            checksum,
        },
    }
}

/// Observed value positions inside the state, checked against `layout`.
fn observed_rows(batch: &ObservationBatch, layout: &StateLayout) -> Result<Vec<usize>> {
    let n = layout.points_per_field();
    if let Some(&p) = batch.locations.iter().find(|&&p| p >= n) {
        return Err(Error::PointOutOfRange { index: p, points: n });
    }
    if let Some(&f) = batch.fields.iter().find(|&&f| f >= layout.fields) {
        return Err(Error::param("fields", format!("observed field {f} not in a {}-field state", layout.fields)));
    }
    Ok(batch.state_indices(n))
}

/// Plain filter step on the full state. With a one-sample bank this is the
/// first step, a chain on `z` alone.
pub fn smcmc_step(
    bank: &SampleBank,
    batch: &ObservationBatch,
    cov: &CovarianceOperator,
    layout: &StateLayout,
    cfg: &ChainConfig,
    streams: &Streams,
) -> Result<StepOutput> {
    let started = Instant::now();
    cfg.validate()?;
    let k = batch.k;
    let prop = bank.propagated()?;
    let n_bank = prop.ncols();
    let obs_rows = observed_rows(batch, layout)?;

    let mut rng = streams.stream(Purpose::Chain, k, 0);
    let j0 = draw_j0(&mut rng, n_bank);
    let init = prop.column(j0) + forecast_noise(cov, streams, k, j0);

    let noise = cov.unrestricted();
    let target = MixtureTarget {
        centers: prop,
        noise: &noise,
        obs_pos: &obs_rows,
        y: batch.values.as_slice(),
        sigma_y: batch.sigma_y,
    };
    let out = rwm_joint_kernel(&target, cfg, init.as_slice(), j0, &mut rng)?;
    let rate = out.acceptance_rate();
    Ok(finish(out.samples, k, rate, layout.dim(), started))
}

/// Localized filter step: the chain runs on the active coordinates only and
/// sample `i` keeps noisy forecast `i` elsewhere.
pub fn lsmcmc_step(
    bank: &SampleBank,
    batch: &ObservationBatch,
    cov: &CovarianceOperator,
    layout: &StateLayout,
    partition: &Partition,
    cfg: &ChainConfig,
    streams: &Streams,
) -> Result<StepOutput> {
    let started = Instant::now();
    cfg.validate()?;
    let k = batch.k;
    let prop = bank.propagated()?;
    let (d, n_bank) = prop.shape();
    let obs_rows = observed_rows(batch, layout)?;

    // sample i starts as noisy forecast i mod N_bank; the chain overwrites
    // the active rows below
    let mut samples = DMatrix::zeros(d, cfg.n);
    samples
        .as_mut_slice()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(i, col)| {
            let src = i % n_bank;
            let w = forecast_noise(cov, streams, k, src);
            for ((a, b), c) in col.iter_mut().zip(prop.column(src).iter()).zip(w.iter()) {
                *a = b + c;
            }
        });

    if batch.is_empty() {
        log::debug!("step {k}: no observations, keeping noisy forecasts");
        return Ok(finish(samples, k, 0.0, 0, started));
    }

    let active = active_set(partition, &batch.locations, k)?;
    let noise = cov.restrict(&active)?;
    let idx = noise.indices().to_vec();
    let obs_pos: Vec<usize> = obs_rows
        .iter()
        .map(|r| idx.binary_search(r).expect("observed rows lie in the active set"))
        .collect();

    let gathered;
    let centers = if idx.len() == d {
        prop
    } else {
        gathered = prop.select_rows(&idx);
        &gathered
    };

    let mut rng = streams.stream(Purpose::Chain, k, 0);
    let j0 = draw_j0(&mut rng, n_bank);
    let w0 = forecast_noise(cov, streams, k, j0);
    let init: Vec<f64> = idx.iter().map(|&r| prop[(r, j0)] + w0[r]).collect();

    let target = MixtureTarget {
        centers,
        noise: &noise,
        obs_pos: &obs_pos,
        y: batch.values.as_slice(),
        sigma_y: batch.sigma_y,
    };
    let out = rwm_joint_kernel(&target, cfg, &init, j0, &mut rng)?;

    for i in 0..cfg.n {
        let col = out.samples.column(i);
        for (a, &r) in idx.iter().enumerate() {
            samples[(r, i)] = col[a];
        }
    }
    let rate = out.acceptance_rate();
    Ok(finish(samples, k, rate, idx.len(), started))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearModel;
    use crate::grid::{make_partition, GridSpec};

    fn setup() -> (LinearModel, CovarianceOperator, SampleBank) {
        let grid = GridSpec::unit(5, 5).unwrap();
        let model = LinearModel::new(grid, 0.25, 0.05).unwrap();
        let cov = model.noise();
        let samples = DMatrix::from_fn(25, 7, |r, c| 0.01 * r as f64 - 0.02 * c as f64);
        let mut bank = SampleBank::from_samples(samples);
        bank.forecast(&model, 0.0, 1.0).unwrap();
        (model, cov, bank)
    }

    fn cfg() -> ChainConfig {
        ChainConfig {
            n: 40,
            n_burn: 20,
            ..Default::default()
        }
    }

    #[test]
    fn single_subdomain_matches_plain_filter() {
        let (model, cov, bank) = setup();
        let batch = ObservationBatch::new(1, vec![2, 9, 17], vec![0], DVector::from_vec(vec![0.1, -0.05, 0.02]), 0.05).unwrap();
        let streams = Streams::new(11);
        let layout = model.layout();
        let part = make_partition(&model.grid, 1).unwrap();
        let a = smcmc_step(&bank, &batch, &cov, &layout, &cfg(), &streams).unwrap();
        let b = lsmcmc_step(&bank, &batch, &cov, &layout, &part, &cfg(), &streams).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.diagnostics.acceptance_rate, b.diagnostics.acceptance_rate);
    }

    #[test]
    fn inactive_rows_keep_noisy_forecasts() {
        let (model, cov, bank) = setup();
        let grid = model.grid;
        let part = make_partition(&grid, 4).unwrap();
        // one observation in the subdomain of point 0
        let batch = ObservationBatch::new(3, vec![0], vec![0], DVector::from_vec(vec![0.3]), 0.05).unwrap();
        let streams = Streams::new(5);
        let out = lsmcmc_step(&bank, &batch, &cov, &model.layout(), &part, &cfg(), &streams).unwrap();
        let active = active_set(&part, &[0], 3).unwrap();
        assert_eq!(out.diagnostics.d_k, active.d_k());
        assert!(active.d_k() < grid.points());
        let prop = bank.propagated.as_ref().unwrap();
        for i in 0..cfg().n {
            let w = cov.sample(&mut streams.stream(Purpose::ForecastNoise, 3, i % 7));
            for &p in &active.complement {
                assert_eq!(out.samples[(p, i)], prop[(p, i % 7)] + w[p]);
            }
        }
    }

    #[test]
    fn empty_batch_returns_noisy_forecasts() {
        let (model, cov, bank) = setup();
        let part = make_partition(&model.grid, 4).unwrap();
        let batch = ObservationBatch::new(2, vec![], vec![0], DVector::zeros(0), 0.05).unwrap();
        let out = lsmcmc_step(&bank, &batch, &cov, &model.layout(), &part, &cfg(), &Streams::new(1)).unwrap();
        assert_eq!(out.diagnostics.d_k, 0);
        assert_eq!(out.samples.ncols(), 40);
        assert!(out.samples.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bank_must_be_forecast() {
        let (model, cov, _) = setup();
        let bank = SampleBank::initial(&DVector::zeros(25));
        let batch = ObservationBatch::new(1, vec![0], vec![0], DVector::from_vec(vec![0.0]), 0.05).unwrap();
        assert!(smcmc_step(&bank, &batch, &cov, &model.layout(), &cfg(), &Streams::new(1)).is_err());
    }

    #[test]
    fn traced_forecast_records_substeps() {
        let (model, _, mut bank) = setup();
        let traces = bank.forecast_traced(&model, 0.0, 1.0, &[0]).unwrap();
        assert_eq!(traces.len(), 7);
        assert_eq!(traces[3].len(), 1);
        assert_eq!(traces[3][0].as_slice(), bank.samples.column(3).as_slice());
    }
}
