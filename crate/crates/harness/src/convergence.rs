//! Monte Carlo error of the plain filter against the Kalman means as the
//! chain length grows.

use anyhow::{bail, ensure, Result};
use nalgebra::DMatrix;

use crate::config::{ChainSettings, ExperimentConfig, FilterConfig};
use crate::experiment::{build_problem, run_filter, ReferenceKind};
use crate::metric::{loglog_fit, rmse};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub n_burn: usize,
    /// Pooled over replicas, times and coordinates, per-replica means.
    pub rmse: f64,
    /// Error of the replica-averaged mean.
    pub averaged_rmse: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `ln rmse` against `ln N`.
    pub slope: f64,
    pub intercept: f64,
}

/// Root mean square over replicas of each replica's error.
pub fn pooled_rmse(replica_means: &[&DMatrix<f64>], reference: &DMatrix<f64>) -> Result<f64> {
    ensure!(!replica_means.is_empty(), "no replicas");
    let mut ss = 0.0;
    for m in replica_means {
        ss += rmse(m, reference)?.powi(2);
    }
    Ok((ss / replica_means.len() as f64).sqrt())
}

/// Burn-in for chain length `n`, keeping the template's ratio.
pub fn scaled_burn_in(template: &ChainSettings, n: usize) -> usize {
    ((template.n_burn as f64) * n as f64 / template.n as f64).round() as usize
}

/// Runs the first `smcmc` filter of `cfg` at each `N` in `n_list`; the
/// burn-in keeps the configured `N_burn / N` ratio.
pub fn convergence_study(cfg: &ExperimentConfig, n_list: &[usize]) -> Result<ConvergenceTable> {
    ensure!(n_list.len() >= 3, "need at least three chain lengths");
    let (lo, hi) = (*n_list.iter().min().unwrap(), *n_list.iter().max().unwrap());
    ensure!(lo >= 1 && hi >= 10 * lo, "chain lengths must span a decade");
    let template = cfg
        .filters
        .iter()
        .find_map(|f| match f {
            FilterConfig::Smcmc(c) => Some(*c),
            _ => None,
        })
        .ok_or_else(|| anyhow::anyhow!("convergence study needs an smcmc filter in the config"))?;
    let problem = build_problem(cfg)?;
    if problem.reference_kind != ReferenceKind::Kalman {
        bail!("convergence study needs the linear model and its Kalman reference");
    }
    let seeds: Vec<u64> = (0..cfg.experiment.replicas).map(|m| cfg.seed(m)).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.experiment.threads).build()?;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let chain = ChainSettings {
            n,
            n_burn: scaled_burn_in(&template, n),
            ..template
        };
        let filter = FilterConfig::Smcmc(chain);
        let run = pool.install(|| run_filter(&problem, &filter, &seeds, cfg.threshold(), None))?;
        let means: Vec<&DMatrix<f64>> = run.replicas.iter().map(|r| &r.means).collect();
        let row = ConvergenceRow {
            n,
            n_burn: chain.n_burn,
            rmse: pooled_rmse(&means, &problem.reference)?,
            averaged_rmse: rmse(&run.mean, &problem.reference)?,
            wall_s: run.wall_s,
        };
        log::info!("N = {n}: rmse {:.4e}", row.rmse);
        rows.push(row);
    }
    let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.rmse).collect();
    let (slope, intercept) = loglog_fit(&x, &y)?;
    Ok(ConvergenceTable { rows, slope, intercept })
}

pub fn write_convergence_csv(path: &std::path::Path, table: &ConvergenceTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["N", "N_burn", "rmse", "averaged_rmse", "wall_s", "fitted_slope"])?;
    for r in &table.rows {
        w.write_record([
            r.n.to_string(),
            r.n_burn.to_string(),
            format!("{:e}", r.rmse),
            format!("{:e}", r.averaged_rmse),
            format!("{:.3}", r.wall_s),
            format!("{:.4}", table.slope),
        ])?;
    }
    w.flush()?;
    Ok(())
}
