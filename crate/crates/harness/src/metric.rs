//! Accuracy metric, log-log rate fits and mean-file I/O.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use nalgebra::DMatrix;

/// Percentage of entries with `|filter - reference| < threshold`; both are
/// `T x d` with one row per observation time.
pub fn error_metric(filter: &DMatrix<f64>, reference: &DMatrix<f64>, threshold: f64) -> Result<f64> {
    ensure!(
        filter.shape() == reference.shape(),
        "mean shapes differ: {:?} vs {:?}",
        filter.shape(),
        reference.shape()
    );
    ensure!(threshold > 0.0, "threshold must be positive, got {threshold}");
    ensure!(!filter.is_empty(), "no means to compare");
    let below = filter
        .iter()
        .zip(reference.iter())
        .filter(|(a, b)| (*a - *b).abs() < threshold)
        .count();
    Ok(100.0 * below as f64 / filter.len() as f64)
}

/// Root mean square of `a - b` over all entries.
pub fn rmse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    ensure!(a.shape() == b.shape(), "shapes differ: {:?} vs {:?}", a.shape(), b.shape());
    ensure!(!a.is_empty(), "empty input");
    Ok(((a - b).norm_squared() / a.len() as f64).sqrt())
}

/// Least-squares line through `(ln x, ln y)`: `(slope, intercept)`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    ensure!(x.len() == y.len(), "{} abscissae for {} ordinates", x.len(), y.len());
    ensure!(x.len() >= 2, "need at least two points");
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        bail!("log-log fit needs positive finite values");
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    ensure!(sxx > 0.0, "abscissae are all equal");
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// One row per time, values in `{:e}` so they read back exactly.
pub fn write_means_csv(path: &Path, means: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["k".to_string()];
    header.extend((0..means.ncols()).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for (t, row) in means.row_iter().enumerate() {
        let mut rec = vec![(t + 1).to_string()];
        rec.extend(row.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_means_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let d = r.headers()?.len().saturating_sub(1);
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        ensure!(rec.len() == d + 1, "row {} of {} has {} fields", rows + 1, path.display(), rec.len());
        for f in rec.iter().skip(1) {
            data.push(f.trim().parse::<f64>().with_context(|| format!("bad value {f:?} in {}", path.display()))?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, d, &data))
}
