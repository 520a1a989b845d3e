//! Observation operators: tilted swaths sweeping across the grid, Gaussian
//! likelihoods, and drifters whose positions are advected by the estimated
//! flow.
//!
//! `C` is never formed: applying it is a gather of state entries.

use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::rng::{Purpose, Streams};

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub k: usize,
    /// Sorted unique grid point indices.
    pub locations: Vec<usize>,
    /// Observed fields; each location contributes one value per field.
    pub fields: Vec<usize>,
    /// Location-major: value `a * fields.len() + c` is field `fields[c]` at
    /// `locations[a]`.
    pub values: DVector<f64>,
    pub sigma_y: f64,
}

impl ObservationBatch {
    pub fn new(k: usize, locations: Vec<usize>, fields: Vec<usize>, values: DVector<f64>, sigma_y: f64) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::param("fields", "need at least one observed field"));
        }
        if locations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("locations", "must be sorted and unique"));
        }
        if values.len() != locations.len() * fields.len() {
            return Err(Error::DimensionMismatch {
                context: "observation values",
                expected: locations.len() * fields.len(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("observation value {i} at step {k}")));
        }
        if !(sigma_y > 0.0) || !sigma_y.is_finite() {
            return Err(Error::param("sigma_y", format!("must be positive and finite, got {sigma_y}")));
        }
        Ok(Self {
            k,
            locations,
            fields,
            values,
            sigma_y,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// State index of each value, in value order.
    pub fn state_indices(&self, points_per_field: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dim());
        for &p in &self.locations {
            for &f in &self.fields {
                out.push(f * points_per_field + p);
            }
        }
        out
    }

    /// Keep only the values whose index is in `keep` (sorted).
    pub fn value_subset(&self, keep: &[usize]) -> Vec<f64> {
        keep.iter().map(|&a| self.values[a]).collect()
    }
}

/// `z[indices]`, the action of the selection matrix.
pub fn gather(z: &[f64], indices: &[usize]) -> Vec<f64> {
    indices.iter().map(|&i| z[i]).collect()
}

/// `-|y - Cz|^2 / (2 sigma_y^2)` for values already gathered in batch order.
pub fn obs_loglik(z_values: &[f64], batch: &ObservationBatch) -> Result<f64> {
    if z_values.len() != batch.dim() {
        return Err(Error::DimensionMismatch {
            context: "observation likelihood",
            expected: batch.dim(),
            actual: z_values.len(),
        });
    }
    let ss: f64 = z_values.iter().zip(batch.values.iter()).map(|(z, y)| (y - z) * (y - z)).sum();
    Ok(-0.5 * ss / (batch.sigma_y * batch.sigma_y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwathConfig {
    /// Width in grid points.
    pub width: usize,
    /// Column shift per row away from the centre row.
    pub slope_mag: f64,
    /// Westward shift of the centre column per observation time.
    pub stride: usize,
    pub phase: usize,
}

impl Default for SwathConfig {
    fn default() -> Self {
        Self {
            width: 7,
            slope_mag: 1.0,
            stride: 7,
            phase: 0,
        }
    }
}

impl SwathConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.width == 0 || self.width > grid.nx {
            return Err(Error::param("width", format!("must be in 1..={}, got {}", grid.nx, self.width)));
        }
        if self.stride == 0 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        if !self.slope_mag.is_finite() || self.slope_mag < 0.0 {
            return Err(Error::param("slope_mag", format!("must be finite and non-negative, got {}", self.slope_mag)));
        }
        Ok(())
    }
}

/// Grid points covered by the swath at time `k`, sorted.
///
/// The centre column moves west by `stride` each step and wraps around;
/// the tilt flips sign every step. Column distance is measured cyclically so
/// the band wraps at the east and west edges.
pub fn swath_locations(cfg: &SwathConfig, grid: &GridSpec, k: usize) -> Vec<usize> {
    let (nx, ny) = (grid.nx, grid.ny);
    if cfg.width >= nx {
        return (0..grid.points()).collect();
    }
    let nxf = nx as f64;
    let shift = (cfg.phase as i128 + cfg.stride as i128 * k as i128).rem_euclid(nx as i128) as usize;
    let centre = ((nx - 1 + nx - shift) % nx) as f64;
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    let half = cfg.width as f64 / 2.0;
    let mut out = Vec::new();
    for j in 0..ny {
        let c = centre + sign * cfg.slope_mag * (j as f64 - ny as f64 / 2.0);
        let row_start = out.len();
        for i in 0..nx {
            let d = (i as f64 - c).rem_euclid(nxf);
            if d.min(nxf - d) < half {
                out.push(i + j * nx);
            }
        }
        if out.len() == row_start {
            // a one-point swath centred between columns
            let i = (c.round().rem_euclid(nxf) as usize) % nx;
            out.push(i + j * nx);
        }
    }
    out
}

/// Observations of `truth[k - 1]` at `locations[k - 1]` for `k = 1..=T`,
/// with noise from the `(ObservationNoise, k, 0)` stream.
pub fn synthesize_observations(
    truth: &[DVector<f64>],
    locations: &[Vec<usize>],
    fields: &[usize],
    points_per_field: usize,
    sigma_y: f64,
    streams: &Streams,
) -> Result<Vec<ObservationBatch>> {
    if truth.len() != locations.len() {
        return Err(Error::DimensionMismatch {
            context: "observation schedule",
            expected: truth.len(),
            actual: locations.len(),
        });
    }
    let mut out = Vec::with_capacity(truth.len());
    for (t, (z, locs)) in truth.iter().zip(locations).enumerate() {
        let k = t + 1;
        let mut locs = locs.clone();
        locs.sort_unstable();
        locs.dedup();
        if let Some(&bad) = locs.iter().find(|&&p| p >= points_per_field) {
            return Err(Error::PointOutOfRange {
                index: bad,
                points: points_per_field,
            });
        }
        let mut rng = streams.stream(Purpose::ObservationNoise, k, 0);
        let mut values = Vec::with_capacity(locs.len() * fields.len());
        for &p in &locs {
            for &f in fields {
                let e: f64 = rng.sample(StandardNormal);
                values.push(z[f * points_per_field + p] + sigma_y * e);
            }
        }
        let batch = if sigma_y > 0.0 {
            ObservationBatch::new(k, locs, fields.to_vec(), DVector::from_vec(values), sigma_y)?
        } else {
            // exact observations are allowed when synthesizing
            ObservationBatch {
                k,
                locations: locs,
                fields: fields.to_vec(),
                values: DVector::from_vec(values),
                sigma_y,
            }
        };
        out.push(batch);
    }
    Ok(out)
}

pub fn write_batches_csv(path: &Path, batches: &[ObservationBatch]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(csv_err)?;
    let s = batches.first().map_or(1, |b| b.fields.len());
    let mut head = vec!["k".to_string(), "location_index".to_string()];
    head.extend((1..=s).map(|c| format!("value_{c}")));
    w.write_record(&head).map_err(csv_err)?;
    for b in batches {
        let s = b.fields.len();
        for (a, &p) in b.locations.iter().enumerate() {
            let mut rec = vec![b.k.to_string(), p.to_string()];
            rec.extend((0..s).map(|c| format!("{:e}", b.values[a * s + c])));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read batches written by [`write_batches_csv`]; `fields` and `sigma_y`
/// are not stored in the file.
pub fn read_batches_csv(path: &Path, fields: &[usize], sigma_y: f64) -> Result<Vec<ObservationBatch>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(csv_err)?;
    let s = fields.len();
    let mut grouped: std::collections::BTreeMap<usize, Vec<(usize, Vec<f64>)>> = Default::default();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != s + 2 {
            return Err(Error::Format(format!("expected {} columns, found {}", s + 2, rec.len())));
        }
        let k: usize = parse(&rec[0])?;
        let p: usize = parse(&rec[1])?;
        let vals = (0..s).map(|c| parse(&rec[c + 2])).collect::<Result<Vec<f64>>>()?;
        grouped.entry(k).or_default().push((p, vals));
    }
    grouped
        .into_iter()
        .map(|(k, mut rows)| {
            rows.sort_by_key(|r| r.0);
            let locations: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let values = DVector::from_iterator(rows.len() * s, rows.into_iter().flat_map(|r| r.1));
            ObservationBatch::new(k, locations, fields.to_vec(), values, sigma_y)
        })
        .collect()
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Format(format!("cannot parse `{s}`")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Bilinear interpolation of a grid field at physical `(x, y)`; outside
/// points are clamped to the domain.
pub fn bilinear(grid: &GridSpec, field: &[f64], x: f64, y: f64) -> f64 {
    let fx = ((x - grid.x0) / grid.dx).clamp(0.0, (grid.nx - 1) as f64);
    let fy = ((y - grid.y0) / grid.dy).clamp(0.0, (grid.ny - 1) as f64);
    let i = (fx.floor() as usize).min(grid.nx - 2);
    let j = (fy.floor() as usize).min(grid.ny - 2);
    let (a, b) = (fx - i as f64, fy - j as f64);
    let at = |i: usize, j: usize| field[i + j * grid.nx];
    (1.0 - a) * (1.0 - b) * at(i, j) + a * (1.0 - b) * at(i + 1, j) + (1.0 - a) * b * at(i, j + 1) + a * b * at(i + 1, j + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrifterSet {
    /// Estimated position of each drifter.
    pub mean_positions: Vec<[f64; 2]>,
    /// `sample_positions[j][i]`: drifter `j` carried by sample `i`.
    pub sample_positions: Vec<Vec<[f64; 2]>>,
}

impl DrifterSet {
    pub fn new(grid: &GridSpec, positions: Vec<[f64; 2]>, samples: usize) -> Result<Self> {
        if samples == 0 {
            return Err(Error::param("samples", "need at least one sample"));
        }
        for (d, p) in positions.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::DrifterPosition { drifter: d });
            }
        }
        let mean_positions: Vec<[f64; 2]> = positions.iter().map(|p| clamp_to(grid, *p)).collect();
        let sample_positions = mean_positions.iter().map(|p| vec![*p; samples]).collect();
        Ok(Self {
            mean_positions,
            sample_positions,
        })
    }

    pub fn n_drifters(&self) -> usize {
        self.mean_positions.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_positions.first().map_or(0, |s| s.len())
    }

    /// Restart every sample's copy from the current estimate, resizing to
    /// `samples` copies.
    pub fn reset_samples(&mut self, samples: usize) {
        for (s, m) in self.sample_positions.iter_mut().zip(&self.mean_positions) {
            s.clear();
            s.resize(samples, *m);
        }
    }

    /// One Euler substep of sample `i` through velocity fields `u`, `v`.
    pub fn euler_substep(&mut self, grid: &GridSpec, i: usize, u: &[f64], v: &[f64], tau: f64) -> Result<()> {
        for (d, s) in self.sample_positions.iter_mut().enumerate() {
            let [x, y] = s[i];
            let nx = x + tau * bilinear(grid, u, x, y);
            let ny = y + tau * bilinear(grid, v, x, y);
            if !nx.is_finite() || !ny.is_finite() {
                return Err(Error::DrifterPosition { drifter: d });
            }
            s[i] = clamp_to(grid, [nx, ny]);
        }
        Ok(())
    }

    /// Estimate each drifter as the average over samples.
    pub fn update_mean(&mut self) {
        for (m, s) in self.mean_positions.iter_mut().zip(&self.sample_positions) {
            let n = s.len() as f64;
            let (sx, sy) = s.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
            *m = [sx / n, sy / n];
        }
    }
}

fn clamp_to(grid: &GridSpec, [x, y]: [f64; 2]) -> [f64; 2] {
    [x.clamp(grid.x0, grid.x_max()), y.clamp(grid.y0, grid.y_max())]
}

/// Advance every sample's drifters through its substep states.
///
/// `traces[i][l]` is sample `i`'s state at substep `l`; `u_field` and
/// `v_field` select the velocity fields within the state.
pub fn advect_drifters(
    set: &DrifterSet,
    traces: &[Vec<Vec<f64>>],
    grid: &GridSpec,
    tau: f64,
    u_field: usize,
    v_field: usize,
) -> Result<DrifterSet> {
    let n = grid.points();
    let mut out = set.clone();
    out.reset_samples(traces.len());
    for (i, path) in traces.iter().enumerate() {
        for z in path {
            let u = &z[u_field * n..(u_field + 1) * n];
            let v = &z[v_field * n..(v_field + 1) * n];
            out.euler_substep(grid, i, u, v, tau)?;
        }
    }
    out.update_mean();
    Ok(out)
}

/// Nearest grid point of a physical position; ties go to the lower index.
pub fn nearest_point(grid: &GridSpec, [x, y]: [f64; 2]) -> usize {
    let near = |v: f64, n: usize| -> usize {
        let f = v.clamp(0.0, (n - 1) as f64);
        let lo = f.floor();
        // exactly half way rounds down
        let i = if f - lo > 0.5 { lo + 1.0 } else { lo };
        (i as usize).min(n - 1)
    };
    let i = near((x - grid.x0) / grid.dx, grid.nx);
    let j = near((y - grid.y0) / grid.dy, grid.ny);
    grid.index(i, j)
}

/// Nearest grid point of every drifter estimate, in drifter order.
pub fn drifter_points(set: &DrifterSet, grid: &GridSpec) -> Vec<usize> {
    set.mean_positions.iter().map(|p| nearest_point(grid, *p)).collect()
}

/// Sorted unique observation locations of the drifter estimates.
pub fn drifter_obs_locations(set: &DrifterSet, grid: &GridSpec) -> Vec<usize> {
    let mut v = drifter_points(set, grid);
    v.sort_unstable();
    v.dedup();
    v
}

/// Velocity observations placed at the given per-drifter grid points.
/// Drifters sharing a point are merged by averaging their values.
pub fn drifter_batch(
    k: usize,
    points: &[usize],
    velocities: &[[f64; 2]],
    u_field: usize,
    v_field: usize,
    sigma_y: f64,
) -> Result<ObservationBatch> {
    if points.len() != velocities.len() {
        return Err(Error::DimensionMismatch {
            context: "drifter observations",
            expected: points.len(),
            actual: velocities.len(),
        });
    }
    let mut acc: std::collections::BTreeMap<usize, ([f64; 2], usize)> = Default::default();
    for (&p, uv) in points.iter().zip(velocities) {
        let e = acc.entry(p).or_insert(([0.0, 0.0], 0));
        e.0[0] += uv[0];
        e.0[1] += uv[1];
        e.1 += 1;
    }
    let locations: Vec<usize> = acc.keys().copied().collect();
    let values = DVector::from_iterator(
        2 * locations.len(),
        acc.values().flat_map(|(s, c)| [s[0] / *c as f64, s[1] / *c as f64]),
    );
    ObservationBatch::new(k, locations, vec![u_field, v_field], values, sigma_y)
}

/// One row of a drifter data file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrifterRecord {
    pub time_s: f64,
    pub drifter_id: usize,
    pub x_m: f64,
    pub y_m: f64,
    pub u_mps: f64,
    pub v_mps: f64,
}

const DRIFTER_COLUMNS: [&str; 6] = ["time_s", "drifter_id", "x_m", "y_m", "u_mps", "v_mps"];

pub fn read_drifter_csv(path: &Path) -> Result<Vec<DrifterRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Format(format!("drifter file lacks column `{name}`")))
    };
    let idx: Vec<usize> = DRIFTER_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        out.push(DrifterRecord {
            time_s: parse(&rec[idx[0]])?,
            drifter_id: parse(&rec[idx[1]])?,
            x_m: parse(&rec[idx[2]])?,
            y_m: parse(&rec[idx[3]])?,
            u_mps: parse(&rec[idx[4]])?,
            v_mps: parse(&rec[idx[5]])?,
        });
    }
    Ok(out)
}

pub fn write_drifter_csv(path: &Path, records: &[DrifterRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(DRIFTER_COLUMNS).map_err(csv_err)?;
    for r in records {
        w.write_record([
            format!("{:e}", r.time_s),
            r.drifter_id.to_string(),
            format!("{:e}", r.x_m),
            format!("{:e}", r.y_m),
            format!("{:e}", r.u_mps),
            format!("{:e}", r.v_mps),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
