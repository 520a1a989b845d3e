//! State-noise covariance operators.
//!
//! Three shapes are supported: `sigma^2 I`, a general dense `Q`, and the
//! Fourier-sine construction used for the shallow-water state, where each
//! field's noise is `S1 E S2^T` for a `J x J` matrix `E` of independent
//! normals with variance `sigma^2 / (max(i, j) + 1)`.
//!
//! Densities are returned up to an additive constant.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{check_symmetric, expand_fields, gather_submatrix, ActiveSet, GridSpec};

/// `sin(pi * t)`, exactly zero at integer `t`.
fn sin_pi(t: f64) -> f64 {
    let r = t - 2.0 * (t / 2.0).round();
    if r == 0.0 || r.abs() == 1.0 {
        0.0
    } else {
        (std::f64::consts::PI * r).sin()
    }
}

/// Rectangle `[a1, b1] x [a2, b2]` over which the sine modes are defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineDomain {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
}

impl SineDomain {
    /// The grid's own bounding box, so modes vanish on the outer frame.
    pub fn of_grid(grid: &GridSpec) -> Self {
        Self {
            a1: grid.x0,
            b1: grid.x_max(),
            a2: grid.y0,
            b2: grid.y_max(),
        }
    }
}

/// `S1` (`ny x J`) and `S2` (`nx x J`): `S1[l, j] = sin(pi j y_l / (b2 - a2))`,
/// `S2[s, i] = sin(pi i x_s / (b1 - a1))`, coordinates measured from
/// `(a1, a2)`.
pub fn build_sine_bases(grid: &GridSpec, modes: usize, domain: SineDomain) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if modes == 0 {
        return Err(Error::param("modes", "need at least one Fourier mode"));
    }
    let (lx, ly) = (domain.b1 - domain.a1, domain.b2 - domain.a2);
    if !(lx > 0.0 && ly > 0.0) {
        return Err(Error::param("domain", format!("degenerate extent {lx} x {ly}")));
    }
    if modes > grid.nx.min(grid.ny) {
        log::warn!(
            "{modes} Fourier modes exceed the smallest grid dimension {}; high modes alias",
            grid.nx.min(grid.ny)
        );
    }
    let s1 = DMatrix::from_fn(grid.ny, modes, |l, j| sin_pi(j as f64 * (grid.y(l) - domain.a2) / ly));
    let s2 = DMatrix::from_fn(grid.nx, modes, |s, i| sin_pi(i as f64 * (grid.x(s) - domain.a1) / lx));
    Ok((s1, s2))
}

#[inline]
fn mode_std(sigma: f64, a: usize, b: usize) -> f64 {
    sigma / ((a.max(b) + 1) as f64).sqrt()
}

/// Per-field covariance block of `Vec(S1 E S2^T)`, indexed like the state
/// (`i + j * nx`).
pub fn assemble_covariance(s1: &DMatrix<f64>, s2: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let (ny, modes) = s1.shape();
    let nx = s2.nrows();
    let mut basis = DMatrix::zeros(nx * ny, modes * modes);
    for jy in 0..modes {
        for ix in 0..modes {
            let w = mode_std(sigma, jy, ix);
            let col = jy * modes + ix;
            for j in 0..ny {
                let a = s1[(j, jy)] * w;
                for i in 0..nx {
                    basis[(i + j * nx, col)] = a * s2[(i, ix)];
                }
            }
        }
    }
    let q = &basis * basis.transpose();
    symmetrize(q)
}

fn symmetrize(mut q: DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let m = 0.5 * (q[(i, j)] + q[(j, i)]);
            q[(i, j)] = m;
            q[(j, i)] = m;
        }
    }
    q
}

/// One draw of the Fourier-sine noise.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    /// `ny x nx` per field.
    pub fields: Vec<DMatrix<f64>>,
    /// Fields vectorized in state layout and concatenated.
    pub w: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct FourierSineCovariance {
    grid: GridSpec,
    modes: usize,
    sigma: f64,
    fields: usize,
    s1: DMatrix<f64>,
    s2: DMatrix<f64>,
    block: DMatrix<f64>,
    precision: DMatrix<f64>,
    ridge: f64,
}

impl FourierSineCovariance {
    pub const DEFAULT_RIDGE_FACTOR: f64 = 1e-8;

    pub fn new(grid: &GridSpec, modes: usize, sigma: f64, fields: usize) -> Result<Self> {
        Self::with_ridge(grid, modes, sigma, fields, SineDomain::of_grid(grid), Self::DEFAULT_RIDGE_FACTOR)
    }

    pub fn with_ridge(
        grid: &GridSpec,
        modes: usize,
        sigma: f64,
        fields: usize,
        domain: SineDomain,
        ridge_factor: f64,
    ) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::param("sigma", format!("must be finite and non-negative, got {sigma}")));
        }
        if fields == 0 {
            return Err(Error::param("fields", "need at least one field"));
        }
        let (s1, s2) = build_sine_bases(grid, modes, domain)?;
        let block = assemble_covariance(&s1, &s2, sigma);
        let (precision, ridge) = ridge_precision(&block, ridge_factor)?;
        Ok(Self {
            grid: *grid,
            modes,
            sigma,
            fields,
            s1,
            s2,
            block,
            precision,
            ridge,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn modes(&self) -> usize {
        self.modes
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn fields(&self) -> usize {
        self.fields
    }
    pub fn s1(&self) -> &DMatrix<f64> {
        &self.s1
    }
    pub fn s2(&self) -> &DMatrix<f64> {
        &self.s2
    }
    /// Per-field covariance block.
    pub fn block(&self) -> &DMatrix<f64> {
        &self.block
    }
    /// `(block + ridge I)^-1`.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// One `J x J` coefficient matrix `E`, indexed `[j, i]` (y mode, x mode).
    pub fn sample_modes<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        random_modes(rng, self.modes, self.sigma)
    }

    pub fn sample_field_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseDraw {
        let (nx, ny, m) = (self.grid.nx, self.grid.ny, self.modes);
        let npts = nx * ny;
        let mut fields = Vec::with_capacity(self.fields);
        let mut w = DVector::zeros(npts * self.fields);
        for f in 0..self.fields {
            let eps = random_modes(rng, m, self.sigma);
            let xi = &self.s1 * eps * self.s2.transpose();
            for j in 0..ny {
                for i in 0..nx {
                    w[f * npts + i + j * nx] = xi[(j, i)];
                }
            }
            fields.push(xi);
        }
        NoiseDraw { fields, w }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let (nx, ny, m) = (self.grid.nx, self.grid.ny, self.modes);
        let npts = nx * ny;
        for f in 0..self.fields {
            let eps = random_modes(rng, m, self.sigma);
            let xi = &self.s1 * eps * self.s2.transpose();
            for j in 0..ny {
                for i in 0..nx {
                    out[f * npts + i + j * nx] = xi[(j, i)];
                }
            }
        }
    }

    /// Write the block and its precision: a header of four little-endian
    /// `i64` (`nx, ny, J, fields`) followed by both matrices as row-major
    /// little-endian `f64`.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for h in [self.grid.nx, self.grid.ny, self.modes, self.fields] {
            w.write_all(&(h as i64).to_le_bytes())?;
        }
        for m in [&self.block, &self.precision] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    w.write_all(&m[(i, j)].to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuild from a dump written by [`write_dump`](Self::write_dump);
    /// only the sine bases are recomputed.
    pub fn read_dump(path: &Path, grid: &GridSpec, sigma: f64, domain: SineDomain) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0usize; 4];
        for h in header.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let v = i64::from_le_bytes(b);
            if v < 0 {
                return Err(Error::Format(format!("negative header value {v}")));
            }
            *h = v as usize;
        }
        let [nx, ny, modes, fields] = header;
        if nx != grid.nx || ny != grid.ny {
            return Err(Error::Format(format!(
                "dump is for a {nx}x{ny} grid, expected {}x{}",
                grid.nx, grid.ny
            )));
        }
        let n = nx * ny;
        let read_matrix = |r: &mut BufReader<File>| -> Result<DMatrix<f64>> {
            let mut m = DMatrix::zeros(n, n);
            let mut b = [0u8; 8];
            for i in 0..n {
                for j in 0..n {
                    r.read_exact(&mut b)?;
                    m[(i, j)] = f64::from_le_bytes(b);
                }
            }
            Ok(m)
        };
        let block = read_matrix(&mut r)?;
        let precision = read_matrix(&mut r)?;
        let (s1, s2) = build_sine_bases(grid, modes, domain)?;
        let ridge = ridge_for(&block, Self::DEFAULT_RIDGE_FACTOR);
        Ok(Self {
            grid: *grid,
            modes,
            sigma,
            fields,
            s1,
            s2,
            block,
            precision,
            ridge,
        })
    }
}

fn random_modes<R: Rng + ?Sized>(rng: &mut R, modes: usize, sigma: f64) -> DMatrix<f64> {
    let mut eps = DMatrix::zeros(modes, modes);
    for jy in 0..modes {
        for ix in 0..modes {
            let z: f64 = rng.sample(StandardNormal);
            eps[(jy, ix)] = mode_std(sigma, jy, ix) * z;
        }
    }
    eps
}

fn ridge_for(block: &DMatrix<f64>, ridge_factor: f64) -> f64 {
    let n = block.nrows().max(1);
    let r = ridge_factor * block.trace() / n as f64;
    if r > 0.0 {
        r
    } else {
        ridge_factor
    }
}

fn ridge_precision(block: &DMatrix<f64>, ridge_factor: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = block.nrows();
    let mut ridge = ridge_for(block, ridge_factor);
    for _ in 0..8 {
        let shifted = block + DMatrix::identity(n, n) * ridge;
        if let Some(ch) = Cholesky::new(shifted) {
            return Ok((symmetrize(ch.inverse()), ridge));
        }
        log::warn!("ridge {ridge:e} too small for a stable factorization, increasing");
        ridge *= 10.0;
    }
    Err(Error::NotPositiveDefinite("regularized noise block".into()))
}

#[derive(Debug, Clone)]
pub struct DenseCovariance {
    q: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl DenseCovariance {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&q, 1e-10)?;
        let q = symmetrize(q);
        let ch = Cholesky::new(q.clone()).ok_or_else(|| Error::NotPositiveDefinite("dense state covariance".into()))?;
        let precision = symmetrize(ch.inverse());
        Ok(Self {
            chol_l: ch.l(),
            q,
            precision,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn cholesky_l(&self) -> &DMatrix<f64> {
        &self.chol_l
    }
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
}

#[derive(Debug, Clone)]
pub enum CovarianceOperator {
    Diagonal { variance: f64, dim: usize },
    Dense(DenseCovariance),
    FourierSine(FourierSineCovariance),
}

impl CovarianceOperator {
    pub fn diagonal(variance: f64, dim: usize) -> Result<Self> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::param("variance", format!("must be finite and non-negative, got {variance}")));
        }
        Ok(Self::Diagonal { variance, dim })
    }

    pub fn dense(q: DMatrix<f64>) -> Result<Self> {
        Ok(Self::Dense(DenseCovariance::new(q)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Diagonal { dim, .. } => *dim,
            Self::Dense(d) => d.q.nrows(),
            Self::FourierSine(f) => f.grid.points() * f.fields,
        }
    }

    /// Dense covariance matrix over the full state (block diagonal for the
    /// Fourier-sine operator).
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Diagonal { variance, dim } => DMatrix::identity(*dim, *dim) * *variance,
            Self::Dense(d) => d.q.clone(),
            Self::FourierSine(f) => {
                let n = f.block.nrows();
                let mut out = DMatrix::zeros(n * f.fields, n * f.fields);
                for k in 0..f.fields {
                    out.view_mut((k * n, k * n), (n, n)).copy_from(&f.block);
                }
                out
            }
        }
    }

    /// Draw `W ~ N(0, Q)` into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        match self {
            Self::Diagonal { variance, .. } => {
                let sd = variance.sqrt();
                for o in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = sd * z;
                }
            }
            Self::Dense(d) => {
                let n = d.q.nrows();
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let w = &d.chol_l * z;
                out.copy_from_slice(w.as_slice());
            }
            Self::FourierSine(f) => f.sample_into(rng, out),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut w = DVector::zeros(self.dim());
        self.sample_into(rng, w.as_mut_slice());
        w
    }

    /// `-x^T P x / 2` with `P` the (regularized) precision.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "gaussian log density",
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(match self {
            Self::Diagonal { variance, .. } => -0.5 * x.iter().map(|v| v * v).sum::<f64>() / variance,
            Self::Dense(d) => -0.5 * quad_form(&d.precision, x),
            Self::FourierSine(f) => {
                let n = f.block.nrows();
                -0.5 * x.chunks(n).map(|c| quad_form(&f.precision, c)).sum::<f64>()
            }
        })
    }

    /// Precision structure and proposal route for the state coordinates of
    /// `active` (all fields).
    pub fn restrict(&self, active: &ActiveSet) -> Result<RestrictedCovariance<'_>> {
        let fields = match self {
            Self::FourierSine(f) => f.fields,
            _ => 1,
        };
        let points_per_field = self.dim() / fields;
        if let Some(&bad) = active.points.iter().find(|&&p| p >= points_per_field) {
            return Err(Error::PointOutOfRange {
                index: bad,
                points: points_per_field,
            });
        }
        let full = active.points.len() == points_per_field;
        let indices = expand_fields(&active.points, fields, points_per_field);
        let (precision, proposal) = match self {
            Self::Diagonal { variance, .. } => (
                RestrictedPrecision::Scalar(1.0 / variance),
                ProposalRoute::Diagonal(variance.sqrt()),
            ),
            Self::Dense(d) => {
                if full {
                    (
                        RestrictedPrecision::Dense(d.precision.clone()),
                        ProposalRoute::Cholesky(d.chol_l.clone()),
                    )
                } else {
                    let p = gather_submatrix(&d.precision, &indices);
                    let route = match Cholesky::new(gather_submatrix(&d.q, &indices)) {
                        Some(ch) => ProposalRoute::Cholesky(ch.l()),
                        None => ProposalRoute::GatherFull,
                    };
                    (RestrictedPrecision::Dense(p), route)
                }
            }
            Self::FourierSine(f) => {
                let block = if full {
                    f.precision.clone()
                } else {
                    gather_submatrix(&f.precision, &active.points)
                };
                (RestrictedPrecision::Blocks { block, fields }, ProposalRoute::GatherFull)
            }
        };
        Ok(RestrictedCovariance {
            op: self,
            indices,
            precision,
            proposal,
        })
    }

    /// Restriction to the whole state.
    pub fn unrestricted(&self) -> RestrictedCovariance<'_> {
        let fields = match self {
            Self::FourierSine(f) => f.fields,
            _ => 1,
        };
        let active = ActiveSet::full(self.dim() / fields, 0);
        self.restrict(&active).expect("full active set is always valid")
    }
}

fn quad_form(p: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = DVectorView::from_slice(x, x.len());
    let px = p * v;
    px.dot(&v)
}

#[derive(Debug, Clone)]
pub enum RestrictedPrecision {
    /// `c I`.
    Scalar(f64),
    Dense(DMatrix<f64>),
    /// One block repeated on the diagonal for every field.
    Blocks { block: DMatrix<f64>, fields: usize },
}

#[derive(Debug, Clone)]
enum ProposalRoute {
    Diagonal(f64),
    Cholesky(DMatrix<f64>),
    /// Draw from the full operator and keep the restricted coordinates.
    GatherFull,
}

/// The noise law restricted to a subset of state coordinates: the
/// corresponding rows and columns of the precision, plus a sampler for the
/// marginal `N(0, Q[idx, idx])`.
#[derive(Debug, Clone)]
pub struct RestrictedCovariance<'a> {
    op: &'a CovarianceOperator,
    indices: Vec<usize>,
    precision: RestrictedPrecision,
    proposal: ProposalRoute,
}

impl<'a> RestrictedCovariance<'a> {
    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    /// State indices covered, field-major.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn precision(&self) -> &RestrictedPrecision {
        &self.precision
    }

    pub fn operator(&self) -> &'a CovarianceOperator {
        self.op
    }

    /// `-x^T P~ x / 2`; `scratch` is reused between calls.
    pub fn log_density(&self, x: &[f64], scratch: &mut DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        match &self.precision {
            RestrictedPrecision::Scalar(c) => -0.5 * c * x.iter().map(|v| v * v).sum::<f64>(),
            RestrictedPrecision::Dense(p) => -0.5 * quad_form_scratch(p, x, scratch),
            RestrictedPrecision::Blocks { block, .. } => {
                let n = block.nrows();
                -0.5 * x.chunks(n).map(|c| quad_form_scratch(block, c, scratch)).sum::<f64>()
            }
        }
    }

    /// `scale * N(0, Q[idx, idx])` into `out`.
    pub fn propose_into<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64, out: &mut [f64], scratch: &mut DVector<f64>) {
        match &self.proposal {
            ProposalRoute::Diagonal(sd) => {
                let s = scale * sd;
                for o in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = s * z;
                }
            }
            ProposalRoute::Cholesky(l) => {
                let n = l.nrows();
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                scratch.resize_vertically_mut(n, 0.0);
                scratch.gemv(scale, l, &z, 0.0);
                out.copy_from_slice(scratch.as_slice());
            }
            ProposalRoute::GatherFull => {
                let full = self.op.sample(rng);
                for (o, &i) in out.iter_mut().zip(&self.indices) {
                    *o = scale * full[i];
                }
            }
        }
    }
}

fn quad_form_scratch(p: &DMatrix<f64>, x: &[f64], scratch: &mut DVector<f64>) -> f64 {
    let n = x.len();
    let v = DVectorView::from_slice(x, n);
    if scratch.nrows() != n {
        *scratch = DVector::zeros(n);
    }
    scratch.gemv(1.0, p, &v, 0.0);
    scratch.dot(&v)
}
