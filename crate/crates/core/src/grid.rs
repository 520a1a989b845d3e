//! Grid geometry, rectangular subdomain partitions and active sets.
//!
//! Points are indexed `i + j * nx` with `i` the x (east) index and `j` the y
//! (north) index, both zero based. A partition splits the `(nx-1) x (ny-1)`
//! cells into equal rectangles. Each subdomain owns the points on its west
//! and south edges; the last column and row of points fold into the
//! easternmost and northernmost subdomains.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub x0: f64,
    pub y0: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Self> {
        Self::with_origin(nx, ny, dx, dy, 0.0, 0.0)
    }

    /// Unit-spaced grid, coordinates equal to the integer indices.
    pub fn unit(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, 1.0, 1.0)
    }

    pub fn with_origin(nx: usize, ny: usize, dx: f64, dy: f64, x0: f64, y0: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidGrid(format!("need at least 1 point per direction, got {nx}x{ny}")));
        }
        if !(dx > 0.0 && dy > 0.0) || !dx.is_finite() || !dy.is_finite() {
            return Err(Error::InvalidGrid(format!("cell sizes must be positive, got dx={dx}, dy={dy}")));
        }
        Ok(Self { nx, ny, dx, dy, x0, y0 })
    }

    pub fn points(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i + j * self.nx
    }

    #[inline]
    pub fn ij(&self, p: usize) -> (usize, usize) {
        (p % self.nx, p / self.nx)
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.dx
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        self.y0 + j as f64 * self.dy
    }

    /// Physical coordinates of point `p`.
    pub fn coords(&self, p: usize) -> (f64, f64) {
        let (i, j) = self.ij(p);
        (self.x(i), self.y(j))
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.nx - 1)
    }

    pub fn y_max(&self) -> f64 {
        self.y(self.ny - 1)
    }
}

/// Half-open point-index rectangle `[i0, i1) x [j0, j1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubRect {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

impl SubRect {
    pub fn len(&self) -> usize {
        (self.i1 - self.i0) * (self.j1 - self.j0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.i0 && i < self.i1 && j >= self.j0 && j < self.j1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    grid: GridSpec,
    gamma_requested: usize,
    gamma_effective: usize,
    /// Subdomains along x and y.
    layout: (usize, usize),
    /// Cells per subdomain along x and y.
    cells_per_sub: (usize, usize),
    sub_of_point: Vec<u32>,
    sub_rects: Vec<SubRect>,
}

fn is_prime(n: usize) -> bool {
    if n < 2 {
        return false;
    }
    let mut f = 2;
    while f * f <= n {
        if n % f == 0 {
            return false;
        }
        f += 1;
    }
    true
}

/// Best `(gx, gy, a, b)` tiling of a `cx x cy` cell grid into `gamma` equal
/// rectangles of `a x b` cells, minimizing `|a - b|` and preferring `a <= b`.
fn best_tiling(cx: usize, cy: usize, gamma: usize) -> Option<(usize, usize, usize, usize)> {
    let mut best: Option<(usize, usize, usize, usize)> = None;
    for gx in (1..=cx).filter(|g| cx % g == 0 && gamma % g == 0) {
        let gy = gamma / gx;
        if gy == 0 || cy % gy != 0 {
            continue;
        }
        let (a, b) = (cx / gx, cy / gy);
        let key = (a.abs_diff(b), a > b);
        let better = match best {
            None => true,
            Some((_, _, ba, bb)) => key < (ba.abs_diff(bb), ba > bb),
        };
        if better {
            best = Some((gx, gy, a, b));
        }
    }
    best
}

/// Partition `grid` into (about) `gamma_requested` rectangular subdomains.
///
/// A subdomain count is accepted when it divides the cell count
/// `(nx-1)(ny-1)`, the quotient is 1 or composite, and equal rectangles of
/// that many cells tile the cell grid. Otherwise the next smaller count is
/// tried; `1` (the whole grid) is always accepted.
pub fn make_partition(grid: &GridSpec, gamma_requested: usize) -> Result<Partition> {
    if gamma_requested == 0 {
        return Err(Error::param("gamma", "subdomain count must be at least 1"));
    }
    if grid.nx < 2 || grid.ny < 2 {
        return Err(Error::InvalidGrid(format!("{}x{} grid", grid.nx, grid.ny)));
    }
    let (cx, cy) = (grid.nx - 1, grid.ny - 1);
    let cells = cx * cy;

    let mut chosen = (1, 1, cx, cy);
    let mut gamma = gamma_requested.min(cells);
    while gamma > 1 {
        if cells % gamma == 0 {
            let quotient = cells / gamma;
            if quotient == 1 || !is_prime(quotient) {
                if let Some(t) = best_tiling(cx, cy, gamma) {
                    chosen = t;
                    break;
                }
            }
        }
        gamma -= 1;
    }
    if gamma <= 1 {
        gamma = 1;
        chosen = (1, 1, cx, cy);
    }
    let (gx, gy, a, b) = chosen;
    if gamma != gamma_requested {
        log::info!("partition: requested {gamma_requested} subdomains, using {gamma} ({a}x{b} cells)");
    }

    let mut sub_rects = Vec::with_capacity(gamma);
    for s in 0..gy {
        for p in 0..gx {
            let i0 = p * a;
            let i1 = if p + 1 == gx { grid.nx } else { (p + 1) * a };
            let j0 = s * b;
            let j1 = if s + 1 == gy { grid.ny } else { (s + 1) * b };
            sub_rects.push(SubRect { i0, i1, j0, j1 });
        }
    }
    let mut sub_of_point = vec![0u32; grid.points()];
    for (label, r) in sub_rects.iter().enumerate() {
        for j in r.j0..r.j1 {
            for i in r.i0..r.i1 {
                sub_of_point[grid.index(i, j)] = label as u32;
            }
        }
    }

    Ok(Partition {
        grid: *grid,
        gamma_requested,
        gamma_effective: gamma,
        layout: (gx, gy),
        cells_per_sub: (a, b),
        sub_of_point,
        sub_rects,
    })
}

impl Partition {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn gamma_requested(&self) -> usize {
        self.gamma_requested
    }

    pub fn gamma_effective(&self) -> usize {
        self.gamma_effective
    }

    pub fn layout(&self) -> (usize, usize) {
        self.layout
    }

    pub fn cells_per_sub(&self) -> (usize, usize) {
        self.cells_per_sub
    }

    pub fn sub_rects(&self) -> &[SubRect] {
        &self.sub_rects
    }

    #[inline]
    pub fn sub_of_point(&self, p: usize) -> usize {
        self.sub_of_point[p] as usize
    }

    /// Points owned by subdomain `label`, in increasing index order.
    pub fn owned_points(&self, label: usize) -> Vec<usize> {
        let r = self.sub_rects[label];
        let mut out = Vec::with_capacity(r.len());
        for j in r.j0..r.j1 {
            for i in r.i0..r.i1 {
                out.push(self.grid.index(i, j));
            }
        }
        out
    }
}

/// Grid points of the subdomains containing observations at one time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub time_index: usize,
    pub points: Vec<usize>,
    pub complement: Vec<usize>,
    pub hit_subdomains: Vec<usize>,
}

impl ActiveSet {
    /// Every point active; the unlocalized case.
    pub fn full(points: usize, time_index: usize) -> Self {
        Self {
            time_index,
            points: (0..points).collect(),
            complement: Vec::new(),
            hit_subdomains: vec![0],
        }
    }

    pub fn d_k(&self) -> usize {
        self.points.len()
    }

    pub fn is_full(&self) -> bool {
        self.complement.is_empty()
    }

    /// State-vector indices of the active points for a state made of
    /// `fields` stacked fields of `points_per_field` values each.
    pub fn state_indices(&self, fields: usize, points_per_field: usize) -> Vec<usize> {
        expand_fields(&self.points, fields, points_per_field)
    }

    pub fn complement_state_indices(&self, fields: usize, points_per_field: usize) -> Vec<usize> {
        expand_fields(&self.complement, fields, points_per_field)
    }
}

pub(crate) fn expand_fields(points: &[usize], fields: usize, points_per_field: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(points.len() * fields);
    for f in 0..fields {
        out.extend(points.iter().map(|&p| f * points_per_field + p));
    }
    out
}

/// Active set for observations at `obs_locations` (duplicates allowed).
pub fn active_set(partition: &Partition, obs_locations: &[usize], k: usize) -> Result<ActiveSet> {
    let npts = partition.grid.points();
    let mut hit = vec![false; partition.gamma_effective];
    for &loc in obs_locations {
        if loc >= npts {
            return Err(Error::PointOutOfRange { index: loc, points: npts });
        }
        hit[partition.sub_of_point(loc)] = true;
    }
    let hit_subdomains: Vec<usize> = hit.iter().enumerate().filter(|(_, &h)| h).map(|(l, _)| l).collect();
    let mut points = Vec::new();
    let mut complement = Vec::new();
    for p in 0..npts {
        if hit[partition.sub_of_point(p)] {
            points.push(p);
        } else {
            complement.push(p);
        }
    }
    Ok(ActiveSet {
        time_index: k,
        points,
        complement,
        hit_subdomains,
    })
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> (f64, f64) {
    let n = m.nrows();
    let mut asym = 0.0f64;
    let mut scale = 0.0f64;
    for j in 0..n {
        for i in 0..n {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            scale = scale.max(m[(i, j)].abs());
        }
    }
    (asym, scale)
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context: "square matrix",
            expected: m.nrows(),
            actual: m.ncols(),
        });
    }
    let (asym, scale) = max_asymmetry(m);
    let tolerance = rel_tol * scale;
    if asym > tolerance {
        return Err(Error::NotSymmetric { asymmetry: asym, tolerance });
    }
    Ok(())
}

/// `m[idx, idx]`.
pub fn gather_submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

/// Rows and columns of a single-field precision matrix at the active points.
pub fn restrict_precision(q_inv: &DMatrix<f64>, active: &ActiveSet) -> Result<DMatrix<f64>> {
    check_symmetric(q_inv, 1e-10)?;
    if let Some(&bad) = active.points.iter().find(|&&p| p >= q_inv.nrows()) {
        return Err(Error::PointOutOfRange {
            index: bad,
            points: q_inv.nrows(),
        });
    }
    Ok(gather_submatrix(q_inv, &active.points))
}

/// Block-diagonal restriction for a state of `fields` fields that all share
/// the per-field precision block `q_inv`.
pub fn restrict_precision_blockwise(q_inv: &DMatrix<f64>, fields: usize, active: &ActiveSet) -> Result<DMatrix<f64>> {
    let block = restrict_precision(q_inv, active)?;
    let n = block.nrows();
    let mut out = DMatrix::zeros(n * fields, n * fields);
    for f in 0..fields {
        out.view_mut((f * n, f * n), (n, n)).copy_from(&block);
    }
    Ok(out)
}
