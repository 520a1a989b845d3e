//! Rotating shallow-water solver.
//!
//! Cell-centred finite volumes on the grid points: Rusanov fluxes, central
//! bathymetry gradient, beta-plane Coriolis and Heun time stepping. The
//! outermost ring of points is a Dirichlet frame filled from a
//! [`BoundaryProvider`].

use std::fmt;
use std::sync::Arc;

use super::{check_len, Dynamics, StateLayout, SubstepObserver};
use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Frame values `(depth, u, v)` as a function of time.
pub trait BoundaryProvider: Send + Sync + fmt::Debug {
    fn frame_value(&self, t: f64, p: usize) -> [f64; 3];
}

/// Time-independent frame taken from one state.
#[derive(Debug, Clone)]
pub struct FixedBoundary {
    values: Vec<f64>,
    npts: usize,
}

impl FixedBoundary {
    pub fn from_state(grid: &GridSpec, state: &[f64]) -> Result<Self> {
        check_len("boundary state", 3 * grid.points(), state.len())?;
        Ok(Self {
            values: state.to_vec(),
            npts: grid.points(),
        })
    }
}

impl BoundaryProvider for FixedBoundary {
    fn frame_value(&self, _t: f64, p: usize) -> [f64; 3] {
        let n = self.npts;
        [self.values[p], self.values[n + p], self.values[2 * n + p]]
    }
}

/// `base + rate * t`, a linear extrapolation of boundary data in time.
#[derive(Debug, Clone)]
pub struct LinearTrendBoundary {
    base: Vec<f64>,
    rate: Vec<f64>,
    npts: usize,
}

impl LinearTrendBoundary {
    pub fn new(grid: &GridSpec, base: Vec<f64>, rate: Vec<f64>) -> Result<Self> {
        check_len("boundary base", 3 * grid.points(), base.len())?;
        check_len("boundary rate", 3 * grid.points(), rate.len())?;
        Ok(Self {
            base,
            rate,
            npts: grid.points(),
        })
    }

    /// Trend through two snapshots at `t0 < t1`.
    pub fn through(grid: &GridSpec, s0: &[f64], t0: f64, s1: &[f64], t1: f64) -> Result<Self> {
        if !(t1 > t0) {
            return Err(Error::param("t1", "must exceed t0"));
        }
        check_len("boundary snapshot", s0.len(), s1.len())?;
        let rate: Vec<f64> = s0.iter().zip(s1).map(|(a, b)| (b - a) / (t1 - t0)).collect();
        let base: Vec<f64> = s0.iter().zip(&rate).map(|(a, r)| a - r * t0).collect();
        Self::new(grid, base, rate)
    }
}

impl BoundaryProvider for LinearTrendBoundary {
    fn frame_value(&self, t: f64, p: usize) -> [f64; 3] {
        let n = self.npts;
        let at = |k: usize| self.base[k] + self.rate[k] * t;
        [at(p), at(n + p), at(2 * n + p)]
    }
}

/// `f(y) = f0 + beta (y - y_ref)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coriolis {
    pub f0: f64,
    pub beta: f64,
    pub y_ref: f64,
}

impl Coriolis {
    pub const NONE: Coriolis = Coriolis {
        f0: 0.0,
        beta: 0.0,
        y_ref: 0.0,
    };

    pub fn at(&self, y: f64) -> f64 {
        self.f0 + self.beta * (y - self.y_ref)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Volume entering the interior through its outer faces during the step.
    pub mass_inflow: f64,
    /// Courant number of the input state.
    pub courant: f64,
}

#[derive(Debug, Clone)]
pub struct SweModel {
    grid: GridSpec,
    bathymetry: Vec<f64>,
    g: f64,
    coriolis: Coriolis,
    boundary: Arc<dyn BoundaryProvider>,
    substeps: usize,
}

#[derive(Clone)]
struct Cons {
    h: Vec<f64>,
    hu: Vec<f64>,
    hv: Vec<f64>,
}

impl Cons {
    fn zeros(n: usize) -> Self {
        Self {
            h: vec![0.0; n],
            hu: vec![0.0; n],
            hv: vec![0.0; n],
        }
    }
}

impl SweModel {
    pub fn new(
        grid: GridSpec,
        bathymetry: Vec<f64>,
        g: f64,
        coriolis: Coriolis,
        boundary: Arc<dyn BoundaryProvider>,
        substeps: usize,
    ) -> Result<Self> {
        check_len("bathymetry", grid.points(), bathymetry.len())?;
        if !(g > 0.0) {
            return Err(Error::param("g", format!("must be positive, got {g}")));
        }
        if substeps == 0 {
            return Err(Error::param("substeps", "need at least one substep"));
        }
        Ok(Self {
            grid,
            bathymetry,
            g,
            coriolis,
            boundary,
            substeps,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn bathymetry(&self) -> &[f64] {
        &self.bathymetry
    }

    pub fn gravity(&self) -> f64 {
        self.g
    }

    /// `zeta = eta - H`.
    pub fn surface_elevation(&self, state: &[f64]) -> Vec<f64> {
        state[..self.grid.points()]
            .iter()
            .zip(&self.bathymetry)
            .map(|(e, h)| e - h)
            .collect()
    }

    /// `sum(eta) dx dy` over cells not on the frame.
    pub fn interior_volume(&self, state: &[f64]) -> f64 {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut v = 0.0;
        for j in 1..ny.saturating_sub(1) {
            for i in 1..nx.saturating_sub(1) {
                v += state[i + j * nx];
            }
        }
        v * self.grid.dx * self.grid.dy
    }

    pub fn courant(&self, state: &[f64], dt: f64) -> f64 {
        let n = self.grid.points();
        let mut smax: f64 = 0.0;
        for p in 0..n {
            let c = (self.g * state[p]).sqrt();
            smax = smax.max(state[n + p].abs() + c).max(state[2 * n + p].abs() + c);
        }
        dt * smax / self.grid.dx.min(self.grid.dy)
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        let n = self.grid.points();
        for p in 0..n {
            let h = state[p];
            if !(h > 0.0) {
                let (i, j) = self.grid.ij(p);
                return Err(Error::DryState { i, j, depth: h });
            }
            if !state[n + p].is_finite() || !state[2 * n + p].is_finite() {
                let (i, j) = self.grid.ij(p);
                return Err(Error::NonFinite(format!("velocity at (i={i}, j={j})")));
            }
        }
        Ok(())
    }

    fn check_cons(&self, c: &Cons) -> Result<()> {
        for (p, &h) in c.h.iter().enumerate() {
            if !(h > 0.0) {
                let (i, j) = self.grid.ij(p);
                return Err(Error::DryState { i, j, depth: h });
            }
        }
        Ok(())
    }

    fn apply_frame(&self, t: f64, c: &mut Cons) {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut set = |p: usize| {
            let [h, u, v] = self.boundary.frame_value(t, p);
            c.h[p] = h;
            c.hu[p] = h * u;
            c.hv[p] = h * v;
        };
        for i in 0..nx {
            set(i);
            set(i + (ny - 1) * nx);
        }
        for j in 1..ny - 1 {
            set(j * nx);
            set(nx - 1 + j * nx);
        }
    }

    /// Spatial operator on interior cells; returns the inflow rate of volume.
    fn rhs(&self, c: &Cons, out: &mut Cons) -> f64 {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let (dx, dy, g) = (self.grid.dx, self.grid.dy, self.g);
        for v in [&mut out.h, &mut out.hu, &mut out.hv] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        if nx < 3 || ny < 3 {
            return 0.0;
        }

        // x-faces: face m sits between cells m and m + 1.
        let nfx = nx - 1;
        let mut fx = vec![[0.0f64; 3]; nfx * ny];
        for j in 1..ny - 1 {
            for m in 0..nfx {
                let (l, r) = (m + j * nx, m + 1 + j * nx);
                fx[m + j * nfx] = rusanov_x(g, [c.h[l], c.hu[l], c.hv[l]], [c.h[r], c.hu[r], c.hv[r]]);
            }
        }
        let mut gy = vec![[0.0f64; 3]; nx * (ny - 1)];
        for m in 0..ny - 1 {
            for i in 1..nx - 1 {
                let (b, t) = (i + m * nx, i + (m + 1) * nx);
                gy[i + m * nx] = rusanov_y(g, [c.h[b], c.hu[b], c.hv[b]], [c.h[t], c.hu[t], c.hv[t]]);
            }
        }

        let hb = &self.bathymetry;
        for j in 1..ny - 1 {
            let f = self.coriolis.at(self.grid.y(j));
            for i in 1..nx - 1 {
                let p = i + j * nx;
                let (w, e) = (fx[i - 1 + j * nfx], fx[i + j * nfx]);
                let (s, n) = (gy[i + (j - 1) * nx], gy[i + j * nx]);
                let h = c.h[p];
                let dhdx = (hb[p + 1] - hb[p - 1]) / (2.0 * dx);
                let dhdy = (hb[p + nx] - hb[p - nx]) / (2.0 * dy);
                out.h[p] = -(e[0] - w[0]) / dx - (n[0] - s[0]) / dy;
                out.hu[p] = -(e[1] - w[1]) / dx - (n[1] - s[1]) / dy + g * h * dhdx + f * c.hv[p];
                out.hv[p] = -(e[2] - w[2]) / dx - (n[2] - s[2]) / dy + g * h * dhdy - f * c.hu[p];
            }
        }

        let mut inflow = 0.0;
        for j in 1..ny - 1 {
            inflow += (fx[j * nfx][0] - fx[nfx - 1 + j * nfx][0]) * dy;
        }
        for i in 1..nx - 1 {
            inflow += (gy[i][0] - gy[i + (ny - 2) * nx][0]) * dx;
        }
        inflow
    }

    /// One Heun step from `t` to `t + dt`.
    pub fn swe_step(&self, state: &[f64], t: f64, dt: f64) -> Result<(Vec<f64>, StepReport)> {
        let n = self.grid.points();
        check_len("shallow-water state", 3 * n, state.len())?;
        if !(dt > 0.0) {
            return Err(Error::param("dt", format!("must be positive, got {dt}")));
        }
        self.check_state(state)?;
        let courant = self.courant(state, dt);
        if courant > 1.0 {
            return Err(Error::CflViolation { courant });
        }

        let u0 = Cons {
            h: state[..n].to_vec(),
            hu: (0..n).map(|p| state[p] * state[n + p]).collect(),
            hv: (0..n).map(|p| state[p] * state[2 * n + p]).collect(),
        };
        let mut l = Cons::zeros(n);

        let in0 = self.rhs(&u0, &mut l);
        let mut u1 = u0.clone();
        axpy_interior(&self.grid, dt, &l, &mut u1);
        self.apply_frame(t + dt, &mut u1);
        self.check_cons(&u1)?;

        let in1 = self.rhs(&u1, &mut l);
        let mut u2 = u1;
        axpy_interior(&self.grid, dt, &l, &mut u2);
        for (a, b) in [(&u0.h, &mut u2.h), (&u0.hu, &mut u2.hu), (&u0.hv, &mut u2.hv)] {
            for (x, y) in a.iter().zip(b.iter_mut()) {
                *y = 0.5 * (x + *y);
            }
        }
        self.apply_frame(t + dt, &mut u2);
        self.check_cons(&u2)?;

        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            let h = u2.h[p];
            out[p] = h;
            out[n + p] = u2.hu[p] / h;
            out[2 * n + p] = u2.hv[p] / h;
        }
        Ok((
            out,
            StepReport {
                mass_inflow: 0.5 * dt * (in0 + in1),
                courant,
            },
        ))
    }
}

fn axpy_interior(grid: &GridSpec, dt: f64, l: &Cons, u: &mut Cons) {
    let (nx, ny) = (grid.nx, grid.ny);
    for j in 1..ny.saturating_sub(1) {
        for i in 1..nx.saturating_sub(1) {
            let p = i + j * nx;
            u.h[p] += dt * l.h[p];
            u.hu[p] += dt * l.hu[p];
            u.hv[p] += dt * l.hv[p];
        }
    }
}

#[inline]
fn flux_x(g: f64, [h, hu, hv]: [f64; 3]) -> [f64; 3] {
    let u = hu / h;
    [hu, hu * u + 0.5 * g * h * h, hv * u]
}

#[inline]
fn flux_y(g: f64, [h, hu, hv]: [f64; 3]) -> [f64; 3] {
    let v = hv / h;
    [hv, hu * v, hv * v + 0.5 * g * h * h]
}

#[inline]
fn rusanov_x(g: f64, l: [f64; 3], r: [f64; 3]) -> [f64; 3] {
    let s = ((l[1] / l[0]).abs() + (g * l[0]).sqrt()).max((r[1] / r[0]).abs() + (g * r[0]).sqrt());
    let (fl, fr) = (flux_x(g, l), flux_x(g, r));
    std::array::from_fn(|k| 0.5 * (fl[k] + fr[k]) - 0.5 * s * (r[k] - l[k]))
}

#[inline]
fn rusanov_y(g: f64, b: [f64; 3], t: [f64; 3]) -> [f64; 3] {
    let s = ((b[2] / b[0]).abs() + (g * b[0]).sqrt()).max((t[2] / t[0]).abs() + (g * t[0]).sqrt());
    let (fb, ft) = (flux_y(g, b), flux_y(g, t));
    std::array::from_fn(|k| 0.5 * (fb[k] + ft[k]) - 0.5 * s * (t[k] - b[k]))
}

impl Dynamics for SweModel {
    fn layout(&self) -> StateLayout {
        StateLayout {
            grid: self.grid,
            fields: 3,
        }
    }

    fn substeps(&self) -> usize {
        self.substeps
    }

    fn propagate_into(
        &self,
        z: &[f64],
        t_prev: f64,
        t_next: f64,
        out: &mut [f64],
        mut observer: Option<&mut SubstepObserver<'_>>,
    ) -> Result<()> {
        check_len("shallow-water propagate output", z.len(), out.len())?;
        if !(t_next > t_prev) {
            return Err(Error::param("t_next", format!("must exceed t_prev = {t_prev}")));
        }
        let tau = (t_next - t_prev) / self.substeps as f64;
        let mut cur = z.to_vec();
        for l in 0..self.substeps {
            let t = t_prev + l as f64 * tau;
            if let Some(obs) = observer.as_deref_mut() {
                obs(l, t, &cur)?;
            }
            cur = self.swe_step(&cur, t, tau)?.0;
        }
        out.copy_from_slice(&cur);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rest_state(grid: &GridSpec, depth: f64) -> Vec<f64> {
        let n = grid.points();
        let mut s = vec![0.0; 3 * n];
        s[..n].iter_mut().for_each(|h| *h = depth);
        s
    }

    fn model(grid: GridSpec, init: &[f64], bathy: f64, cor: Coriolis, l: usize) -> SweModel {
        let b = Arc::new(FixedBoundary::from_state(&grid, init).unwrap());
        SweModel::new(grid, vec![bathy; grid.points()], 9.81, cor, b, l).unwrap()
    }

    #[test]
    fn lake_at_rest_is_steady() {
        let grid = GridSpec::new(12, 10, 1000.0, 1200.0).unwrap();
        let s0 = rest_state(&grid, 50.0);
        let cor = Coriolis {
            f0: 1e-4,
            beta: 2e-11,
            y_ref: 0.0,
        };
        let m = model(grid, &s0, 50.0, cor, 1);
        let mut s = s0.clone();
        for k in 0..1000 {
            s = m.swe_step(&s, k as f64 * 10.0, 10.0).unwrap().0;
        }
        let drift = s.iter().zip(&s0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift <= 1e-12, "drift {drift}");
    }

    #[test]
    fn dry_and_cfl_errors() {
        let grid = GridSpec::new(6, 6, 100.0, 100.0).unwrap();
        let s0 = rest_state(&grid, 10.0);
        let m = model(grid, &s0, 10.0, Coriolis::NONE, 1);
        let mut dry = s0.clone();
        dry[grid.index(2, 3)] = 0.0;
        match m.swe_step(&dry, 0.0, 1.0) {
            Err(Error::DryState { i: 2, j: 3, .. }) => {}
            other => panic!("expected dry state, got {other:?}"),
        }
        // c = sqrt(98.1) ~ 9.9 m/s, so dt = 20 s gives Courant ~ 2
        match m.swe_step(&s0, 0.0, 20.0) {
            Err(Error::CflViolation { courant }) => assert!(courant > 1.9 && courant < 2.0),
            other => panic!("expected CFL violation, got {other:?}"),
        }
    }

    #[test]
    fn propagate_composes_steps() {
        let grid = GridSpec::new(9, 8, 500.0, 500.0).unwrap();
        let mut s0 = rest_state(&grid, 20.0);
        s0[grid.index(4, 4)] = 20.5;
        let m2 = model(grid, &rest_state(&grid, 20.0), 20.0, Coriolis::NONE, 2);
        let mut out = vec![0.0; s0.len()];
        m2.propagate_into(&s0, 0.0, 2.0 * 5.0, &mut out, None).unwrap();
        let a = m2.swe_step(&s0, 0.0, 5.0).unwrap().0;
        let b = m2.swe_step(&a, 5.0, 5.0).unwrap().0;
        assert_eq!(out, b);

        let mut seen = Vec::new();
        let mut obs = |l: usize, t: f64, _: &[f64]| {
            seen.push((l, t));
            Ok(())
        };
        m2.propagate_into(&s0, 0.0, 10.0, &mut out, Some(&mut obs)).unwrap();
        assert_eq!(seen, vec![(0, 0.0), (1, 5.0)]);
    }

    #[test]
    fn trend_boundary_extrapolates() {
        let grid = GridSpec::new(3, 3, 1.0, 1.0).unwrap();
        let s0 = vec![1.0; 27];
        let s1 = vec![2.0; 27];
        let b = LinearTrendBoundary::through(&grid, &s0, 10.0, &s1, 20.0).unwrap();
        assert_eq!(b.frame_value(30.0, 0), [3.0, 3.0, 3.0]);
        assert_eq!(b.frame_value(10.0, 4), [1.0, 1.0, 1.0]);
    }
}
