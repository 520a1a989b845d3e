//! Random-walk Metropolis on the joint `(z, j)` target.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{ChainConfig, IndexWalk};
use crate::error::{Error, Result};
use crate::noise::RestrictedCovariance;

/// `log pi(z, j) = log g(z, y) + log f(centers[:, j], z)` up to a constant,
/// on whatever coordinates `noise` covers.
pub struct MixtureTarget<'a> {
    /// One mixture centre per column (the deterministic forecasts).
    pub centers: &'a DMatrix<f64>,
    pub noise: &'a RestrictedCovariance<'a>,
    /// Positions of the observed values inside the chain vector.
    pub obs_pos: &'a [usize],
    pub y: &'a [f64],
    pub sigma_y: f64,
}

/// Reusable buffers for density evaluations.
#[derive(Debug, Default)]
pub struct Scratch {
    diff: Vec<f64>,
    tmp: DVector<f64>,
}

impl<'a> MixtureTarget<'a> {
    pub fn dim(&self) -> usize {
        self.noise.dim()
    }

    pub fn bank_size(&self) -> usize {
        self.centers.ncols()
    }

    pub fn log_density(&self, z: &[f64], j: usize, scratch: &mut Scratch) -> f64 {
        let d = z.len();
        let c = &self.centers.as_slice()[j * d..(j + 1) * d];
        scratch.diff.resize(d, 0.0);
        for ((o, a), b) in scratch.diff.iter_mut().zip(z).zip(c) {
            *o = a - b;
        }
        let lf = self.noise.log_density(&scratch.diff, &mut scratch.tmp);
        let mut ss = 0.0;
        for (&p, &y) in self.obs_pos.iter().zip(self.y) {
            let r = y - z[p];
            ss += r * r;
        }
        lf - 0.5 * ss / (self.sigma_y * self.sigma_y)
    }
}

/// Probability that the index walk moves from `a` to `b` in a bank of `n`.
fn index_move_prob(a: usize, b: usize, n: usize, q: f64) -> f64 {
    if n == 1 {
        return if a == b { 1.0 } else { 0.0 };
    }
    if a == 0 {
        return if b == 1 { 1.0 } else { 0.0 };
    }
    if a == n - 1 {
        return if b + 1 == a { 1.0 } else { 0.0 };
    }
    if b + 1 == a || b == a + 1 {
        q
    } else if b == a {
        1.0 - 2.0 * q
    } else {
        0.0
    }
}

/// Proposed index and the log correction added to the acceptance ratio.
pub fn propose_index(j: usize, n: usize, q: f64, u: f64, walk: IndexWalk) -> (usize, f64) {
    let boundary = j == 0 || j + 1 == n;
    let jp = if j == 0 {
        1
    } else if j + 1 == n {
        j - 1
    } else if u < q {
        j - 1
    } else if u < 1.0 - q {
        j
    } else {
        j + 1
    };
    let log_factor = match walk {
        IndexWalk::AsPrinted => {
            if boundary {
                q.ln()
            } else {
                0.0
            }
        }
        IndexWalk::Reversible => (index_move_prob(jp, j, n, q) / index_move_prob(j, jp, n, q)).ln(),
    };
    (jp, log_factor)
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Retained states, one per column.
    pub samples: DMatrix<f64>,
    /// Auxiliary index of each retained state.
    pub indices: Vec<usize>,
    pub accepted: usize,
    pub iterations: usize,
}

impl ChainOutput {
    pub fn acceptance_rate(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.accepted as f64 / self.iterations as f64
        }
    }
}

/// Run `N + N_burn` iterations from `(init, j0)` with state proposals
/// `c * N(0, Q~)`; keep the last `N` states.
pub fn rwm_joint_kernel<R: Rng + ?Sized>(
    target: &MixtureTarget<'_>,
    cfg: &ChainConfig,
    init: &[f64],
    j0: usize,
    rng: &mut R,
) -> Result<ChainOutput> {
    let d = target.dim();
    let n_bank = target.bank_size();
    if init.len() != d {
        return Err(Error::DimensionMismatch {
            context: "chain initial state",
            expected: d,
            actual: init.len(),
        });
    }
    if j0 >= n_bank {
        return Err(Error::param("j0", format!("index {j0} outside bank of {n_bank}")));
    }
    let c = cfg.effective_scale(d);
    let mut scratch = Scratch::default();
    let mut z = init.to_vec();
    let mut j = j0;
    let mut lp = target.log_density(&z, j, &mut scratch);
    if !lp.is_finite() {
        return Err(Error::NonFinite(format!("target at chain start is {lp}")));
    }

    let total = cfg.n + cfg.n_burn;
    let mut samples = DMatrix::zeros(d, cfg.n);
    let mut indices = Vec::with_capacity(cfg.n);
    let mut step = vec![0.0; d];
    let mut zp = vec![0.0; d];
    let mut accepted = 0usize;

    for it in 0..total {
        target.noise.propose_into(rng, c, &mut step, &mut scratch.tmp);
        for ((o, a), b) in zp.iter_mut().zip(&z).zip(&step) {
            *o = a + b;
        }
        let (jp, log_factor) = if n_bank > 1 {
            let u: f64 = rng.random();
            propose_index(j, n_bank, cfg.q, u, cfg.index_walk)
        } else {
            (j, 0.0)
        };
        let lp_new = target.log_density(&zp, jp, &mut scratch);
        let lr = lp_new - lp + log_factor;
        let u: f64 = rng.random();
        // NaN compares false in both branches and is rejected
        if lr >= 0.0 || u.ln() < lr {
            std::mem::swap(&mut z, &mut zp);
            j = jp;
            lp = lp_new;
            accepted += 1;
        }
        if it >= cfg.n_burn {
            samples.column_mut(it - cfg.n_burn).copy_from_slice(&z);
            indices.push(j);
        }
    }
    if accepted == 0 && total > 0 {
        log::warn!("chain accepted no moves in {total} iterations (dimension {d})");
    }
    Ok(ChainOutput {
        samples,
        indices,
        accepted,
        iterations: total,
    })
}
