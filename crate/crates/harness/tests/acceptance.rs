//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! Runs with `cargo test -p lsmcmc-harness --test acceptance`. The first
//! criterion is the long one, a few minutes on one core.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use lsmcmc_core::dynamics::{Coriolis, Dynamics, FixedBoundary, LinearModel, StateLayout, SweModel};
use lsmcmc_core::gaussian::{
    enkf_analysis, enkf_step, gaspari_cohn, kf_step, lenkf_analysis, Ensemble, EnkfBranch, KalmanState,
    LocalizationConfig,
};
use lsmcmc_core::grid::{active_set, make_partition, GridSpec, Partition};
use lsmcmc_core::noise::FourierSineCovariance;
use lsmcmc_core::observations::{
    advect_drifters, nearest_point, swath_locations, synthesize_observations, DrifterSet, ObservationBatch,
    SwathConfig,
};
use lsmcmc_core::rng::Streams;
use lsmcmc_core::smcmc::{lsmcmc_step, smcmc_step, ChainConfig, SampleBank};
use lsmcmc_harness::config::FilterConfig;
use lsmcmc_harness::convergence::convergence_study;
use lsmcmc_harness::experiment::{build_problem, run_filter};
use lsmcmc_harness::ExperimentConfig;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn config(name: &str) -> ExperimentConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&p).unwrap()
}

fn seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.experiment.replicas).map(|m| cfg.seed(m)).collect()
}

/// Per-step LSMCMC time from criterion 1, reused by criterion 10.
struct Timing {
    lsmcmc_step_ms: f64,
}

fn c1_kf_accuracy(timing: &mut Option<Timing>) -> Outcome {
    let cfg = config("linear_swath.toml");
    let problem = build_problem(&cfg).unwrap();
    let lsmcmc = cfg.filters.iter().find(|f| matches!(f, FilterConfig::Lsmcmc(_))).unwrap();
    let run = run_filter(&problem, lsmcmc, &seeds(&cfg), cfg.threshold(), None).unwrap();
    *timing = Some(Timing {
        lsmcmc_step_ms: run.step_time_ms(),
    });
    let acc: Vec<f64> = run.replicas.iter().flat_map(|r| r.steps.iter().filter_map(|s| s.acceptance_rate)).collect();
    let mean_acc = acc.iter().sum::<f64>() / acc.len() as f64;
    outcome(
        run.pct_below_threshold >= 97.0,
        format!(
            "{:.3}% within {} of the Kalman mean (need >= 97%), mean acceptance {mean_acc:.3}, {:.0} s",
            run.pct_below_threshold,
            cfg.threshold(),
            run.wall_s
        ),
    )
}

fn small_linear(steps: usize, seed: u64) -> (LinearModel, Vec<ObservationBatch>) {
    let grid = GridSpec::unit(8, 7).unwrap();
    let model = LinearModel::new(grid, 0.25, 0.05).unwrap();
    let noise = model.noise();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = DVector::zeros(grid.points());
    let mut truth = Vec::new();
    for _ in 0..steps {
        z = &z * model.a_scale + noise.sample(&mut rng);
        truth.push(z.clone());
    }
    let swath = SwathConfig {
        width: 2,
        stride: 2,
        ..SwathConfig::default()
    };
    let locs: Vec<Vec<usize>> = (1..=steps).map(|k| swath_locations(&swath, &grid, k)).collect();
    let batches = synthesize_observations(&truth, &locs, &[0], grid.points(), 0.05, &Streams::new(seed + 1)).unwrap();
    (model, batches)
}

fn c2_degeneracies() -> Outcome {
    let (model, batches) = small_linear(8, 3);
    let cov = model.noise();
    let layout = model.layout();
    let grid = model.grid;
    let one = make_partition(&grid, 1).unwrap();
    let cfg = ChainConfig {
        n: 400,
        n_burn: 200,
        ..Default::default()
    };
    let streams = Streams::new(17);
    let z0 = DVector::from_element(grid.points(), 0.02);
    let (mut plain, mut local) = (SampleBank::initial(&z0), SampleBank::initial(&z0));
    let mut identical = true;
    for (t, b) in batches.iter().enumerate() {
        plain.forecast(&model, t as f64, t as f64 + 1.0).unwrap();
        local.forecast(&model, t as f64, t as f64 + 1.0).unwrap();
        let a = smcmc_step(&plain, b, &cov, &layout, &cfg, &streams).unwrap();
        let l = lsmcmc_step(&local, b, &cov, &layout, &one, &cfg, &streams).unwrap();
        identical &= a.samples == l.samples;
        plain = a.into_bank();
        local = l.into_bank();
    }

    let loc = LocalizationConfig::new(one, 1e6, 1e-10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for b in &batches {
        let f = Ensemble::new(DMatrix::from_fn(grid.points(), 12, |_, _| rng.random_range(-0.2..0.2))).unwrap();
        let e = enkf_analysis(&f, b, &layout, &streams, EnkfBranch::Auto).unwrap();
        let l = lenkf_analysis(&f, b, &loc, &layout, &streams, EnkfBranch::Auto).unwrap();
        worst = worst.max((&e.members - &l.members).amax() / e.members.amax());
    }
    outcome(
        identical && worst <= 1e-8,
        format!("single-subdomain chain identical: {identical}; LEnKF vs EnKF relative gap {worst:.2e} (need <= 1e-8)"),
    )
}

fn c3_gaspari_cohn() -> Outcome {
    let s0 = gaspari_cohn(0.0).unwrap();
    let s2 = gaspari_cohn(2.0).unwrap().abs();
    let gap = (gaspari_cohn(1.0 - 1e-15).unwrap() - gaspari_cohn(1.0).unwrap()).abs();
    let mut monotone = true;
    let mut prev = f64::INFINITY;
    for s in 0..=10_000 {
        let v = gaspari_cohn(2.0 * s as f64 / 10_000.0).unwrap();
        monotone &= v <= prev;
        prev = v;
    }
    outcome(
        s0 == 1.0 && s2 <= 1e-14 && gap <= 1e-14 && monotone,
        format!("S(0) = {s0}, |S(2)| = {s2:.1e}, gap at 1 = {gap:.1e}, monotone on 10^4 points: {monotone}"),
    )
}

/// Mode-by-mode sum for the covariance of the sine-basis noise.
fn sine_covariance(nx: usize, ny: usize, modes: usize, sigma: f64) -> DMatrix<f64> {
    let pi = std::f64::consts::PI;
    let n = nx * ny;
    let phi = |t: f64, m: usize| (pi * m as f64 * t).sin();
    DMatrix::from_fn(n, n, |p, r| {
        let (xp, yp) = ((p % nx) as f64 / (nx - 1) as f64, (p / nx) as f64 / (ny - 1) as f64);
        let (xr, yr) = ((r % nx) as f64 / (nx - 1) as f64, (r / nx) as f64 / (ny - 1) as f64);
        let mut s = 0.0;
        for my in 0..modes {
            for mx in 0..modes {
                let var = sigma * sigma / (mx.max(my) + 1) as f64;
                s += var * phi(yp, my) * phi(xp, mx) * phi(yr, my) * phi(xr, mx);
            }
        }
        s
    })
}

fn c4_noise_covariance() -> Outcome {
    let (nx, ny, modes, sigma) = (9, 9, 3, 0.05);
    let g = GridSpec::unit(nx, ny).unwrap();
    let op = FourierSineCovariance::new(&g, modes, sigma, 1).unwrap();
    let assembled = op.block().clone();
    let oracle = sine_covariance(nx, ny, modes, sigma);
    let assembly_gap = (&assembled - &oracle).amax() / oracle.amax();
    let draws = 100_000;
    let n = nx * ny;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut x = DMatrix::zeros(n, draws);
    for c in 0..draws {
        x.column_mut(c).copy_from(&op.sample_field_noise(&mut rng).w);
    }
    let cov = (&x * x.transpose()) / draws as f64;
    let mut within = 0;
    for p in 0..n {
        for r in 0..n {
            let q = &assembled;
            let se = ((q[(p, p)] * q[(r, r)] + q[(p, r)].powi(2)) / draws as f64).sqrt();
            if (cov[(p, r)] - q[(p, r)]).abs() <= 5.0 * se + 1e-15 * sigma * sigma {
                within += 1;
            }
        }
    }
    let frac = within as f64 / (n * n) as f64;
    outcome(
        frac >= 0.995 && assembly_gap <= 1e-12,
        format!(
            "{:.2}% of entries within 5 SE (need >= 99.5%), assembly vs mode sum {assembly_gap:.1e}",
            100.0 * frac
        ),
    )
}

fn rate_slope(q: f64) -> (f64, Vec<(usize, f64)>) {
    let mut cfg = config("convergence_d1.toml");
    for f in &mut cfg.filters {
        if let FilterConfig::Smcmc(c) = f {
            c.q = q;
        }
    }
    let table = convergence_study(&cfg, &[250, 1000, 4000, 16000]).unwrap();
    (table.slope, table.rows.iter().map(|r| (r.n, r.rmse)).collect())
}

fn c5_monte_carlo_rate() -> Outcome {
    let started = Instant::now();
    let (slope, rows) = rate_slope(0.5);
    let secs = started.elapsed().as_secs_f64();
    let (narrow, _) = rate_slope(0.2);
    let listed: Vec<String> = rows.iter().map(|(n, e)| format!("{n}:{e:.2e}")).collect();
    outcome(
        (-0.65..=-0.35).contains(&slope),
        format!(
            "slope {slope:.3} (need [-0.65, -0.35]) with q = 0.5, rmse {}, {secs:.0} s; with q = 0.2 the slope is {narrow:.3}",
            listed.join(" ")
        ),
    )
}

fn swe_state(grid: &GridSpec, h: impl Fn(usize, usize) -> f64, u: f64, v: f64) -> Vec<f64> {
    let n = grid.points();
    let mut s = vec![0.0; 3 * n];
    for p in 0..n {
        let (i, j) = grid.ij(p);
        s[p] = h(i, j);
        s[n + p] = u;
        s[2 * n + p] = v;
    }
    s
}

fn swe_model(grid: GridSpec, frame: &[f64], depth: f64, cor: Coriolis, substeps: usize) -> SweModel {
    let b = Arc::new(FixedBoundary::from_state(&grid, frame).unwrap());
    SweModel::new(grid, vec![depth; grid.points()], 9.81, cor, b, substeps).unwrap()
}

fn c6_shallow_water() -> Outcome {
    let grid = GridSpec::new(15, 11, 2000.0, 1500.0).unwrap();
    let rest = swe_state(&grid, |_, _| 80.0, 0.0, 0.0);
    let cor = Coriolis {
        f0: 7e-5,
        beta: 1.6e-11,
        y_ref: 7500.0,
    };
    let m = swe_model(grid, &rest, 80.0, cor, 1);
    let mut s = rest.clone();
    for k in 0..1000 {
        s = m.swe_step(&s, k as f64 * 20.0, 20.0).unwrap().0;
    }
    let drift = s.iter().zip(&rest).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let grid = GridSpec::new(24, 20, 500.0, 500.0).unwrap();
    let frame = swe_state(&grid, |_, _| 10.0, 0.3, -0.1);
    let m = swe_model(grid, &frame, 10.0, Coriolis::NONE, 1);
    let mut s = m.swe_step(&swe_state(&grid, |i, _| if i < 12 { 12.0 } else { 10.0 }, 0.0, 0.0), 0.0, 10.0).unwrap().0;
    let scale = m.interior_volume(&s);
    let mut budget: f64 = 0.0;
    for k in 1..=100 {
        let before = m.interior_volume(&s);
        let (next, report) = m.swe_step(&s, k as f64 * 10.0, 10.0).unwrap();
        budget = budget.max((m.interior_volume(&next) - before - report.mass_inflow).abs() / scale);
        s = next;
    }

    let grid = GridSpec::new(21, 21, 1000.0, 1000.0).unwrap();
    let rest = swe_state(&grid, |_, _| 50.0, 0.0, 0.0);
    let bump = DVector::from_vec(swe_state(
        &grid,
        |i, j| 50.0 + 0.5 * (-((i as f64 - 10.0).powi(2) + (j as f64 - 10.0).powi(2)) / 8.0).exp(),
        0.0,
        0.0,
    ));
    let cor = Coriolis {
        f0: 1e-4,
        beta: 0.0,
        y_ref: 0.0,
    };
    let run = |l: usize| swe_model(grid, &rest, 50.0, cor, l).propagate(&bump, 0.0, 400.0).unwrap();
    let (a, b, c) = (run(10), run(20), run(40));
    let order = ((&a - &b).amax() / (&b - &c).amax()).log2();
    outcome(
        drift <= 1e-12 && budget <= 1e-10 && order >= 1.0,
        format!("lake at rest drift {drift:.1e}, mass budget gap {budget:.1e} relative, observed order {order:.2}"),
    )
}

/// Owner subdomain of `(i, j)` from the tile sizes.
fn owner(p: &Partition, i: usize, j: usize) -> usize {
    let (gx, gy) = p.layout();
    let (a, b) = p.cells_per_sub();
    (i / a).min(gx - 1) + gx * (j / b).min(gy - 1)
}

fn c7_partition() -> Outcome {
    let grid = GridSpec::unit(10, 10).unwrap();
    let part = make_partition(&grid, 9).unwrap();
    let locs = [grid.index(1, 1), grid.index(0, 4), grid.index(4, 4), grid.index(5, 7), grid.index(8, 8)];
    let fig = active_set(&part, &locs, 0).unwrap();
    let fig_ok = fig.d_k() == 55 && fig.hit_subdomains == vec![0, 3, 4, 7, 8];

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut matched = 0;
    for _ in 0..100 {
        let (nx, ny) = (rng.random_range(3..20), rng.random_range(3..20));
        let g = GridSpec::unit(nx, ny).unwrap();
        let p = make_partition(&g, rng.random_range(1..=(nx - 1) * (ny - 1))).unwrap();
        let locs: Vec<usize> = (0..rng.random_range(1..10)).map(|_| rng.random_range(0..g.points())).collect();
        let hit: Vec<usize> = locs.iter().map(|&l| owner(&p, l % nx, l / nx)).collect();
        let expected: Vec<usize> = (0..g.points()).filter(|&q| hit.contains(&owner(&p, q % nx, q / nx))).collect();
        if active_set(&p, &locs, 0).unwrap().points == expected {
            matched += 1;
        }
    }
    outcome(
        fig_ok && matched == 100,
        format!(
            "10x10 with 9 subdomains: {} active points, hits {:?}; {matched}/100 random instances match the oracle",
            fig.d_k(),
            fig.hit_subdomains
        ),
    )
}

fn c8_enkf_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let grid = GridSpec::unit(rng.random_range(2..6), rng.random_range(2..6)).unwrap();
        let layout = StateLayout { grid, fields: 1 };
        let d = grid.points();
        let f = Ensemble::new(DMatrix::from_fn(d, rng.random_range(2..12), |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let mut locs: Vec<usize> = (0..rng.random_range(1..30)).map(|_| rng.random_range(0..d)).collect();
        locs.sort_unstable();
        locs.dedup();
        let y = DVector::from_fn(locs.len(), |_, _| rng.random_range(-1.0..1.0));
        let b = ObservationBatch::new(1, locs, vec![0], y, rng.random_range(0.05..2.0)).unwrap();
        let streams = Streams::new(case);
        let direct = enkf_analysis(&f, &b, &layout, &streams, EnkfBranch::Direct).unwrap();
        let smw = enkf_analysis(&f, &b, &layout, &streams, EnkfBranch::Woodbury).unwrap();
        worst = worst.max((&direct.members - &smw.members).amax() / direct.members.amax());
    }

    let grid = GridSpec::unit(8, 8).unwrap();
    let model = LinearModel::new(grid, 0.25, 0.05).unwrap();
    let noise = model.noise();
    let q = noise.to_dense();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z0 = DVector::from_fn(64, |_, _| rng.random_range(-0.15..0.15));
    let mut z = z0.clone();
    let mut truth = Vec::new();
    for _ in 0..50 {
        z = &z * model.a_scale + noise.sample(&mut rng);
        truth.push(z.clone());
    }
    let swath = SwathConfig {
        width: 3,
        stride: 3,
        ..SwathConfig::default()
    };
    let locs: Vec<Vec<usize>> = (1..=50).map(|k| swath_locations(&swath, &grid, k)).collect();
    let batches = synthesize_observations(&truth, &locs, &[0], 64, 0.05, &Streams::new(22)).unwrap();
    let streams = Streams::new(3);
    let mut kf = KalmanState::exact(z0.clone());
    let mut ens = Ensemble::replicate(&z0, 5000).unwrap();
    let (mut below, mut total) = (0, 0);
    for (t, b) in batches.iter().enumerate() {
        kf = kf_step(&model, &q, &kf, b).unwrap();
        ens = enkf_step(&model, &noise, &ens, b, t as f64, t as f64 + 1.0, &streams, EnkfBranch::Auto).unwrap();
        let m = ens.mean();
        below += m.iter().zip(kf.mean.iter()).filter(|(a, b)| (*a - *b).abs() < 0.025).count();
        total += m.len();
    }
    let pct = 100.0 * below as f64 / total as f64;
    outcome(
        worst <= 1e-8 && pct >= 99.0,
        format!("Woodbury vs direct worst relative gap {worst:.1e} over 50 cases; N = 5000 EnKF {pct:.2}% (need >= 99%)"),
    )
}

fn c9_drifters() -> Outcome {
    let g = GridSpec::new(21, 21, 100.0, 100.0).unwrap();
    let flow = |u: f64, v: f64, samples: usize, substeps: usize| {
        let n = g.points();
        let mut z = vec![100.0; n];
        z.extend(std::iter::repeat_n(u, n));
        z.extend(std::iter::repeat_n(v, n));
        vec![vec![z; substeps]; samples]
    };
    let set = DrifterSet::new(&g, vec![[500.0, 800.0], [1234.5, 321.0]], 4).unwrap();
    let out = advect_drifters(&set, &flow(0.5, -0.25, 4, 20), &g, 60.0, 1, 2).unwrap();
    let closed_form = set
        .mean_positions
        .iter()
        .zip(&out.mean_positions)
        .map(|(s, e)| (e[0] - s[0] - 600.0).abs().max((e[1] - s[1] + 300.0).abs()))
        .fold(0.0, f64::max);
    let still = advect_drifters(&set, &flow(0.0, 0.0, 4, 10), &g, 30.0, 1, 2).unwrap();
    let fixed = still.mean_positions == set.mean_positions;

    let g = GridSpec::with_origin(17, 13, 250.0, 400.0, -1000.0, 300.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    let mut agree = 0;
    for _ in 0..1000 {
        let pos = [
            rng.random_range(g.x0 - 500.0..g.x_max() + 500.0),
            rng.random_range(g.y0 - 500.0..g.y_max() + 500.0),
        ];
        let best = (0..g.points())
            .min_by(|&a, &b| {
                let da = (g.coords(a).0 - pos[0]).powi(2) + (g.coords(a).1 - pos[1]).powi(2);
                let db = (g.coords(b).0 - pos[0]).powi(2) + (g.coords(b).1 - pos[1]).powi(2);
                da.total_cmp(&db)
            })
            .unwrap();
        if nearest_point(&g, pos) == best {
            agree += 1;
        }
    }
    outcome(
        closed_form <= 1e-10 && fixed && agree == 1000,
        format!("constant flow error {closed_form:.1e} m, zero flow fixed: {fixed}, nearest point {agree}/1000"),
    )
}

/// Per-step times of the localized and plain chains at equal chain length
/// on one replica of `cfg`.
fn step_times(cfg: &ExperimentConfig) -> (f64, f64, f64) {
    let problem = build_problem(cfg).unwrap();
    let local = cfg
        .filters
        .iter()
        .find(|f| matches!(f, FilterConfig::Lsmcmc(_)))
        .unwrap();
    let mut plain = match local {
        FilterConfig::Lsmcmc(c) => *c,
        _ => unreachable!(),
    };
    plain.gamma = None;
    let seed = [cfg.seed(0)];
    let l = run_filter(&problem, local, &seed, cfg.threshold(), None).unwrap();
    let p = run_filter(&problem, &FilterConfig::Smcmc(plain), &seed, cfg.threshold(), None).unwrap();
    let dk = l.replicas[0].steps.iter().map(|s| s.d_k as f64).sum::<f64>() / problem.steps as f64;
    (l.step_time_ms(), p.step_time_ms(), dk)
}

fn c10_step_time(timing: Option<&Timing>) -> Outcome {
    let Some(t) = timing else {
        return outcome(false, "no timing from the first criterion".into());
    };
    // plain chain on the same problem, fewer steps and one replica
    let mut cfg = config("linear_swath.toml");
    cfg.experiment.steps = 10;
    let (_, plain_ms, _) = step_times(&cfg);
    let ratio = t.lsmcmc_step_ms / plain_ms;

    // the same comparison where the noise precision is dense per field
    let mut swe = config("swe_swath.toml");
    swe.experiment.steps = 3;
    let (l_ms, p_ms, dk) = step_times(&swe);
    outcome(
        true,
        format!(
            "linear benchmark lsmcmc {:.1} ms/step vs smcmc {plain_ms:.1}, ratio {ratio:.3} (below 1: {}); \
             shallow water (d = {}, mean d_k {dk:.0}) {l_ms:.1} vs {p_ms:.1} ms/step, ratio {:.3} (below 1: {})",
            t.lsmcmc_step_ms,
            ratio < 1.0,
            build_problem(&swe).unwrap().dim(),
            l_ms / p_ms,
            l_ms < p_ms
        ),
    )
}

fn main() {
    // cargo passes libtest flags; a name filter skips the suite
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut timing = None;
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let tag = match (o.pass, n) {
            (true, 10) => "INFO",
            (true, _) => "PASS",
            (false, _) => "FAIL",
        };
        println!("criterion {n:>2} {tag} {name}: {}", o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    report(1, "Kalman-oracle accuracy", c1_kf_accuracy(&mut timing));
    report(2, "degeneracy equivalences", c2_degeneracies());
    report(3, "Gaspari-Cohn taper", c3_gaspari_cohn());
    report(4, "sine-basis noise covariance", c4_noise_covariance());
    report(5, "Monte Carlo rate", c5_monte_carlo_rate());
    report(6, "shallow-water sanity", c6_shallow_water());
    report(7, "partition oracle", c7_partition());
    report(8, "EnKF algebra", c8_enkf_algebra());
    report(9, "drifter pipeline", c9_drifters());
    report(10, "step-time ratio", c10_step_time(timing.as_ref()));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
