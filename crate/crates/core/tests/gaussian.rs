use lsmcmc_core::dynamics::{Dynamics, LinearModel, StateLayout};
use lsmcmc_core::gaussian::{
    enkf_analysis, enkf_step, forecast_ensemble, gaspari_cohn, kf_step, lenkf_analysis, Ensemble, EnkfBranch,
    KalmanState, LocalizationConfig,
};
use lsmcmc_core::grid::{make_partition, GridSpec};
use lsmcmc_core::observations::{swath_locations, synthesize_observations, ObservationBatch, SwathConfig};
use lsmcmc_core::rng::Streams;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_ensemble(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Ensemble {
    Ensemble::new(DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0))).unwrap()
}

fn random_batch(k: usize, d: usize, m: usize, sigma: f64, rng: &mut ChaCha8Rng) -> ObservationBatch {
    let mut locs: Vec<usize> = (0..m).map(|_| rng.random_range(0..d)).collect();
    locs.sort_unstable();
    locs.dedup();
    let vals = DVector::from_fn(locs.len(), |_, _| rng.random_range(-1.0..1.0));
    ObservationBatch::new(k, locs, vec![0], vals, sigma).unwrap()
}

fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn woodbury_branch_equals_direct(
        seed in any::<u64>(),
        nx in 2usize..6,
        ny in 2usize..6,
        n in 2usize..12,
        m in 1usize..30,
        sigma in 0.05f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GridSpec::unit(nx, ny).unwrap();
        let layout = StateLayout { grid, fields: 1 };
        let f = random_ensemble(grid.points(), n, &mut rng);
        let b = random_batch(3, grid.points(), m, sigma, &mut rng);
        let streams = Streams::new(seed);
        let direct = enkf_analysis(&f, &b, &layout, &streams, EnkfBranch::Direct).unwrap();
        let woodbury = enkf_analysis(&f, &b, &layout, &streams, EnkfBranch::Woodbury).unwrap();
        prop_assert!(rel_diff(&direct.members, &woodbury.members) <= 1e-8);
    }
}

#[test]
fn single_subdomain_wide_taper_matches_enkf() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = GridSpec::unit(7, 6).unwrap();
    let layout = StateLayout { grid, fields: 1 };
    let loc = LocalizationConfig::new(make_partition(&grid, 1).unwrap(), 1e6, 1e-10).unwrap();
    for k in 1..=10 {
        let f = random_ensemble(grid.points(), 9, &mut rng);
        let b = random_batch(k, grid.points(), 15, 0.2, &mut rng);
        let streams = Streams::new(77);
        let e = enkf_analysis(&f, &b, &layout, &streams, EnkfBranch::Auto).unwrap();
        let l = lenkf_analysis(&f, &b, &loc, &layout, &streams, EnkfBranch::Auto).unwrap();
        let d = rel_diff(&e.members, &l.members);
        assert!(d <= 1e-8, "step {k}: relative difference {d:e}");
    }
}

#[test]
fn gaspari_cohn_shape() {
    assert_eq!(gaspari_cohn(0.0).unwrap(), 1.0);
    assert!(gaspari_cohn(2.0).unwrap().abs() <= 1e-14);
    assert_eq!(gaspari_cohn(2.5).unwrap(), 0.0);
    let below = gaspari_cohn(1.0 - 1e-15).unwrap();
    let at = gaspari_cohn(1.0).unwrap();
    // both branches at x = 1, written out in the larger-argument form
    let outer = 1.0 / 12.0 - 0.5 + 0.625 + 5.0 / 3.0 - 5.0 + 4.0 - 2.0 / 3.0;
    let inner: f64 = -0.25 + 0.5 + 0.625 - 5.0 / 3.0 + 1.0;
    assert!((inner - outer).abs() <= 1e-14);
    assert!((below - at).abs() <= 1e-14);
    let mut prev = f64::INFINITY;
    for s in 0..=10_000 {
        let v = gaspari_cohn(2.0 * s as f64 / 10_000.0).unwrap();
        assert!(v <= prev, "not monotone at sample {s}");
        assert!(v >= -1e-14);
        prev = v;
    }
    assert!(gaspari_cohn(-0.1).is_err());
}

fn linear_setup(nx: usize, ny: usize, steps: usize, seed: u64) -> (LinearModel, DVector<f64>, Vec<ObservationBatch>) {
    let grid = GridSpec::unit(nx, ny).unwrap();
    let model = LinearModel::new(grid, 0.25, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = grid.points();
    let z0 = DVector::from_fn(d, |_, _| rng.random_range(-0.15..0.15));
    let noise = model.noise();
    let mut truth = Vec::with_capacity(steps);
    let mut z = z0.clone();
    for _ in 0..steps {
        z = &z * model.a_scale + noise.sample(&mut rng);
        truth.push(z.clone());
    }
    let swath = SwathConfig {
        width: 3,
        stride: 3,
        ..SwathConfig::default()
    };
    let locs: Vec<Vec<usize>> = (1..=steps).map(|k| swath_locations(&swath, &grid, k)).collect();
    let batches = synthesize_observations(&truth, &locs, &[0], d, 0.05, &Streams::new(seed + 1)).unwrap();
    (model, z0, batches)
}

#[test]
fn large_ensemble_tracks_kalman() {
    let (model, z0, batches) = linear_setup(8, 8, 50, 21);
    let q = model.noise().to_dense();
    let cov = model.noise();
    let streams = Streams::new(3);
    let mut kf = KalmanState::exact(z0.clone());
    let mut ens = Ensemble::replicate(&z0, 5000).unwrap();
    let (mut below, mut total) = (0, 0);
    for (t, b) in batches.iter().enumerate() {
        kf = kf_step(&model, &q, &kf, b).unwrap();
        ens = enkf_step(&model, &cov, &ens, b, t as f64, t as f64 + 1.0, &streams, EnkfBranch::Auto).unwrap();
        let m = ens.mean();
        below += m.iter().zip(kf.mean.iter()).filter(|(a, b)| (*a - *b).abs() < 0.025).count();
        total += m.len();
    }
    let pct = 100.0 * below as f64 / total as f64;
    assert!(pct >= 99.0, "EnKF within threshold for {pct:.2}%");
}

#[test]
fn kalman_covariance_stays_symmetric_psd() {
    let (model, z0, batches) = linear_setup(6, 5, 40, 8);
    let q = model.noise().to_dense();
    let mut s = KalmanState::exact(z0);
    for b in &batches {
        s = kf_step(&model, &q, &s, b).unwrap();
        assert_eq!(s.cov, s.cov.transpose());
        let eig = SymmetricEigen::new(s.cov.clone());
        let lmax = eig.eigenvalues.max();
        assert!(eig.eigenvalues.min() >= -1e-10 * lmax);
    }
}

#[test]
fn uninformative_observations_leave_forecast() {
    let (model, z0, batches) = linear_setup(6, 6, 3, 2);
    let q = model.noise().to_dense();
    let cov = model.noise();
    let layout = model.layout();
    let vague: Vec<ObservationBatch> = batches
        .iter()
        .map(|b| ObservationBatch::new(b.k, b.locations.clone(), b.fields.clone(), b.values.clone(), 1e12).unwrap())
        .collect();

    let prior = KalmanState {
        mean: z0.clone(),
        cov: DMatrix::identity(36, 36) * 0.01,
    };
    let post = kf_step(&model, &q, &prior, &vague[0]).unwrap();
    let forecast = &z0 * model.a_scale;
    assert!((&post.mean - &forecast).amax() <= 1e-6 * forecast.amax());

    let streams = Streams::new(6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ens = random_ensemble(36, 20, &mut rng);
    let f = forecast_ensemble(&model, &cov, &ens, 0.0, 1.0, &streams, 1).unwrap();
    let fm = f.mean();
    let loc = LocalizationConfig::new(make_partition(&model.grid, 4).unwrap(), 3.0, 1e-10).unwrap();
    for a in [
        enkf_analysis(&f, &vague[0], &layout, &streams, EnkfBranch::Direct).unwrap(),
        enkf_analysis(&f, &vague[0], &layout, &streams, EnkfBranch::Woodbury).unwrap(),
        lenkf_analysis(&f, &vague[0], &loc, &layout, &streams, EnkfBranch::Auto).unwrap(),
    ] {
        assert!((a.mean() - &fm).amax() <= 1e-6 * fm.amax());
    }
}

#[test]
fn lenkf_independent_of_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let grid = GridSpec::unit(11, 11).unwrap();
    let layout = StateLayout { grid, fields: 1 };
    let loc = LocalizationConfig::new(make_partition(&grid, 25).unwrap(), 2.0, 1e-10).unwrap();
    let f = random_ensemble(grid.points(), 10, &mut rng);
    let b = random_batch(4, grid.points(), 40, 0.1, &mut rng);
    let streams = Streams::new(2);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| lenkf_analysis(&f, &b, &loc, &layout, &streams, EnkfBranch::Auto).unwrap())
    };
    assert_eq!(run(1), run(4));
}
