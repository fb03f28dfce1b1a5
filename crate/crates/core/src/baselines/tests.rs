use super::*;
use crate::ensemble::{forgetting_prior, model_posterior_update};
use crate::seed::rng_from_seed;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn random_states(n: usize, seed: u64) -> Vec<KinematicState> {
    let mut rng = rng_from_seed(seed);
    let mut x = KinematicState::ZERO;
    (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            x = KinematicState::new(0.9 * x.vx + 0.3 * a, 0.9 * x.vy + 0.3 * b);
            x
        })
        .collect()
}

fn observe(h: &[[f64; 2]], x: &[KinematicState], noise: f64, seed: u64) -> Vec<NeuralObservation> {
    let mut rng = rng_from_seed(seed);
    let d = Normal::new(0.0, noise.max(1e-300)).unwrap();
    x.iter()
        .map(|s| NeuralObservation::new(h.iter().map(|r| r[0] * s.vx + r[1] * s.vy + if noise > 0.0 { d.sample(&mut rng) } else { 0.0 }).collect()))
        .collect()
}

fn padded_identity(c: usize) -> Vec<[f64; 2]> {
    (0..c).map(|i| [if i == 0 { 1.0 } else { 0.0 }, if i == 1 { 1.0 } else { 0.0 }]).collect()
}

fn model_from(h: &[[f64; 2]], q: f64, trans: TransitionModel) -> KalmanModel {
    KalmanModel { transition: trans, h: RowMatrix::from_rows(&h.iter().map(|r| r.to_vec()).collect::<Vec<_>>()), q_noise: vec![q; h.len()] }
}

/// Clean-room Kalman recursion in information form with plain arrays.
fn oracle_kalman(m: &KalmanModel, x0: [f64; 2], ys: &[NeuralObservation]) -> Vec<[f64; 2]> {
    let t = &m.transition;
    let mut mu = x0;
    let mut p = [[t.sigma_u[0], 0.0], [0.0, t.sigma_u[1]]];
    let mut out = Vec::new();
    for y in ys {
        let mp = [t.a[0][0] * mu[0] + t.a[0][1] * mu[1] + t.b[0], t.a[1][0] * mu[0] + t.a[1][1] * mu[1] + t.b[1]];
        // P⁻ = A P Aᵀ + Σu
        let mut ap = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                ap[i][j] = t.a[i][0] * p[0][j] + t.a[i][1] * p[1][j];
            }
        }
        let mut pp = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                pp[i][j] = ap[i][0] * t.a[j][0] + ap[i][1] * t.a[j][1];
            }
        }
        pp[0][0] += t.sigma_u[0];
        pp[1][1] += t.sigma_u[1];
        // Information form: P⁺ = (P⁻⁻¹ + Hᵀ R⁻¹ H)⁻¹, μ⁺ = P⁺ (P⁻⁻¹ μ⁻ + Hᵀ R⁻¹ y)
        let inv2 = |a: [[f64; 2]; 2]| {
            let d = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            [[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]]
        };
        let mut info = inv2(pp);
        let mut vec = [info[0][0] * mp[0] + info[0][1] * mp[1], info[1][0] * mp[0] + info[1][1] * mp[1]];
        for c in 0..m.h.rows {
            let (h0, h1, r) = (m.h.get(c, 0), m.h.get(c, 1), m.q_noise[c]);
            info[0][0] += h0 * h0 / r;
            info[0][1] += h0 * h1 / r;
            info[1][0] += h1 * h0 / r;
            info[1][1] += h1 * h1 / r;
            vec[0] += h0 * y.rates[c] / r;
            vec[1] += h1 * y.rates[c] / r;
        }
        p = inv2(info);
        mu = [p[0][0] * vec[0] + p[0][1] * vec[1], p[1][0] * vec[0] + p[1][1] * vec[1]];
        out.push(mu);
    }
    out
}

#[test]
fn kalman_noiseless_h_recovery() {
    let h = [[1.0, -0.5], [0.2, 0.9], [-1.1, 0.3], [0.0, 2.0]];
    let x = random_states(100, 1);
    let y = observe(&h, &x, 0.0, 0);
    let m = fit_kalman(&x, &y).unwrap();
    for (c, row) in h.iter().enumerate() {
        assert!((m.h.get(c, 0) - row[0]).abs() < 1e-6 && (m.h.get(c, 1) - row[1]).abs() < 1e-6);
    }
}

#[test]
fn kalman_constant_states_fall_back() {
    let x = vec![KinematicState::ZERO; 30];
    let y: Vec<_> = (0..30).map(|i| NeuralObservation::new(vec![(i % 3) as f64, 1.0])).collect();
    let m = fit_kalman(&x, &y).unwrap();
    assert!(m.h.data.iter().all(|v| *v == 0.0));
    assert!(m.transition.fallback);
}

#[test]
fn kalman_noisy_h_recovery_matches_oracle() {
    let mut rng = rng_from_seed(5);
    let h: Vec<[f64; 2]> = (0..8).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let x = random_states(1000, 6);
    let y = observe(&h, &x, 0.1, 7);
    let m = fit_kalman(&x, &y).unwrap();
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for s in &x {
        sxx += s.vx * s.vx;
        sxy += s.vx * s.vy;
        syy += s.vy * s.vy;
    }
    let det = sxx * syy - sxy * sxy;
    for (c, row) in h.iter().enumerate() {
        let (mut tx, mut ty) = (0.0, 0.0);
        for (s, o) in x.iter().zip(&y) {
            tx += s.vx * o.rates[c];
            ty += s.vy * o.rates[c];
        }
        let (a, b) = ((syy * tx - sxy * ty) / det, (sxx * ty - sxy * tx) / det);
        assert!((m.h.get(c, 0) - a).abs() < 1e-10 && (m.h.get(c, 1) - b).abs() < 1e-10);
        assert!((a - row[0]).abs() < 0.02 && (b - row[1]).abs() < 0.02);
    }
}

#[test]
fn kalman_exact_observation_limit() {
    let h = padded_identity(4);
    let m = model_from(&h, VARIANCE_FLOOR, TransitionModel::identity([0.1, 0.1]));
    let mut kf = KalmanFilter::new(m, KinematicState::ZERO);
    let x = kf.step(&NeuralObservation::new(vec![3.0, 4.0, 0.0, 0.0])).unwrap();
    assert!((x.vx - 3.0).abs() < 1e-4 && (x.vy - 4.0).abs() < 1e-4);
}

#[test]
fn kalman_uninformative_observation() {
    let h = vec![[0.0, 0.0]; 3];
    let trans = TransitionModel::new([[0.9, 0.1], [0.0, 0.8]], [0.05, -0.02], [0.1, 0.2]);
    let m = model_from(&h, 1.0, trans.clone());
    let mut kf = KalmanFilter::new(m, KinematicState::new(1.0, 2.0));
    let x = kf.step(&NeuralObservation::new(vec![5.0, -3.0, 1.0])).unwrap();
    let prior = trans.mean(KinematicState::new(1.0, 2.0));
    assert!((x.vx - prior.vx).abs() < 1e-15 && (x.vy - prior.vy).abs() < 1e-15);
}

#[test]
fn kalman_matches_clean_room_recursion() {
    let mut rng = rng_from_seed(9);
    let h: Vec<[f64; 2]> = (0..6).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let trans = TransitionModel::new([[0.95, 0.03], [-0.03, 0.95]], [0.01, 0.0], [0.02, 0.03]);
    let x = random_states(200, 10);
    let y = observe(&h, &x, 0.3, 11);
    let m = model_from(&h, 0.09, trans);
    let ours = kalman_run(&m, KinematicState::ZERO, &y).unwrap();
    let oracle = oracle_kalman(&m, [0.0, 0.0], &y);
    for (a, b) in ours.iter().zip(&oracle) {
        assert!((a.vx - b[0]).abs() < 1e-9 && (a.vy - b[1]).abs() < 1e-9);
    }
}

#[test]
fn kalman_update_is_affine_in_observation() {
    let h = [[1.0, 0.5], [-0.3, 1.0], [0.8, 0.2]];
    let m = model_from(&h, 0.5, TransitionModel::identity([0.2, 0.2]));
    let base = KalmanFilter::new(m, KinematicState::new(0.1, -0.1));
    let y1 = NeuralObservation::new(vec![1.0, -2.0, 0.5]);
    let y2 = NeuralObservation::new(vec![-0.5, 0.3, 2.0]);
    let mid = NeuralObservation::new(y1.rates.iter().zip(&y2.rates).map(|(a, b)| 0.5 * (a + b)).collect());
    let r1 = base.clone().step(&y1).unwrap();
    let r2 = base.clone().step(&y2).unwrap();
    let rm = base.clone().step(&mid).unwrap();
    assert!((rm.vx - 0.5 * (r1.vx + r2.vx)).abs() < 1e-12);
    assert!((rm.vy - 0.5 * (r1.vy + r2.vy)).abs() < 1e-12);
}

#[test]
fn kalman_shape_errors() {
    let m = model_from(&padded_identity(3), 1.0, TransitionModel::identity([0.1, 0.1]));
    let mut kf = KalmanFilter::new(m, KinematicState::ZERO);
    assert!(matches!(kf.step(&NeuralObservation::new(vec![1.0])), Err(Error::ShapeMismatch(_))));
}

fn small_pool(seed: u64, q: usize) -> Vec<EncoderModel> {
    let mut rng = rng_from_seed(seed);
    (0..q)
        .map(|k| {
            let rows: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            EncoderModel::linear(format!("m{k}"), RowMatrix::from_rows(&rows), NoiseModel::isotropic(4, 0.5))
        })
        .collect()
}

fn ys(seed: u64, n: usize) -> Vec<NeuralObservation> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| NeuralObservation::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect())).collect()
}

fn trans() -> TransitionModel {
    TransitionModel::new([[0.95, 0.0], [0.0, 0.95]], [0.0, 0.0], [0.01, 0.01])
}

#[test]
fn single_model_pf_is_the_one_model_ensemble() {
    let m = small_pool(1, 1).remove(0);
    let cfg = FilterConfig { n_particles: 100, seed: 4, ..FilterConfig::default() };
    let obs = ys(2, 40);
    let a = single_model_pf(m.clone(), trans(), cfg.clone(), KinematicState::ZERO, &obs).unwrap();
    let mut f = DyEnsembleFilter::new(EncoderPool::new(vec![m.clone()]).unwrap(), trans(), cfg.clone(), KinematicState::ZERO).unwrap();
    let b: Vec<_> = obs.iter().map(|y| f.step(y).unwrap().x_hat).collect();
    assert_eq!(a, b);
    assert_eq!(a, single_model_pf(m, trans(), cfg, KinematicState::ZERO, &obs).unwrap());
}

#[test]
fn single_model_pf_matches_pinned_posterior_run() {
    let mut models = small_pool(3, 1);
    let far = {
        let rows: Vec<Vec<f64>> = (0..4).map(|_| vec![0.0, 0.0]).collect();
        let mut e = EncoderModel::linear("far", RowMatrix::from_rows(&rows), NoiseModel::isotropic(4, 1e-8));
        if let crate::encoders::EncoderKind::Linear { bias, .. } = &mut e.kind {
            *bias = Some(vec![1e6; 4]);
        }
        e
    };
    models.push(far);
    let cfg = FilterConfig { n_particles: 100, seed: 5, forgetting_alpha: 1.0, weight_floor: 0.0, ..FilterConfig::default() };
    let obs = ys(6, 40);
    let single = single_model_pf(models[0].clone(), trans(), cfg.clone(), KinematicState::ZERO, &obs).unwrap();
    let mut f = DyEnsembleFilter::new(EncoderPool::new(models).unwrap(), trans(), cfg, KinematicState::ZERO).unwrap();
    for (y, s) in obs.iter().zip(&single) {
        let out = f.step(y).unwrap();
        assert!(out.model_posterior[1] == 0.0);
        assert!((out.x_hat.vx - s.vx).abs() < 1e-12 && (out.x_hat.vy - s.vy).abs() < 1e-12);
    }
}

#[test]
fn static_bma_of_identical_models_equals_single_pf() {
    let m = small_pool(7, 1).remove(0);
    let cfg = FilterConfig { n_particles: 100, seed: 8, ..FilterConfig::default() };
    let obs = ys(9, 40);
    let single = single_model_pf(m.clone(), trans(), cfg.clone(), KinematicState::ZERO, &obs).unwrap();
    let pool = EncoderPool::new(vec![m.clone(), m]).unwrap();
    let mut f = static_bma_filter(pool, trans(), cfg, KinematicState::ZERO, None).unwrap();
    for (y, s) in obs.iter().zip(&single) {
        let out = static_bma_step(&mut f, y).unwrap();
        assert_eq!(out.model_posterior, vec![0.5, 0.5]);
        assert!((out.x_hat.vx - s.vx).abs() < 1e-12 && (out.x_hat.vy - s.vy).abs() < 1e-12);
    }
}

#[test]
fn static_bma_one_hot_equals_first_model_pf() {
    let models = small_pool(10, 3);
    let cfg = FilterConfig { n_particles: 100, seed: 11, ..FilterConfig::default() };
    let obs = ys(12, 40);
    let single = single_model_pf(models[0].clone(), trans(), cfg.clone(), KinematicState::ZERO, &obs).unwrap();
    let pool = EncoderPool::new(models).unwrap();
    let mut f = static_bma_filter(pool, trans(), cfg, KinematicState::ZERO, Some(vec![1.0, 0.0, 0.0])).unwrap();
    for (y, s) in obs.iter().zip(&single) {
        let out = static_bma_step(&mut f, y).unwrap();
        assert!((out.x_hat.vx - s.vx).abs() < 1e-12 && (out.x_hat.vy - s.vy).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kalman_covariance_stays_psd(seed in 0u64..100_000) {
        let mut rng = rng_from_seed(seed);
        let h: Vec<[f64; 2]> = (0..5).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let trans = TransitionModel::new(
            [[rng.random_range(0.5..1.0), rng.random_range(-0.2..0.2)], [rng.random_range(-0.2..0.2), rng.random_range(0.5..1.0)]],
            [0.0, 0.0],
            [rng.random_range(1e-4..1.0), rng.random_range(1e-4..1.0)],
        );
        let m = model_from(&h, rng.random_range(1e-6..2.0), trans);
        let mut kf = KalmanFilter::new(m, KinematicState::ZERO);
        for y in ys(seed, 30).iter().map(|o| NeuralObservation::new(o.rates.iter().cloned().chain([0.3]).collect())) {
            kf.step(&y).unwrap();
            let c = kf.covariance();
            prop_assert_eq!(c[(0, 1)], c[(1, 0)]);
            let eig = c.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|e| *e >= -1e-12));
        }
    }

    #[test]
    fn no_forgetting_no_floor_is_classical_bma(
        prior in prop::collection::vec(0.05f64..1.0, 3),
        lms in prop::collection::vec(prop::collection::vec(-30.0f64..0.0, 3), 1..40),
    ) {
        let s: f64 = prior.iter().sum();
        let prior: Vec<f64> = prior.iter().map(|p| p / s).collect();
        let mut p = prior.clone();
        for lm in &lms {
            p = model_posterior_update(&forgetting_prior(&p, 1.0, 0.0), lm, 0.0);
        }
        let reference = bma_posterior(&prior, &lms);
        for (a, b) in p.iter().zip(&reference) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
