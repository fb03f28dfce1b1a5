use super::*;
use crate::seed::rng_from_seed;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn random_states(n: usize, seed: u64, scale: f64) -> Vec<KinematicState> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            KinematicState::new(a * scale, b * scale)
        })
        .collect()
}

fn apply(f: impl Fn(KinematicState) -> Vec<f64>, x: &[KinematicState], noise: f64, seed: u64) -> Vec<NeuralObservation> {
    let mut rng = rng_from_seed(seed);
    let d = Normal::new(0.0, noise.max(1e-300)).unwrap();
    x.iter()
        .map(|s| {
            let mut v = f(*s);
            if noise > 0.0 {
                v.iter_mut().for_each(|e| *e += d.sample(&mut rng));
            }
            NeuralObservation::new(v)
        })
        .collect()
}

/// Independent 2-feature normal-equations solve (Cramer's rule).
fn oracle_linear(x: &[KinematicState], y: &[NeuralObservation]) -> (Vec<[f64; 2]>, Vec<f64>) {
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for s in x {
        sxx += s.vx * s.vx;
        sxy += s.vx * s.vy;
        syy += s.vy * s.vy;
    }
    let det = sxx * syy - sxy * sxy;
    let c = y[0].rates.len();
    let mut w = Vec::new();
    let mut var = Vec::new();
    for ch in 0..c {
        let (mut tx, mut ty) = (0.0, 0.0);
        for (s, o) in x.iter().zip(y) {
            tx += s.vx * o.rates[ch];
            ty += s.vy * o.rates[ch];
        }
        let a = (syy * tx - sxy * ty) / det;
        let b = (sxx * ty - sxy * tx) / det;
        let mut ss = 0.0;
        for (s, o) in x.iter().zip(y) {
            let r = o.rates[ch] - a * s.vx - b * s.vy;
            ss += r * r;
        }
        w.push([a, b]);
        var.push(ss / x.len() as f64);
    }
    (w, var)
}

/// Independent ridge solve by Gauss-Jordan elimination on the 4 polynomial features.
fn oracle_ridge(x: &[KinematicState], y: &[NeuralObservation], lambda: f64) -> Vec<[f64; 4]> {
    let feats: Vec<[f64; 4]> = x.iter().map(|s| [s.vx * s.vx, s.vy * s.vy, s.vx, s.vy]).collect();
    let c = y[0].rates.len();
    (0..c)
        .map(|ch| {
            let mut m = [[0.0f64; 5]; 4];
            for (f, o) in feats.iter().zip(y) {
                for i in 0..4 {
                    for j in 0..4 {
                        m[i][j] += f[i] * f[j];
                    }
                    m[i][4] += f[i] * o.rates[ch];
                }
            }
            for (i, row) in m.iter_mut().enumerate() {
                row[i] += lambda;
            }
            for col in 0..4 {
                let piv = (col..4).max_by(|a, b| m[*a][col].abs().total_cmp(&m[*b][col].abs())).unwrap();
                m.swap(col, piv);
                let p = m[col][col];
                for j in 0..5 {
                    m[col][j] /= p;
                }
                for r in 0..4 {
                    if r != col {
                        let f = m[r][col];
                        for j in 0..5 {
                            m[r][j] -= f * m[col][j];
                        }
                    }
                }
            }
            [m[0][4], m[1][4], m[2][4], m[3][4]]
        })
        .collect()
}

fn linear_w(model: &EncoderModel) -> &RowMatrix {
    match &model.kind {
        EncoderKind::Linear { w, .. } => w,
        _ => panic!("not linear"),
    }
}

fn poly_w(model: &EncoderModel) -> (&RowMatrix, &RowMatrix) {
    match &model.kind {
        EncoderKind::Polynomial { w2, w1, .. } => (w2, w1),
        _ => panic!("not polynomial"),
    }
}

fn mse(model: &EncoderModel, x: &[KinematicState], y: &[NeuralObservation]) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        for (p, t) in model.encode(*xi).iter().zip(&yi.rates) {
            s += (p - t) * (p - t);
            n += 1.0;
        }
    }
    s / n
}

#[test]
fn linear_noiseless_recovery() {
    let wstar = [[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]];
    let x = random_states(50, 1, 1.0);
    let y = apply(|s| wstar.iter().map(|r| r[0] * s.vx + r[1] * s.vy).collect(), &x, 0.0, 0);
    let m = fit_linear(&x, &y).unwrap();
    let w = linear_w(&m);
    for c in 0..3 {
        for j in 0..2 {
            assert!((w.get(c, j) - wstar[c][j]).abs() < 1e-6);
        }
    }
    assert!(m.noise.sigma2().iter().all(|s| *s == VARIANCE_FLOOR));
}

#[test]
fn linear_zero_design_falls_back() {
    let x = vec![KinematicState::ZERO; 20];
    let y: Vec<_> = (0..20).map(|i| NeuralObservation::new(vec![if i % 2 == 0 { 1.0 } else { -1.0 }, 0.5])).collect();
    let m = fit_linear(&x, &y).unwrap();
    assert!(m.meta.singular);
    assert!(linear_w(&m).data.iter().all(|v| *v == 0.0));
    assert!((m.noise.sigma2()[0] - 1.0).abs() < 1e-12);
    assert!((m.noise.sigma2()[1] - 0.25).abs() < 1e-12);
}

#[test]
fn linear_errors() {
    let x = random_states(2, 0, 1.0);
    let y = apply(|s| vec![s.vx], &x, 0.0, 0);
    assert!(matches!(fit_linear(&x, &y), Err(Error::TooFewSamples { .. })));
    let x = random_states(5, 0, 1.0);
    assert!(matches!(fit_linear(&x, &y), Err(Error::ShapeMismatch(_))));
}

#[test]
fn linear_noisy_matches_normal_equation_oracle() {
    let mut rng = rng_from_seed(42);
    let c = 6;
    let wstar: Vec<[f64; 2]> = (0..c).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let x = random_states(500, 7, 1.0);
    let y = apply(|s| wstar.iter().map(|r| r[0] * s.vx + r[1] * s.vy).collect(), &x, 0.1, 8);
    let m = fit_linear(&x, &y).unwrap();
    let (ow, ovar) = oracle_linear(&x, &y);
    let w = linear_w(&m);
    for ch in 0..c {
        assert!((w.get(ch, 0) - ow[ch][0]).abs() < 1e-10);
        assert!((w.get(ch, 1) - ow[ch][1]).abs() < 1e-10);
        assert!((m.noise.sigma2()[ch] - ovar[ch]).abs() < 1e-12);
        assert!((0.005..=0.02).contains(&m.noise.sigma2()[ch]), "{}", m.noise.sigma2()[ch]);
    }
}

#[test]
fn polynomial_pure_quadratic() {
    let x = random_states(40, 3, 1.0);
    let y = apply(|s| vec![s.vx * s.vx, s.vy * s.vy], &x, 0.0, 0);
    let m = fit_polynomial(&x, &y, 0.0).unwrap();
    let (w2, w1) = poly_w(&m);
    for c in 0..2 {
        for j in 0..2 {
            let expected = if c == j { 1.0 } else { 0.0 };
            assert!((w2.get(c, j) - expected).abs() < 1e-6);
            assert!(w1.get(c, j).abs() < 1e-6);
        }
    }
}

#[test]
fn polynomial_huge_ridge_shrinks_to_zero() {
    let x = random_states(40, 3, 1.0);
    let y = apply(|s| vec![s.vx * s.vx + s.vy, 2.0 * s.vx], &x, 0.0, 0);
    let m = fit_polynomial(&x, &y, 1e12).unwrap();
    let (w2, w1) = poly_w(&m);
    assert!(w2.data.iter().chain(&w1.data).all(|v| v.abs() < 1e-8));
    assert!(m.encode(KinematicState::new(1.0, 1.0)).iter().all(|v| v.abs() < 1e-7));
}

#[test]
fn polynomial_matches_closed_form_ridge_and_generalizes() {
    let truth = |s: KinematicState| vec![0.5 * s.vx * s.vx - 0.3 * s.vy * s.vy + s.vx, -0.2 * s.vx * s.vx + 0.8 * s.vy, 0.7 * s.vy * s.vy - s.vx + 0.5 * s.vy];
    let x = random_states(800, 21, 1.0);
    let y = apply(truth, &x, 0.05, 22);
    let m = fit_polynomial(&x, &y, 1.0).unwrap();
    let oracle = oracle_ridge(&x, &y, 1.0);
    let (w2, w1) = poly_w(&m);
    for (ch, o) in oracle.iter().enumerate() {
        let got = [w2.get(ch, 0), w2.get(ch, 1), w1.get(ch, 0), w1.get(ch, 1)];
        for j in 0..4 {
            assert!((got[j] - o[j]).abs() < 1e-9);
        }
    }
    let xt = random_states(300, 23, 1.0);
    let yt = apply(truth, &xt, 0.05, 24);
    assert!(mse(&m, &xt, &yt) < 0.01);
}

#[test]
fn polynomial_with_zero_quadratic_is_linear() {
    let w1 = RowMatrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
    let poly = EncoderModel::new(
        "p",
        EncoderKind::Polynomial { w2: RowMatrix::zeros(2, 2), w1: w1.clone(), w_cross: None, bias: None, ridge_lambda: 0.0 },
        NoiseModel::isotropic(2, 1.0),
    );
    let lin = EncoderModel::linear("l", w1, NoiseModel::isotropic(2, 1.0));
    let x = KinematicState::new(0.3, -1.2);
    assert_eq!(poly.encode(x), lin.encode(x));
}

#[test]
fn optional_terms_are_fitted() {
    let x = random_states(100, 5, 1.0);
    let y = apply(|s| vec![2.0 + s.vx, s.vx * s.vy - 1.0], &x, 0.0, 0);
    let opts = FitOptions { intercept: true, cross_term: true };
    let m = fit_polynomial_with(&x, &y, 0.0, opts).unwrap();
    let p = m.encode(KinematicState::new(0.5, 2.0));
    assert!((p[0] - 2.5).abs() < 1e-8 && (p[1] - 0.0).abs() < 1e-8);
    let l = fit_linear_with(&x, &y, FitOptions { intercept: true, cross_term: false }).unwrap();
    assert!((l.encode(KinematicState::ZERO)[0] - 2.0).abs() < 1e-8);
}

#[test]
fn encode_examples() {
    let w = RowMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
    let m = EncoderModel::linear("l", w, NoiseModel::isotropic(3, 1.0));
    assert_eq!(m.encode(KinematicState::new(1.0, 0.0)), vec![1.0, 0.0, 0.0]);
    let z = EncoderModel::new("z", EncoderKind::Mlp(Mlp::zeros(5, 3)), NoiseModel::isotropic(3, 1.0));
    assert_eq!(z.encode(KinematicState::new(0.7, -2.0)), vec![0.0; 3]);
}

fn textbook_log_pdf(y: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        let d = y[i] - mean[i];
        s += (1.0 / (2.0 * std::f64::consts::PI * var[i]).sqrt() * (-d * d / (2.0 * var[i])).exp()).ln();
    }
    s
}

#[test]
fn log_likelihood_examples() {
    let w = RowMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.5, -0.5]]);
    let m = EncoderModel::linear("l", w, NoiseModel::isotropic(4, 1.0));
    let x = KinematicState::new(0.4, 1.1);
    let mut y = NeuralObservation::new(m.encode(x));
    let l0 = m.log_likelihood(x, &y);
    assert!((l0 - (-2.0 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    assert!((l0 - -3.675754132818691).abs() < 1e-12);
    y.rates[2] += 1.0;
    assert!((m.log_likelihood(x, &y) - (l0 - 0.5)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn log_likelihood_matches_textbook(seed in 0u64..10_000) {
        let mut rng = rng_from_seed(seed);
        let c = 5;
        let net = Mlp::init(4, c, seed);
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..3.0)).collect();
        let m = EncoderModel::new("n", EncoderKind::Mlp(net), NoiseModel::new(var.clone()));
        let x = KinematicState::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let expected = textbook_log_pdf(&y, &m.encode(x), &var);
        prop_assert!((m.log_likelihood(x, &NeuralObservation::new(y)) - expected).abs() < 1e-10);
    }

    #[test]
    fn likelihood_mode_is_at_mean(seed in 0u64..10_000, dy in prop::collection::vec(-3.0f64..3.0, 3)) {
        let x = random_states(30, seed, 1.0);
        let y = apply(|s| vec![s.vx * s.vx, s.vy - s.vx, 2.0 * s.vy], &x, 0.3, seed + 1);
        let m = fit_polynomial(&x, &y, 0.1).unwrap();
        let probe = x[0];
        let at_mean = NeuralObservation::new(m.encode(probe));
        let other = NeuralObservation::new(at_mean.rates.iter().zip(&dy).map(|(a, b)| a + b).collect());
        prop_assert!(m.log_likelihood(probe, &at_mean) >= m.log_likelihood(probe, &other));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences(seed in 0u64..10_000) {
        let net = {
            let mut n = Mlp::init(3, 2, seed);
            let mut rng = rng_from_seed(seed + 99);
            let p: Vec<f64> = n.params().iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            n.set_params(&p);
            n
        };
        let x = random_states(4, seed + 1, 1.0);
        let y = apply(|s| vec![s.vx, s.vy * s.vx], &x, 0.2, seed + 2);
        let rows: Vec<&[f64]> = y.iter().map(|o| o.rates.as_slice()).collect();
        let mut grad = vec![0.0; net.n_params()];
        net.mse_and_grad(&x, &rows, Some(&mut grad));
        let p0 = net.params();
        let eps = 1e-5;
        for i in 0..p0.len() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut pp = p0.clone();
            pp[i] += eps;
            plus.set_params(&pp);
            pp[i] -= 2.0 * eps;
            minus.set_params(&pp);
            let fd = (plus.mse_and_grad(&x, &rows, None) - minus.mse_and_grad(&x, &rows, None)) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            prop_assert!((fd - grad[i]).abs() / denom < 1e-4, "param {}: fd {} analytic {}", i, fd, grad[i]);
        }
    }

    #[test]
    fn ridge_norm_non_increasing_in_lambda(seed in 0u64..10_000, l1 in 0.0f64..50.0, dl in 0.0f64..50.0) {
        let x = random_states(25, seed, 1.0);
        let y = apply(|s| vec![s.vx * s.vx + s.vy, s.vy * s.vy - s.vx], &x, 0.5, seed + 3);
        let norm = |m: &EncoderModel| { let (a, b) = poly_w(m); a.frobenius_sq() + b.frobenius_sq() };
        let lo = norm(&fit_polynomial(&x, &y, l1).unwrap());
        let hi = norm(&fit_polynomial(&x, &y, l1 + dl).unwrap());
        prop_assert!(hi <= lo * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn serialization_round_trip_is_exact(seed in 0u64..10_000) {
        let x = random_states(30, seed, 1.0);
        let y = apply(|s| vec![s.vx.sin(), s.vy * s.vx, s.vy], &x, 0.1, seed + 4);
        let cfg = MlpTrainConfig { hidden: 4, max_epochs: 2, seed, ..MlpTrainConfig::default() };
        let models = [fit_linear(&x, &y).unwrap(), fit_polynomial(&x, &y, 0.5).unwrap(), fit_mlp(&x, &y, &cfg).unwrap()];
        for m in models {
            let text = serde_json::to_string(&m).unwrap();
            let back: EncoderModel = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(&back, &m);
        }
    }
}

#[test]
fn mlp_zero_epochs_returns_initialization() {
    let x = random_states(50, 1, 1.0);
    let y = apply(|s| vec![s.vx, s.vy, s.vx - s.vy], &x, 0.1, 2);
    let cfg = MlpTrainConfig { hidden: 8, max_epochs: 0, seed: 5, ..MlpTrainConfig::default() };
    let m = fit_mlp(&x, &y, &cfg).unwrap();
    let init = Mlp::init(8, 3, 5);
    match &m.kind {
        EncoderKind::Mlp(net) => assert_eq!(net, &init),
        _ => panic!(),
    }
    for c in 0..3 {
        let v: f64 = x.iter().zip(&y).map(|(s, o)| (o.rates[c] - init.forward(*s)[c]).powi(2)).sum::<f64>() / 50.0;
        assert!((m.noise.sigma2()[c] - v).abs() < 1e-12);
    }
    assert_eq!(m.meta.epochs_run, Some(0));
}

#[test]
fn mlp_too_few_samples() {
    let x = random_states(9, 1, 1.0);
    let y = apply(|s| vec![s.vx], &x, 0.0, 0);
    assert!(matches!(fit_mlp(&x, &y, &MlpTrainConfig::default()), Err(Error::TooFewSamples { .. })));
}

#[test]
fn mlp_is_deterministic() {
    let x = random_states(200, 1, 1.0);
    let y = apply(|s| vec![s.vx.tanh(), s.vy * 0.5], &x, 0.1, 2);
    let cfg = MlpTrainConfig { hidden: 10, max_epochs: 20, seed: 9, ..MlpTrainConfig::default() };
    assert_eq!(fit_mlp(&x, &y, &cfg).unwrap(), fit_mlp(&x, &y, &cfg).unwrap());
}

#[test]
fn mlp_learns_linear_map_nearly_as_well_as_least_squares() {
    let w = [[1.0, -0.5], [0.3, 0.8], [-1.2, 0.4], [0.0, 1.0]];
    let f = |s: KinematicState| w.iter().map(|r| r[0] * s.vx + r[1] * s.vy).collect::<Vec<_>>();
    let x = random_states(1000, 31, 1.0);
    let y = apply(f, &x, 0.1, 32);
    let xt = random_states(400, 33, 1.0);
    let yt = apply(f, &xt, 0.1, 34);
    let lin = fit_linear(&x, &y).unwrap();
    let net = fit_mlp(&x, &y, &MlpTrainConfig { hidden: 30, seed: 1, ..MlpTrainConfig::default() }).unwrap();
    let (ml, mn) = (mse(&lin, &xt, &yt), mse(&net, &xt, &yt));
    assert!(mn <= 2.0 * ml, "mlp {mn} vs linear {ml}");
}

fn mean_channel_cc(model: &EncoderModel, x: &[KinematicState], truth: &[Vec<f64>]) -> f64 {
    let preds: Vec<Vec<f64>> = x.iter().map(|s| model.encode(*s)).collect();
    let c = truth[0].len();
    let n = x.len() as f64;
    (0..c)
        .map(|ch| {
            let p: Vec<f64> = preds.iter().map(|v| v[ch]).collect();
            let t: Vec<f64> = truth.iter().map(|v| v[ch]).collect();
            let (mp, mt) = (p.iter().sum::<f64>() / n, t.iter().sum::<f64>() / n);
            let cov: f64 = p.iter().zip(&t).map(|(a, b)| (a - mp) * (b - mt)).sum();
            let vp: f64 = p.iter().map(|a| (a - mp).powi(2)).sum();
            let vt: f64 = t.iter().map(|b| (b - mt).powi(2)).sum();
            cov / (vp * vt).sqrt()
        })
        .sum::<f64>()
        / c as f64
}

#[test]
fn mlp_beats_polynomial_on_warped_tuning() {
    let phases = [0.0, 0.7, 1.9, 2.8, 4.0, 5.2];
    let f = |s: KinematicState| {
        let theta = s.vy.atan2(s.vx);
        phases.iter().map(|p| (2.0 * (theta - p)).sin() * s.norm()).collect::<Vec<_>>()
    };
    let x = random_states(2000, 41, 1.0);
    let y = apply(f, &x, 0.05, 42);
    let xt = random_states(500, 43, 1.0);
    let truth: Vec<Vec<f64>> = xt.iter().map(|s| f(*s)).collect();
    let poly = fit_polynomial(&x, &y, 1.0).unwrap();
    let net = fit_mlp(&x, &y, &MlpTrainConfig { hidden: 30, seed: 3, ..MlpTrainConfig::default() }).unwrap();
    let (cp, cn) = (mean_channel_cc(&poly, &xt, &truth), mean_channel_cc(&net, &xt, &truth));
    assert!(cn > cp, "mlp {cn} vs polynomial {cp}");
}

#[test]
fn pool_rejects_mismatched_channels() {
    let a = EncoderModel::linear("a", RowMatrix::zeros(3, 2), NoiseModel::isotropic(3, 1.0));
    let b = EncoderModel::linear("b", RowMatrix::zeros(4, 2), NoiseModel::isotropic(4, 1.0));
    assert!(matches!(EncoderPool::new(vec![a.clone(), b]), Err(Error::ShapeMismatch(_))));
    assert!(matches!(EncoderPool::new(vec![]), Err(Error::EmptyPool)));
    assert_eq!(EncoderPool::new(vec![a]).unwrap().len(), 1);
}

#[test]
fn pool_file_round_trip() {
    let x = random_states(40, 1, 1.0);
    let y = apply(|s| vec![s.vx, s.vy], &x, 0.1, 2);
    let pool = EncoderPool::new(vec![fit_linear(&x, &y).unwrap(), fit_polynomial(&x, &y, 1.0).unwrap()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.json");
    save_pool(&pool, &path).unwrap();
    assert_eq!(load_pool(&path).unwrap(), pool);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"rows\"") && text.contains("\"sigma2\"") && text.contains("\"kind\": \"polynomial\""));
}

#[test]
fn weight_decay_modes_on_a_flat_loss() {
    let (lr, wd) = (0.01, 1e-4);
    let zero = [0.0, 0.0];

    let mut p = vec![2.0, -3.0];
    mlp::Adam::new(2).step(&mut p, &zero, lr, wd, DecayMode::Decoupled);
    assert!((p[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    assert!((p[1] + 3.0 * (1.0 - lr * wd)).abs() < 1e-15);

    // the L2 gradient is rescaled by the second moment, so the first step is ~lr
    let mut p = vec![2.0, -3.0];
    mlp::Adam::new(2).step(&mut p, &zero, lr, wd, DecayMode::Coupled);
    let g = [wd * 2.0, wd * -3.0];
    for (v, (start, gi)) in p.iter().zip([2.0, -3.0].iter().zip(g)) {
        let expected = start - lr * gi / (gi.abs() + 1e-8);
        assert!((v - expected).abs() < 1e-15);
    }
}
