//! Kinematic state, neural observation, and the linear-Gaussian transition
//! model shared by every decoder.

use std::ops::{Add, Mul, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression;

/// Floor applied to every fitted variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// 2-D cursor velocity in screen units per second.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KinematicState {
    pub vx: f64,
    pub vy: f64,
}

impl KinematicState {
    pub const ZERO: KinematicState = KinematicState { vx: 0.0, vy: 0.0 };

    pub fn new(vx: f64, vy: f64) -> Self {
        Self { vx, vy }
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        Self { vx: a[0], vy: a[1] }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.vx, self.vy]
    }

    pub fn norm(self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn dot(self, other: Self) -> f64 {
        self.vx * other.vx + self.vy * other.vy
    }

    pub fn is_finite(self) -> bool {
        self.vx.is_finite() && self.vy.is_finite()
    }
}

impl Add for KinematicState {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.vx + o.vx, self.vy + o.vy)
    }
}

impl Sub for KinematicState {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.vx - o.vx, self.vy - o.vy)
    }
}

impl Mul<f64> for KinematicState {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.vx * s, self.vy * s)
    }
}

/// Smoothed per-channel firing rates for one bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralObservation {
    pub rates: Vec<f64>,
}

impl NeuralObservation {
    pub fn new(rates: Vec<f64>) -> Self {
        Self { rates }
    }

    pub fn channels(&self) -> usize {
        self.rates.len()
    }

    pub fn is_finite(&self) -> bool {
        self.rates.iter().all(|r| r.is_finite())
    }
}

/// `x_t = A·x_{t-1} + b + u`, `u ~ N(0, diag(sigma_u))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    /// Row-major 2×2.
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    /// Per-component noise variances.
    pub sigma_u: [f64; 2],
    /// Set when the least-squares fit was rank-deficient and the
    /// `0.99·I` fallback was used instead.
    #[serde(default)]
    pub fallback: bool,
}

impl TransitionModel {
    pub fn new(a: [[f64; 2]; 2], b: [f64; 2], sigma_u: [f64; 2]) -> Self {
        Self { a, b, sigma_u, fallback: false }
    }

    pub fn identity(sigma_u: [f64; 2]) -> Self {
        Self::new([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0], sigma_u)
    }

    /// `A·x + b`.
    pub fn mean(&self, x: KinematicState) -> KinematicState {
        KinematicState::new(self.a[0][0] * x.vx + self.a[0][1] * x.vy + self.b[0], self.a[1][0] * x.vx + self.a[1][1] * x.vy + self.b[1])
    }

    pub fn noise_std(&self) -> [f64; 2] {
        [self.sigma_u[0].sqrt(), self.sigma_u[1].sqrt()]
    }

    /// Largest eigenvalue modulus of `A`.
    pub fn spectral_radius(&self) -> f64 {
        let [[a, b], [c, d]] = self.a;
        let tr = a + d;
        let det = a * d - b * c;
        let disc = tr * tr / 4.0 - det;
        if disc >= 0.0 {
            (tr / 2.0).abs() + disc.sqrt()
        } else {
            det.sqrt()
        }
    }

    /// `A` rescaled so its spectral radius is at most `max_radius`.
    pub fn stabilized(mut self, max_radius: f64) -> Self {
        let r = self.spectral_radius();
        if r > max_radius {
            let k = max_radius / r;
            self.a.iter_mut().flatten().for_each(|v| *v *= k);
        }
        self
    }
}

/// Propagate `x_prev` one step; without a noise sample this is the mean.
pub fn predict_state(model: &TransitionModel, x_prev: KinematicState, noise_sample: Option<[f64; 2]>) -> KinematicState {
    let m = model.mean(x_prev);
    match noise_sample {
        Some(n) => KinematicState::new(m.vx + n[0], m.vy + n[1]),
        None => m,
    }
}

/// Least-squares fit of `(A, b)` over consecutive pairs of one trajectory.
pub fn fit_transition(states: &[KinematicState]) -> Result<TransitionModel> {
    fit_transition_segments(&[states])
}

/// Fit over several independent trajectories; pairs never straddle two
/// segments. Segments shorter than two states contribute nothing.
pub fn fit_transition_segments(segments: &[&[KinematicState]]) -> Result<TransitionModel> {
    let total: usize = segments.iter().map(|s| s.len()).sum();
    let pairs: Vec<(KinematicState, KinematicState)> = segments.iter().flat_map(|s| s.windows(2).map(|w| (w[0], w[1]))).collect();
    if total < 3 || pairs.len() < 2 {
        return Err(Error::TooFewSamples { needed: 3, got: total });
    }
    if pairs.iter().any(|(p, c)| !p.is_finite() || !c.is_finite()) {
        return Err(Error::NumericalFailure("non-finite state in transition fit".into()));
    }

    let n = pairs.len();
    let mut x = DMatrix::zeros(n, 3);
    let mut y = DMatrix::zeros(n, 2);
    for (r, (prev, cur)) in pairs.iter().enumerate() {
        x[(r, 0)] = prev.vx;
        x[(r, 1)] = prev.vy;
        x[(r, 2)] = 1.0;
        y[(r, 0)] = cur.vx;
        y[(r, 1)] = cur.vy;
    }

    let xtx = x.transpose() * &x;
    let (a, b, fallback) = if regression::is_rank_deficient(&xtx) {
        ([[0.99, 0.0], [0.0, 0.99]], [0.0, 0.0], true)
    } else {
        let sol = regression::ridge(&x, &y, 0.0);
        let c = sol.coef;
        ([[c[(0, 0)], c[(1, 0)]], [c[(0, 1)], c[(1, 1)]]], [c[(2, 0)], c[(2, 1)]], false)
    };

    let mut model = TransitionModel { a, b, sigma_u: [0.0; 2], fallback };
    let mut ss = [0.0; 2];
    for (prev, cur) in &pairs {
        let r = *cur - model.mean(*prev);
        ss[0] += r.vx * r.vx;
        ss[1] += r.vy * r.vy;
    }
    model.sigma_u = [(ss[0] / n as f64).max(VARIANCE_FLOOR), (ss[1] / n as f64).max(VARIANCE_FLOOR)];
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn simulate(model: &TransitionModel, x0: KinematicState, n: usize, noise: f64, seed: u64) -> Vec<KinematicState> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, noise).unwrap();
        let mut xs = vec![x0];
        for _ in 1..n {
            let e = if noise > 0.0 { Some([d.sample(&mut rng), d.sample(&mut rng)]) } else { None };
            xs.push(predict_state(model, *xs.last().unwrap(), e));
        }
        xs
    }

    #[test]
    fn constant_sequence_takes_fallback() {
        let xs = vec![KinematicState::ZERO; 10];
        let m = fit_transition(&xs).unwrap();
        assert!(m.fallback);
        assert_eq!(m.b, [0.0, 0.0]);
        assert_eq!(m.sigma_u, [VARIANCE_FLOOR, VARIANCE_FLOOR]);
    }

    #[test]
    fn too_few_samples() {
        let xs = vec![KinematicState::ZERO; 2];
        assert!(matches!(fit_transition(&xs), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn scalar_decay_from_one_start_is_degenerate() {
        // A single trajectory of x_t = 0.9·x_{t-1} + (0.1, 0) lies on a line,
        // so (A, b) is not identifiable from it.
        let truth = TransitionModel::new([[0.9, 0.0], [0.0, 0.9]], [0.1, 0.0], [1e-8; 2]);
        let xs = simulate(&truth, KinematicState::new(5.0, 3.0), 50, 0.0, 0);
        assert!(fit_transition(&xs).unwrap().fallback);
    }

    #[test]
    fn noiseless_diagonal_system_recovered_from_two_segments() {
        let truth = TransitionModel::new([[0.9, 0.0], [0.0, 0.9]], [0.1, 0.0], [1e-8; 2]);
        let s1 = simulate(&truth, KinematicState::new(5.0, 3.0), 30, 0.0, 0);
        let s2 = simulate(&truth, KinematicState::new(-2.0, 4.0), 30, 0.0, 0);
        let m = fit_transition_segments(&[&s1, &s2]).unwrap();
        assert!(!m.fallback);
        for r in 0..2 {
            for c in 0..2 {
                assert!((m.a[r][c] - truth.a[r][c]).abs() < 1e-6, "{:?}", m.a);
            }
        }
        assert!((m.b[0] - 0.1).abs() < 1e-6 && m.b[1].abs() < 1e-6);
    }

    #[test]
    fn noiseless_rotation_recovered() {
        let truth = TransitionModel::new([[0.9, 0.1], [-0.1, 0.9]], [0.1, 0.0], [1e-8; 2]);
        let xs = simulate(&truth, KinematicState::new(5.0, 3.0), 40, 0.0, 0);
        let m = fit_transition(&xs).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((m.a[r][c] - truth.a[r][c]).abs() < 1e-6);
            }
        }
        assert!((m.b[0] - 0.1).abs() < 1e-6 && m.b[1].abs() < 1e-6);
    }

    #[test]
    fn noisy_fit_recovers_matrix() {
        // 1000 states, σ_u = 0.05. Tolerance 0.02 follows from the OLS standard
        // error σ/(√n·std(x)) ≈ 0.05/(√999·0.16) ≈ 0.01 for this process.
        let truth = TransitionModel::new([[0.95, 0.02], [-0.02, 0.95]], [0.0, 0.0], [0.0025; 2]);
        let xs = simulate(&truth, KinematicState::ZERO, 1000, 0.05, 11);
        let m = fit_transition(&xs).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((m.a[r][c] - truth.a[r][c]).abs() < 0.02, "{:?}", m.a);
            }
        }
        assert!((m.sigma_u[0] - 0.0025).abs() < 0.0005);
    }

    #[test]
    fn predict_examples() {
        let id = TransitionModel::identity([1.0, 1.0]);
        assert_eq!(predict_state(&id, KinematicState::new(1.0, 2.0), None), KinematicState::new(1.0, 2.0));
        let m = TransitionModel::new([[0.5, 0.0], [0.0, 0.5]], [1.0, 0.0], [1.0, 1.0]);
        assert_eq!(predict_state(&m, KinematicState::new(2.0, 2.0), None), KinematicState::new(2.0, 1.0));
        let p = predict_state(&m, KinematicState::new(2.0, 2.0), Some([0.1, -0.1]));
        assert!((p.vx - 2.1).abs() < 1e-15 && (p.vy - 0.9).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn prediction_difference_is_linear(
            a in prop::array::uniform4(-2.0f64..2.0),
            b in prop::array::uniform2(-1.0f64..1.0),
            x1 in prop::array::uniform2(-5.0f64..5.0),
            x2 in prop::array::uniform2(-5.0f64..5.0),
        ) {
            let m = TransitionModel::new([[a[0], a[1]], [a[2], a[3]]], b, [1.0, 1.0]);
            let p1 = predict_state(&m, KinematicState::from_array(x1), None);
            let p2 = predict_state(&m, KinematicState::from_array(x2), None);
            let d = KinematicState::from_array(x1) - KinematicState::from_array(x2);
            let expected = [a[0] * d.vx + a[1] * d.vy, a[2] * d.vx + a[3] * d.vy];
            prop_assert!(((p1 - p2).vx - expected[0]).abs() < 1e-9);
            prop_assert!(((p1 - p2).vy - expected[1]).abs() < 1e-9);
        }
    }
}
