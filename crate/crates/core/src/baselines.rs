//! Reference decoders: velocity Kalman filter, single-model particle
//! filters and static Bayesian model averaging.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::encoders::{check_pairs, observation_matrix, EncoderModel, EncoderPool, NoiseModel, RowMatrix};
use crate::ensemble::{logsumexp, DyEnsembleFilter, FilterConfig, StepOutput};
use crate::error::{Error, Result};
use crate::regression;
use crate::statespace::{fit_transition_segments, KinematicState, NeuralObservation, TransitionModel, VARIANCE_FLOOR};

/// Linear-Gaussian velocity model `x_t = A·x_{t−1} + b + p`, `y_t = H·x_t + q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanModel {
    pub transition: TransitionModel,
    /// C × 2
    pub h: RowMatrix,
    /// Diagonal of the observation covariance.
    pub q_noise: Vec<f64>,
}

impl KalmanModel {
    pub fn channels(&self) -> usize {
        self.h.rows
    }

    /// Diagonal process covariance built from the transition residuals.
    pub fn p_noise(&self) -> Matrix2<f64> {
        Matrix2::new(self.transition.sigma_u[0], 0.0, 0.0, self.transition.sigma_u[1])
    }

    /// The observation model as a linear encoder, for sharing with the
    /// particle filters.
    pub fn as_encoder(&self) -> EncoderModel {
        EncoderModel::linear("kalman-h", self.h.clone(), NoiseModel::new(self.q_noise.clone()))
    }
}

/// Least-squares fit of a single aligned sequence.
pub fn fit_kalman(states: &[KinematicState], observations: &[NeuralObservation]) -> Result<KalmanModel> {
    fit_kalman_segments(&[(states, observations)])
}

/// Fit over independent aligned segments (e.g. trials). `H` and the
/// observation noise pool every bin; the transition never links segments.
pub fn fit_kalman_segments(segments: &[(&[KinematicState], &[NeuralObservation])]) -> Result<KalmanModel> {
    for (x, y) in segments {
        if x.len() != y.len() {
            return Err(Error::ShapeMismatch(format!("{} states vs {} observations", x.len(), y.len())));
        }
    }
    let xs: Vec<KinematicState> = segments.iter().flat_map(|(x, _)| x.iter().cloned()).collect();
    let ys: Vec<NeuralObservation> = segments.iter().flat_map(|(_, y)| y.iter().cloned()).collect();
    check_pairs(&xs, &ys, 3)?;
    let state_segments: Vec<&[KinematicState]> = segments.iter().map(|(x, _)| *x).collect();
    let transition = fit_transition_segments(&state_segments)?;

    let design = DMatrix::from_fn(xs.len(), 2, |r, c| if c == 0 { xs[r].vx } else { xs[r].vy });
    let targets = observation_matrix(&ys);
    let sol = regression::ridge(&design, &targets, 0.0);
    let residuals = &targets - &design * &sol.coef;
    let c = targets.ncols();
    let mut h = RowMatrix::zeros(c, 2);
    for ch in 0..c {
        h.set(ch, 0, sol.coef[(0, ch)]);
        h.set(ch, 1, sol.coef[(1, ch)]);
    }
    let n = xs.len() as f64;
    let q_noise = (0..c).map(|ch| (residuals.column(ch).iter().map(|r| r * r).sum::<f64>() / n).max(VARIANCE_FLOOR)).collect();
    Ok(KalmanModel { transition, h, q_noise })
}

/// Running predict/update recursion over a `KalmanModel`.
#[derive(Debug, Clone)]
pub struct KalmanFilter {
    model: KalmanModel,
    mean: Vector2<f64>,
    cov: Matrix2<f64>,
    h: DMatrix<f64>,
}

impl KalmanFilter {
    /// Starts at `x0` with covariance equal to the process noise.
    pub fn new(model: KalmanModel, x0: KinematicState) -> Self {
        let cov = model.p_noise();
        Self::with_covariance(model, x0, cov)
    }

    pub fn with_covariance(model: KalmanModel, x0: KinematicState, cov: Matrix2<f64>) -> Self {
        let h = DMatrix::from_fn(model.h.rows, 2, |r, c| model.h.get(r, c));
        Self { model, mean: Vector2::new(x0.vx, x0.vy), cov, h }
    }

    pub fn model(&self) -> &KalmanModel {
        &self.model
    }

    pub fn mean(&self) -> KinematicState {
        KinematicState::new(self.mean[0], self.mean[1])
    }

    pub fn covariance(&self) -> Matrix2<f64> {
        self.cov
    }

    pub fn reset(&mut self, x0: KinematicState) {
        self.mean = Vector2::new(x0.vx, x0.vy);
        self.cov = self.model.p_noise();
    }

    /// Predict with the transition model, then update on `y`.
    pub fn step(&mut self, y: &NeuralObservation) -> Result<KinematicState> {
        let c = self.model.channels();
        if y.channels() != c {
            return Err(Error::ShapeMismatch(format!("observation has {} channels, model expects {c}", y.channels())));
        }
        if !y.is_finite() {
            return Err(Error::NonFiniteObservation);
        }
        let t = &self.model.transition;
        let a = Matrix2::new(t.a[0][0], t.a[0][1], t.a[1][0], t.a[1][1]);
        let mean = a * self.mean + Vector2::new(t.b[0], t.b[1]);
        let cov = a * self.cov * a.transpose() + self.model.p_noise();

        let h = &self.h;
        let cov_d = DMatrix::from_fn(2, 2, |r, k| cov[(r, k)]);
        let hp = h * &cov_d;
        let mut s = &hp * h.transpose();
        for ch in 0..c {
            s[(ch, ch)] += self.model.q_noise[ch];
        }
        let chol = s.cholesky().ok_or_else(|| Error::NumericalFailure("innovation covariance is not positive definite".into()))?;
        // K = P·Hᵀ·S⁻¹, so Kᵀ = S⁻¹·H·P.
        let kt = chol.solve(&hp);
        let yv = DVector::from_column_slice(&y.rates);
        let innov = yv - h * DVector::from_column_slice(mean.as_slice());
        let corr = kt.transpose() * innov;
        let new_mean = mean + Vector2::new(corr[0], corr[1]);
        let kh = kt.transpose() * h;
        let ikh = Matrix2::identity() - Matrix2::new(kh[(0, 0)], kh[(0, 1)], kh[(1, 0)], kh[(1, 1)]);
        let mut new_cov = ikh * cov;
        new_cov = (new_cov + new_cov.transpose()) * 0.5;

        if !new_mean.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite Kalman mean".into()));
        }
        self.mean = new_mean;
        self.cov = new_cov;
        Ok(self.mean())
    }
}

/// Run a fresh Kalman filter over a sequence of observations.
pub fn kalman_run(model: &KalmanModel, x0: KinematicState, observations: &[NeuralObservation]) -> Result<Vec<KinematicState>> {
    let mut kf = KalmanFilter::new(model.clone(), x0);
    observations.iter().map(|y| kf.step(y)).collect()
}

/// Particle filter over a single encoder: the ensemble filter with a pool of one.
pub fn single_model_filter(model: EncoderModel, trans: TransitionModel, cfg: FilterConfig, x0: KinematicState) -> Result<DyEnsembleFilter> {
    DyEnsembleFilter::new(EncoderPool::new(vec![model])?, trans, cfg, x0)
}

pub fn single_model_pf(
    model: EncoderModel,
    trans: TransitionModel,
    cfg: FilterConfig,
    x0: KinematicState,
    observations: &[NeuralObservation],
) -> Result<Vec<KinematicState>> {
    let mut f = single_model_filter(model, trans, cfg, x0)?;
    observations.iter().map(|y| f.step(y).map(|o| o.x_hat)).collect()
}

/// Static model averaging: fixed model weights over the shared cloud.
pub fn static_bma_filter(
    pool: EncoderPool,
    trans: TransitionModel,
    cfg: FilterConfig,
    x0: KinematicState,
    weights: Option<Vec<f64>>,
) -> Result<DyEnsembleFilter> {
    DyEnsembleFilter::frozen(pool, trans, cfg, x0, weights)
}

/// One static-averaging step; the filter must have been built frozen.
pub fn static_bma_step(filter: &mut DyEnsembleFilter, y: &NeuralObservation) -> Result<StepOutput> {
    debug_assert_eq!(filter.mode(), crate::ensemble::PosteriorMode::Frozen);
    filter.step(y)
}

/// Classical recursive model posterior without forgetting:
/// `p(m_k | y_{0:t}) ∝ p(m_k) · Π_s p_k(y_s | y_{0:s−1})`.
pub fn bma_posterior(prior: &[f64], log_marginals: &[Vec<f64>]) -> Vec<f64> {
    let mut acc: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    for lm in log_marginals {
        for (a, l) in acc.iter_mut().zip(lm) {
            *a += l;
        }
    }
    let z = logsumexp(&acc);
    acc.iter().map(|a| (a - z).exp()).collect()
}

#[cfg(test)]
mod tests;
