//! Dynamic-ensemble particle filter.
//!
//! One particle cloud is propagated through the transition model and scored
//! under every encoder in the pool. Each encoder keeps its own importance
//! weights over the shared cloud; the encoders themselves are weighted by a
//! recursive model posterior whose prior is flattened each step by a
//! forgetting exponent. The decoded state is the mean of the mixture
//! `Σ_k p(m_k | y) · Σ_i ω_{k,i} δ(x − x_i)`.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderPool;
use crate::error::{Error, Result};
use crate::seed::{rng_from_seed, SimRng};
use crate::statespace::{predict_state, KinematicState, NeuralObservation, TransitionModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub forgetting_alpha: f64,
    pub weight_floor: f64,
    pub ess_threshold_fraction: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { n_particles: 500, forgetting_alpha: 0.98, weight_floor: 1e-6, ess_threshold_fraction: 0.5, seed: 0 }
    }
}

impl FilterConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::InvalidConfig("n_particles must be ≥ 2".into()));
        }
        if !(self.forgetting_alpha > 0.0 && self.forgetting_alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!("forgetting_alpha must lie in (0, 1], got {}", self.forgetting_alpha)));
        }
        if !(self.weight_floor >= 0.0) || self.weight_floor * pool_size as f64 >= 1.0 {
            return Err(Error::InvalidConfig(format!("weight_floor {} incompatible with a pool of {pool_size}", self.weight_floor)));
        }
        if !(0.0..=1.0).contains(&self.ess_threshold_fraction) {
            return Err(Error::InvalidConfig("ess_threshold_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// How the model posterior evolves between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosteriorMode {
    /// Forgetting prior followed by a Bayesian update.
    Dynamic,
    /// Posterior held at its initial value (static model averaging).
    Frozen,
}

#[derive(Debug, Clone)]
pub struct EnsembleFilterState {
    pub particles: Vec<KinematicState>,
    /// q rows of N normalized importance weights.
    pub per_model_weights: Vec<Vec<f64>>,
    pub combined_weights: Vec<f64>,
    pub model_posterior: Vec<f64>,
    pub t: u64,
    rng: SimRng,
}

impl EnsembleFilterState {
    pub fn effective_sample_size(&self) -> f64 {
        effective_sample_size(&self.combined_weights)
    }
}

/// Result of one filter step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub x_hat: KinematicState,
    pub model_posterior: Vec<f64>,
    /// Per-model log marginal likelihoods of the observation.
    pub log_marginals: Vec<f64>,
    /// ESS of the combined weights before any resampling.
    pub ess: f64,
    pub resampled: bool,
}

/// Draw the initial cloud around `x0` with the transition noise spread.
pub fn init_filter(pool: &EncoderPool, trans: &TransitionModel, cfg: &FilterConfig, x0: KinematicState) -> Result<EnsembleFilterState> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    cfg.validate(pool.len())?;
    let n = cfg.n_particles;
    let q = pool.len();
    let mut rng = rng_from_seed(cfg.seed);
    let sd = trans.noise_std();
    let particles = (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            KinematicState::new(x0.vx + sd[0] * a, x0.vy + sd[1] * b)
        })
        .collect();
    Ok(EnsembleFilterState {
        particles,
        per_model_weights: vec![vec![1.0 / n as f64; n]; q],
        combined_weights: vec![1.0 / n as f64; n],
        model_posterior: vec![1.0 / q as f64; q],
        t: 0,
        rng,
    })
}

/// `log Σ exp(x_i)`, with `−∞` for an empty or all-`−∞` input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalize log-weights into probabilities. Returns `None` when every
/// entry is `−∞` or the input contains NaN.
fn normalize_log(logw: &[f64]) -> Option<Vec<f64>> {
    let z = logsumexp(logw);
    if !z.is_finite() {
        return None;
    }
    Some(logw.iter().map(|l| (l - z).exp()).collect())
}

/// Raise entries to `floor` and rescale the rest so the vector still sums
/// to one. Requires `floor · len < 1`.
pub fn apply_floor(p: &mut [f64], floor: f64) {
    if floor <= 0.0 {
        return;
    }
    let mut pinned = vec![false; p.len()];
    loop {
        let mut changed = false;
        for (i, v) in p.iter().enumerate() {
            if !pinned[i] && *v < floor {
                pinned[i] = true;
                changed = true;
            }
        }
        let n_pinned = pinned.iter().filter(|b| **b).count();
        let free_mass: f64 = p.iter().zip(&pinned).filter(|(_, b)| !**b).map(|(v, _)| *v).sum();
        let target = 1.0 - n_pinned as f64 * floor;
        for (v, b) in p.iter_mut().zip(&pinned) {
            if *b {
                *v = floor;
            } else if free_mass > 0.0 {
                *v *= target / free_mass;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Forgetting prior: `p_k^α / Σ_j p_j^α`, floored and renormalized.
pub fn forgetting_prior(posterior_prev: &[f64], alpha: f64, weight_floor: f64) -> Vec<f64> {
    let logs: Vec<f64> = posterior_prev.iter().map(|p| alpha * p.ln()).collect();
    let mut out = normalize_log(&logs).unwrap_or_else(|| posterior_prev.to_vec());
    apply_floor(&mut out, weight_floor);
    out
}

/// Bayes update `prior_k · exp(log_marg_k)`, normalized in the log domain,
/// then floored. An uninformative (all `−∞`) update returns the prior.
pub fn model_posterior_update(prior: &[f64], log_marg: &[f64], weight_floor: f64) -> Vec<f64> {
    let logs: Vec<f64> = prior.iter().zip(log_marg).map(|(p, l)| p.ln() + l).collect();
    let mut out = normalize_log(&logs).unwrap_or_else(|| prior.to_vec());
    apply_floor(&mut out, weight_floor);
    out
}

/// Per-model `log Σ_i ω_{t−1,i} · p_k(y | x_i)` over the propagated cloud.
pub fn marginal_likelihood(pool: &EncoderPool, prev_weights: &[f64], predicted_particles: &[KinematicState], y: &NeuralObservation) -> Vec<f64> {
    let ll = particle_log_likelihoods(pool, predicted_particles, y);
    log_marginals(&ll, prev_weights)
}

fn particle_log_likelihoods(pool: &EncoderPool, particles: &[KinematicState], y: &NeuralObservation) -> Vec<Vec<f64>> {
    let mut buf = vec![0.0; pool.channels()];
    let mut scratch = Vec::new();
    pool.models.iter().map(|m| particles.iter().map(|x| m.log_likelihood_with(*x, &y.rates, &mut buf, &mut scratch)).collect()).collect()
}

fn log_marginals(ll: &[Vec<f64>], prev_weights: &[f64]) -> Vec<f64> {
    let logw: Vec<f64> = prev_weights.iter().map(|w| w.ln()).collect();
    let mut terms = vec![0.0; prev_weights.len()];
    ll.iter()
        .map(|row| {
            for i in 0..terms.len() {
                terms[i] = logw[i] + row[i];
            }
            logsumexp(&terms)
        })
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn dominant_model(model_posterior: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in model_posterior.iter().enumerate() {
        if *p > model_posterior[best] {
            best = i;
        }
    }
    best
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling with offset `u0 ∈ [0, 1)`; returns ancestor indices.
pub fn systematic_resample(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut idx = Vec::with_capacity(n);
    let mut cum = weights[0] / total;
    let mut j = 0;
    for i in 0..n {
        let u = (u0 + i as f64) / n as f64;
        while u > cum && j + 1 < n {
            j += 1;
            cum += weights[j] / total;
        }
        idx.push(j);
    }
    idx
}

/// A dynamic-ensemble filter instance bound to its pool and transition model.
#[derive(Debug, Clone)]
pub struct DyEnsembleFilter {
    pool: EncoderPool,
    trans: TransitionModel,
    cfg: FilterConfig,
    mode: PosteriorMode,
    initial_posterior: Vec<f64>,
    state: EnsembleFilterState,
}

impl DyEnsembleFilter {
    pub fn new(pool: EncoderPool, trans: TransitionModel, cfg: FilterConfig, x0: KinematicState) -> Result<Self> {
        let state = init_filter(&pool, &trans, &cfg, x0)?;
        let initial_posterior = state.model_posterior.clone();
        Ok(Self { pool, trans, cfg, mode: PosteriorMode::Dynamic, initial_posterior, state })
    }

    /// Static model averaging: the model posterior stays at `weights`
    /// (uniform when `None`) for the life of the filter.
    pub fn frozen(pool: EncoderPool, trans: TransitionModel, cfg: FilterConfig, x0: KinematicState, weights: Option<Vec<f64>>) -> Result<Self> {
        let mut f = Self::new(pool, trans, cfg, x0)?;
        if let Some(w) = weights {
            if w.len() != f.pool.len() {
                return Err(Error::ShapeMismatch(format!("{} frozen weights for a pool of {}", w.len(), f.pool.len())));
            }
            let s: f64 = w.iter().sum();
            if !(s > 0.0) || w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidConfig("frozen weights must be non-negative with positive sum".into()));
            }
            f.state.model_posterior = w.iter().map(|v| v / s).collect();
        }
        f.mode = PosteriorMode::Frozen;
        f.initial_posterior = f.state.model_posterior.clone();
        Ok(f)
    }

    pub fn pool(&self) -> &EncoderPool {
        &self.pool
    }

    pub fn transition(&self) -> &TransitionModel {
        &self.trans
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn mode(&self) -> PosteriorMode {
        self.mode
    }

    pub fn state(&self) -> &EnsembleFilterState {
        &self.state
    }

    /// Replace the particle cloud, e.g. to pin a test instance.
    pub fn set_particles(&mut self, particles: Vec<KinematicState>) -> Result<()> {
        if particles.len() != self.state.particles.len() {
            return Err(Error::ShapeMismatch("particle count differs from configuration".into()));
        }
        self.state.particles = particles;
        Ok(())
    }

    /// Redraw the cloud around `x0` and restore the initial posterior.
    /// The random stream continues rather than restarting.
    pub fn reset(&mut self, x0: KinematicState) {
        let n = self.cfg.n_particles;
        let sd = self.trans.noise_std();
        let rng = &mut self.state.rng;
        for p in self.state.particles.iter_mut() {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            *p = KinematicState::new(x0.vx + sd[0] * a, x0.vy + sd[1] * b);
        }
        for row in self.state.per_model_weights.iter_mut() {
            row.iter_mut().for_each(|w| *w = 1.0 / n as f64);
        }
        self.state.combined_weights.iter_mut().for_each(|w| *w = 1.0 / n as f64);
        self.state.model_posterior = self.initial_posterior.clone();
    }

    fn check_observation(&self, y: &NeuralObservation) -> Result<()> {
        if y.channels() != self.pool.channels() {
            return Err(Error::ShapeMismatch(format!("observation has {} channels, pool expects {}", y.channels(), self.pool.channels())));
        }
        if !y.is_finite() {
            return Err(Error::NonFiniteObservation);
        }
        Ok(())
    }

    /// One recursion with freshly drawn transition noise.
    pub fn step(&mut self, y: &NeuralObservation) -> Result<StepOutput> {
        self.check_observation(y)?;
        let sd = self.trans.noise_std();
        let rng = &mut self.state.rng;
        let noise: Vec<[f64; 2]> = (0..self.cfg.n_particles)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                [sd[0] * a, sd[1] * b]
            })
            .collect();
        self.step_with_noise(y, &noise)
    }

    /// One recursion using caller-supplied per-particle transition noise.
    pub fn step_with_noise(&mut self, y: &NeuralObservation, noise: &[[f64; 2]]) -> Result<StepOutput> {
        self.check_observation(y)?;
        let n = self.cfg.n_particles;
        if noise.len() != n {
            return Err(Error::ShapeMismatch(format!("{} noise samples for {n} particles", noise.len())));
        }
        let st = &mut self.state;

        for (p, e) in st.particles.iter_mut().zip(noise) {
            *p = predict_state(&self.trans, *p, Some(*e));
        }

        let ll = particle_log_likelihoods(&self.pool, &st.particles, y);
        let log_marg = log_marginals(&ll, &st.combined_weights);

        if self.mode == PosteriorMode::Dynamic {
            let prior = forgetting_prior(&st.model_posterior, self.cfg.forgetting_alpha, self.cfg.weight_floor);
            st.model_posterior = model_posterior_update(&prior, &log_marg, self.cfg.weight_floor);
        }

        let mut logw = vec![0.0; n];
        for (row, lk) in st.per_model_weights.iter_mut().zip(&ll) {
            for i in 0..n {
                logw[i] = row[i].ln() + lk[i];
            }
            match normalize_log(&logw) {
                Some(w) => *row = w,
                None => row.iter_mut().for_each(|w| *w = 1.0 / n as f64),
            }
        }

        st.combined_weights.iter_mut().for_each(|w| *w = 0.0);
        for (pk, row) in st.model_posterior.iter().zip(&st.per_model_weights) {
            for (c, w) in st.combined_weights.iter_mut().zip(row) {
                *c += pk * w;
            }
        }
        let total: f64 = st.combined_weights.iter().sum();
        st.combined_weights.iter_mut().for_each(|w| *w /= total);

        let mut x_hat = KinematicState::ZERO;
        for (p, w) in st.particles.iter().zip(&st.combined_weights) {
            x_hat.vx += w * p.vx;
            x_hat.vy += w * p.vy;
        }

        let ess = effective_sample_size(&st.combined_weights);
        let resampled = ess < self.cfg.ess_threshold_fraction * n as f64;
        if resampled {
            let u0: f64 = st.rng.random();
            let idx = systematic_resample(&st.combined_weights, u0);
            st.particles = idx.iter().map(|&i| st.particles[i]).collect();
            let u = 1.0 / n as f64;
            st.combined_weights.iter_mut().for_each(|w| *w = u);
            for row in st.per_model_weights.iter_mut() {
                row.iter_mut().for_each(|w| *w = u);
            }
        }
        st.t += 1;

        if !x_hat.is_finite() {
            return Err(Error::NumericalFailure(format!("non-finite state estimate at t = {}", st.t)));
        }
        Ok(StepOutput { x_hat, model_posterior: st.model_posterior.clone(), log_marginals: log_marg, ess, resampled })
    }
}

/// One JSON-lines telemetry record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub t: u64,
    pub x_hat: [f64; 2],
    pub model_posterior: Vec<f64>,
    pub ess: f64,
    pub resampled: bool,
}

impl TelemetryRecord {
    pub fn from_step(t: u64, out: &StepOutput) -> Self {
        Self { t, x_hat: out.x_hat.to_array(), model_posterior: out.model_posterior.clone(), ess: out.ess, resampled: out.resampled }
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        serde_json::to_writer(&mut *w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}
