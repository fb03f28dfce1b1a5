//! Single-hidden-layer tanh network encoder trained with Adam, weight decay
//! and early stopping.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_pairs, observation_matrix, EncoderKind, EncoderModel, FitMeta, NoiseModel};
use crate::error::{Error, Result};
use crate::seed::{child_seed, rng_from_seed};
use crate::statespace::{KinematicState, NeuralObservation};

/// `y = W2·tanh(W1·x + b1) + b2`, all row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: usize,
    pub channels: usize,
    /// hidden × 2
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// channels × hidden
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(hidden: usize, channels: usize) -> Self {
        Self { hidden, channels, w1: vec![0.0; hidden * 2], b1: vec![0.0; hidden], w2: vec![0.0; channels * hidden], b2: vec![0.0; channels] }
    }

    /// Glorot-normal weights, zero biases.
    pub fn init(hidden: usize, channels: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut m = Self::zeros(hidden, channels);
        let s1 = Normal::new(0.0, (2.0 / (2 + hidden) as f64).sqrt()).unwrap();
        let s2 = Normal::new(0.0, (2.0 / (hidden + channels) as f64).sqrt()).unwrap();
        m.w1.iter_mut().for_each(|w| *w = s1.sample(&mut rng));
        m.w2.iter_mut().for_each(|w| *w = s2.sample(&mut rng));
        m
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters flattened in the order `w1, b1, w2, b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.extend_from_slice(&self.b2);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
    }

    pub fn forward_into(&self, x: KinematicState, out: &mut [f64], hidden: &mut Vec<f64>) {
        hidden.resize(self.hidden, 0.0);
        for (j, h) in hidden.iter_mut().enumerate() {
            *h = (self.w1[2 * j] * x.vx + self.w1[2 * j + 1] * x.vy + self.b1[j]).tanh();
        }
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.w2[c * self.hidden..(c + 1) * self.hidden];
            let mut s = self.b2[c];
            for (w, h) in row.iter().zip(hidden.iter()) {
                s += w * h;
            }
            *o = s;
        }
    }

    pub fn forward(&self, x: KinematicState) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        let mut h = Vec::new();
        self.forward_into(x, &mut out, &mut h);
        out
    }

    /// Mean squared error over samples and channels; accumulates its gradient
    /// (same layout as `params`) into `grad` when given.
    pub fn mse_and_grad(&self, x: &[KinematicState], y: &[&[f64]], mut grad: Option<&mut [f64]>) -> f64 {
        let (h_n, c_n) = (self.hidden, self.channels);
        let scale = 1.0 / (x.len() * c_n) as f64;
        let mut hidden = vec![0.0; h_n];
        let mut out = vec![0.0; c_n];
        let mut dh = vec![0.0; h_n];
        let mut loss = 0.0;
        let (ow1, ob1, ow2) = (0, h_n * 2, h_n * 3);
        let ob2 = ow2 + c_n * h_n;
        for (xi, yi) in x.iter().zip(y) {
            self.forward_into(*xi, &mut out, &mut hidden);
            for c in 0..c_n {
                let e = out[c] - yi[c];
                loss += e * e;
                out[c] = 2.0 * e * scale;
            }
            if let Some(g) = grad.as_deref_mut() {
                dh.iter_mut().for_each(|d| *d = 0.0);
                for c in 0..c_n {
                    let dy = out[c];
                    g[ob2 + c] += dy;
                    let row = &self.w2[c * h_n..(c + 1) * h_n];
                    let grow = &mut g[ow2 + c * h_n..ow2 + (c + 1) * h_n];
                    for j in 0..h_n {
                        grow[j] += dy * hidden[j];
                        dh[j] += dy * row[j];
                    }
                }
                for j in 0..h_n {
                    let dz = dh[j] * (1.0 - hidden[j] * hidden[j]);
                    g[ow1 + 2 * j] += dz * xi.vx;
                    g[ow1 + 2 * j + 1] += dz * xi.vy;
                    g[ob1 + j] += dz;
                }
            }
        }
        loss * scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpTrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decay: DecayMode,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Fraction of samples, taken from the end, held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 30,
            lr: 0.01,
            weight_decay: 1e-4,
            decay: DecayMode::Coupled,
            max_epochs: 500,
            patience: 10,
            batch_size: 64,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

/// How weight decay enters the Adam update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Shrink parameters directly, outside the adaptive scaling.
    Decoupled,
    /// Add an L2 term to the gradient before the moment estimates.
    Coupled,
}

pub(super) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(super) fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub(super) fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64, mode: DecayMode) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = match mode {
                DecayMode::Coupled => grad[i] + weight_decay * params[i],
                DecayMode::Decoupled => grad[i],
            };
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            let shrink = if mode == DecayMode::Decoupled { weight_decay * params[i] } else { 0.0 };
            params[i] -= lr * (mh / (vh.sqrt() + Self::EPS) + shrink);
        }
    }
}

/// Train a tanh MLP encoder with mini-batch Adam and early stopping on a
/// chronological hold-out tail. Deterministic for a given `cfg.seed`.
pub fn fit_mlp(x: &[KinematicState], y: &[NeuralObservation], cfg: &MlpTrainConfig) -> Result<EncoderModel> {
    let channels = check_pairs(x, y, 10)?;
    if cfg.hidden == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("hidden and batch_size must be positive".into()));
    }
    let n = x.len();
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let n_train = n - n_val;
    let rows: Vec<&[f64]> = y.iter().map(|o| o.rates.as_slice()).collect();

    let mut net = Mlp::init(cfg.hidden, channels, cfg.seed);
    let mut params = net.params();
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut wait = 0;
    let mut epochs_run = 0;
    let mut adam = Adam::new(params.len());
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut rng = rng_from_seed(child_seed(cfg.seed, "mlp-shuffle"));
    let mut bx = Vec::with_capacity(cfg.batch_size);
    let mut by: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.push(x[i]);
                by.push(rows[i]);
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = net.mse_and_grad(&bx, &by, Some(&mut grad));
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, detail: format!("batch loss {loss}") });
            }
            adam.step(&mut params, &grad, cfg.lr, cfg.weight_decay, cfg.decay);
            net.set_params(&params);
        }
        epochs_run = epoch + 1;
        let val = net.mse_and_grad(&x[n_train..], &rows[n_train..], None);
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, detail: format!("validation loss {val}") });
        }
        if val < best_val {
            best_val = val;
            best.copy_from_slice(&params);
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }
    if cfg.max_epochs > 0 {
        net.set_params(&best);
    }

    let targets = observation_matrix(y);
    let mut residuals = targets.clone();
    let mut out = vec![0.0; channels];
    let mut h = Vec::new();
    for r in 0..n {
        net.forward_into(x[r], &mut out, &mut h);
        for c in 0..channels {
            residuals[(r, c)] -= out[c];
        }
    }
    let noise = NoiseModel::from_residuals(&residuals);
    let mut model = EncoderModel::new(format!("mlp{}", cfg.hidden), EncoderKind::Mlp(net), noise);
    model.meta = FitMeta { seed: Some(cfg.seed), epochs_run: Some(epochs_run), n_samples: n, ..FitMeta::default() };
    Ok(model)
}
