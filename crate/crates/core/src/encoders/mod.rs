//! Encoder pool: models mapping velocity to expected firing rates, each with
//! a diagonal Gaussian residual noise model.

mod io;
pub mod mlp;

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression;
use crate::statespace::{KinematicState, NeuralObservation, VARIANCE_FLOOR};

pub use io::{load_encoder, load_pool, save_encoder, save_pool};
pub use mlp::{fit_mlp, DecayMode, Mlp, MlpTrainConfig};

/// Dense row-major matrix used for stored encoder parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        Self { rows: rows.len(), cols, data: rows.iter().flat_map(|r| r.iter().cloned()).collect() }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Per-channel residual variances with cached log-density terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "NoiseRepr", into = "NoiseRepr")]
pub struct NoiseModel {
    sigma2: Vec<f64>,
    inv_two_sigma2: Vec<f64>,
    log_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct NoiseRepr {
    sigma2: Vec<f64>,
}

impl From<NoiseRepr> for NoiseModel {
    fn from(r: NoiseRepr) -> Self {
        NoiseModel::new(r.sigma2)
    }
}

impl From<NoiseModel> for NoiseRepr {
    fn from(n: NoiseModel) -> Self {
        NoiseRepr { sigma2: n.sigma2 }
    }
}

impl NoiseModel {
    /// Variances below `VARIANCE_FLOOR` are raised to it.
    pub fn new(sigma2: Vec<f64>) -> Self {
        let sigma2: Vec<f64> = sigma2.into_iter().map(|s| if s.is_nan() { VARIANCE_FLOOR } else { s.max(VARIANCE_FLOOR) }).collect();
        let inv_two_sigma2 = sigma2.iter().map(|s| 0.5 / s).collect();
        let log_norm = sigma2.iter().map(|s| -0.5 * (2.0 * PI * s).ln()).sum();
        Self { sigma2, inv_two_sigma2, log_norm }
    }

    pub fn isotropic(channels: usize, sigma2: f64) -> Self {
        Self::new(vec![sigma2; channels])
    }

    /// Mean squared residual per channel (zero-mean noise MLE).
    pub fn from_residuals(residuals: &DMatrix<f64>) -> Self {
        let n = residuals.nrows().max(1) as f64;
        let s = (0..residuals.ncols()).map(|c| residuals.column(c).iter().map(|r| r * r).sum::<f64>() / n).collect();
        Self::new(s)
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn channels(&self) -> usize {
        self.sigma2.len()
    }

    /// `Σ_c −½·log(2π·σ²_c)`.
    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    #[inline]
    pub(crate) fn inv_two_sigma2(&self) -> &[f64] {
        &self.inv_two_sigma2
    }
}

/// Provenance of a fit, stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub seed: Option<u64>,
    pub ridge_lambda: Option<f64>,
    pub epochs_run: Option<usize>,
    pub n_samples: usize,
    #[serde(default)]
    pub singular: bool,
}

/// Options shared by the closed-form fits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    /// Adds a per-channel intercept column.
    #[serde(default)]
    pub intercept: bool,
    /// Adds the `vx·vy` feature to the polynomial encoder.
    #[serde(default)]
    pub cross_term: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    /// `y = W·x (+ bias)`; `w` is C×2.
    Linear {
        w: RowMatrix,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
    },
    /// `y = W2·x² + W1·x (+ w_cross·vx·vy) (+ bias)` with elementwise squares.
    Polynomial {
        w2: RowMatrix,
        w1: RowMatrix,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        w_cross: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
        ridge_lambda: f64,
    },
    /// One tanh hidden layer.
    Mlp(Mlp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub id: String,
    #[serde(flatten)]
    pub kind: EncoderKind,
    pub noise: NoiseModel,
    #[serde(default)]
    pub meta: FitMeta,
}

impl EncoderModel {
    pub fn new(id: impl Into<String>, kind: EncoderKind, noise: NoiseModel) -> Self {
        Self { id: id.into(), kind, noise, meta: FitMeta::default() }
    }

    pub fn linear(id: impl Into<String>, w: RowMatrix, noise: NoiseModel) -> Self {
        Self::new(id, EncoderKind::Linear { w, bias: None }, noise)
    }

    pub fn channels(&self) -> usize {
        match &self.kind {
            EncoderKind::Linear { w, .. } => w.rows,
            EncoderKind::Polynomial { w1, .. } => w1.rows,
            EncoderKind::Mlp(m) => m.channels,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            EncoderKind::Linear { .. } => "linear",
            EncoderKind::Polynomial { .. } => "polynomial",
            EncoderKind::Mlp(_) => "mlp",
        }
    }

    /// Deterministic mean prediction `m_k(x)`.
    pub fn encode(&self, x: KinematicState) -> Vec<f64> {
        let mut out = vec![0.0; self.channels()];
        let mut scratch = Vec::new();
        self.encode_into(x, &mut out, &mut scratch);
        out
    }

    pub fn encode_into(&self, x: KinematicState, out: &mut [f64], scratch: &mut Vec<f64>) {
        match &self.kind {
            EncoderKind::Linear { w, bias } => {
                for (c, o) in out.iter_mut().enumerate() {
                    let r = w.row(c);
                    *o = r[0] * x.vx + r[1] * x.vy + bias.as_ref().map_or(0.0, |b| b[c]);
                }
            }
            EncoderKind::Polynomial { w2, w1, w_cross, bias, .. } => {
                let (sx, sy, xy) = (x.vx * x.vx, x.vy * x.vy, x.vx * x.vy);
                for (c, o) in out.iter_mut().enumerate() {
                    let q = w2.row(c);
                    let l = w1.row(c);
                    *o = q[0] * sx + q[1] * sy + l[0] * x.vx + l[1] * x.vy + w_cross.as_ref().map_or(0.0, |w| w[c] * xy) + bias.as_ref().map_or(0.0, |b| b[c]);
                }
            }
            EncoderKind::Mlp(m) => m.forward_into(x, out, scratch),
        }
    }

    /// Diagonal Gaussian log-density of `y` around `encode(x)`.
    pub fn log_likelihood(&self, x: KinematicState, y: &NeuralObservation) -> f64 {
        let mut scratch = Vec::new();
        let mut buf = vec![0.0; self.channels()];
        self.log_likelihood_with(x, &y.rates, &mut buf, &mut scratch)
    }

    /// Allocation-free variant; `buf` must have length C.
    pub fn log_likelihood_with(&self, x: KinematicState, y: &[f64], buf: &mut [f64], scratch: &mut Vec<f64>) -> f64 {
        self.encode_into(x, buf, scratch);
        let inv = self.noise.inv_two_sigma2();
        let mut q = 0.0;
        for c in 0..buf.len() {
            let r = y[c] - buf[c];
            q += r * r * inv[c];
        }
        self.noise.log_norm() - q
    }

    pub fn is_finite(&self) -> bool {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let opt = |v: &Option<Vec<f64>>| v.as_deref().is_none_or(finite);
        let params = match &self.kind {
            EncoderKind::Linear { w, bias } => finite(&w.data) && opt(bias),
            EncoderKind::Polynomial { w2, w1, w_cross, bias, .. } => finite(&w2.data) && finite(&w1.data) && opt(w_cross) && opt(bias),
            EncoderKind::Mlp(m) => finite(&m.params()),
        };
        params && finite(self.noise.sigma2())
    }
}

/// Ordered candidate set of encoders sharing one channel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderPool {
    pub models: Vec<EncoderModel>,
}

impl EncoderPool {
    pub fn new(models: Vec<EncoderModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::EmptyPool);
        }
        let c = models[0].channels();
        if let Some(m) = models.iter().find(|m| m.channels() != c || m.noise.channels() != c) {
            return Err(Error::ShapeMismatch(format!("encoder '{}' has {} channels, pool expects {c}", m.id, m.channels())));
        }
        Ok(Self { models })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.models[0].channels()
    }

    pub fn ids(&self) -> Vec<String> {
        self.models.iter().map(|m| m.id.clone()).collect()
    }
}

pub(crate) fn check_pairs(x: &[KinematicState], y: &[NeuralObservation], min: usize) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} states vs {} observations", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(Error::TooFewSamples { needed: min, got: x.len() });
    }
    let c = y[0].channels();
    if c == 0 || y.iter().any(|o| o.channels() != c) {
        return Err(Error::ShapeMismatch("observations have inconsistent channel counts".into()));
    }
    Ok(c)
}

pub(crate) fn observation_matrix(y: &[NeuralObservation]) -> DMatrix<f64> {
    let c = y[0].channels();
    DMatrix::from_fn(y.len(), c, |r, k| y[r].rates[k])
}

fn feature_matrix(x: &[KinematicState], f: impl Fn(KinematicState) -> Vec<f64>) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = x.iter().map(|s| f(*s)).collect();
    let p = rows[0].len();
    DMatrix::from_fn(x.len(), p, |r, k| rows[r][k])
}

/// Columns `[start, start+width)` of the p × C coefficient matrix as a C × width matrix.
fn coef_block(coef: &DMatrix<f64>, start: usize, width: usize) -> RowMatrix {
    let c = coef.ncols();
    let mut m = RowMatrix::zeros(c, width);
    for ch in 0..c {
        for j in 0..width {
            m.set(ch, j, coef[(start + j, ch)]);
        }
    }
    m
}

fn coef_row(coef: &DMatrix<f64>, row: usize) -> Vec<f64> {
    (0..coef.ncols()).map(|c| coef[(row, c)]).collect()
}

/// Least-squares linear encoder `Y ≈ W·X`.
pub fn fit_linear(x: &[KinematicState], y: &[NeuralObservation]) -> Result<EncoderModel> {
    fit_linear_with(x, y, FitOptions::default())
}

pub fn fit_linear_with(x: &[KinematicState], y: &[NeuralObservation], opts: FitOptions) -> Result<EncoderModel> {
    check_pairs(x, y, 3)?;
    let design = feature_matrix(x, |s| {
        let mut f = vec![s.vx, s.vy];
        if opts.intercept {
            f.push(1.0);
        }
        f
    });
    let targets = observation_matrix(y);
    let sol = regression::ridge(&design, &targets, 0.0);
    let residuals = &targets - &design * &sol.coef;
    let w = coef_block(&sol.coef, 0, 2);
    let bias = opts.intercept.then(|| coef_row(&sol.coef, 2));
    let mut model = EncoderModel::new("linear", EncoderKind::Linear { w, bias }, NoiseModel::from_residuals(&residuals));
    model.meta = FitMeta { n_samples: x.len(), singular: sol.singular, ..FitMeta::default() };
    Ok(model)
}

/// Ridge-regressed second-order encoder on features `(vx², vy², vx, vy)`.
pub fn fit_polynomial(x: &[KinematicState], y: &[NeuralObservation], ridge_lambda: f64) -> Result<EncoderModel> {
    fit_polynomial_with(x, y, ridge_lambda, FitOptions::default())
}

pub fn fit_polynomial_with(x: &[KinematicState], y: &[NeuralObservation], ridge_lambda: f64, opts: FitOptions) -> Result<EncoderModel> {
    check_pairs(x, y, 3)?;
    if !(ridge_lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge_lambda must be ≥ 0, got {ridge_lambda}")));
    }
    let design = feature_matrix(x, |s| {
        let mut f = vec![s.vx * s.vx, s.vy * s.vy, s.vx, s.vy];
        if opts.cross_term {
            f.push(s.vx * s.vy);
        }
        if opts.intercept {
            f.push(1.0);
        }
        f
    });
    let targets = observation_matrix(y);
    let sol = regression::ridge(&design, &targets, ridge_lambda);
    let residuals = &targets - &design * &sol.coef;
    let w2 = coef_block(&sol.coef, 0, 2);
    let w1 = coef_block(&sol.coef, 2, 2);
    let mut next = 4;
    let w_cross = opts.cross_term.then(|| {
        next += 1;
        coef_row(&sol.coef, 4)
    });
    let bias = opts.intercept.then(|| coef_row(&sol.coef, next));
    let mut model = EncoderModel::new("polynomial", EncoderKind::Polynomial { w2, w1, w_cross, bias, ridge_lambda }, NoiseModel::from_residuals(&residuals));
    model.meta = FitMeta { ridge_lambda: Some(ridge_lambda), n_samples: x.len(), singular: sol.singular, ..FitMeta::default() };
    Ok(model)
}

#[cfg(test)]
mod tests;
