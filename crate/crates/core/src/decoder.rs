//! Fitted decoders behind one interface, for the closed-loop runner and the
//! offline experiments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_kalman_segments, KalmanFilter, KalmanModel};
use crate::encoders::{fit_linear, fit_mlp, fit_polynomial, EncoderModel, EncoderPool, MlpTrainConfig};
use crate::ensemble::{DyEnsembleFilter, FilterConfig};
use crate::error::{Error, Result};
use crate::eval::Normalizer;
use crate::seed::child_seed;
use crate::statespace::{fit_transition_segments, KinematicState, NeuralObservation, TransitionModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Dyensemble,
    Kalman,
    LinearPf,
    NnPf,
    StaticBma,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 5] = [DecoderKind::Dyensemble, DecoderKind::Kalman, DecoderKind::LinearPf, DecoderKind::NnPf, DecoderKind::StaticBma];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Dyensemble => "dyensemble",
            DecoderKind::Kalman => "kalman",
            DecoderKind::LinearPf => "linear-pf",
            DecoderKind::NnPf => "nn-pf",
            DecoderKind::StaticBma => "static-bma",
        }
    }

    fn members(self) -> &'static [PoolMember] {
        match self {
            DecoderKind::Dyensemble | DecoderKind::StaticBma => &PoolMember::ALL,
            DecoderKind::LinearPf => &[PoolMember::Linear],
            DecoderKind::NnPf => &[PoolMember::Nn1],
            DecoderKind::Kalman => &[],
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| Error::InvalidConfig(format!("unknown decoder kind {s:?}")))
    }
}

/// Members of the standard encoder pool, in pool order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMember {
    Linear,
    Polynomial,
    Nn1,
    Nn2,
}

impl PoolMember {
    pub const ALL: [PoolMember; 4] = [PoolMember::Linear, PoolMember::Polynomial, PoolMember::Nn1, PoolMember::Nn2];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSettings {
    pub filter: FilterConfig,
    pub ridge_lambda: f64,
    pub nn1_hidden: usize,
    pub nn2_hidden: usize,
    /// Training settings shared by both networks; `hidden` and `seed` are overridden.
    pub mlp: MlpTrainConfig,
    /// Fitted transition matrices are shrunk to at most this spectral radius.
    pub max_spectral_radius: f64,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        Self { filter: FilterConfig::default(), ridge_lambda: 1.0, nn1_hidden: 30, nn2_hidden: 50, mlp: MlpTrainConfig::default(), max_spectral_radius: 0.99 }
    }
}

/// Fit one pool member on flattened (state, observation) pairs.
pub fn fit_member(member: PoolMember, x: &[KinematicState], y: &[NeuralObservation], settings: &DecoderSettings, seed: u64) -> Result<EncoderModel> {
    let mlp = |hidden: usize, tag: &str| {
        let cfg = MlpTrainConfig { hidden, seed: child_seed(seed, tag), ..settings.mlp.clone() };
        fit_mlp(x, y, &cfg)
    };
    match member {
        PoolMember::Linear => fit_linear(x, y),
        PoolMember::Polynomial => fit_polynomial(x, y, settings.ridge_lambda),
        PoolMember::Nn1 => mlp(settings.nn1_hidden, "nn1"),
        PoolMember::Nn2 => mlp(settings.nn2_hidden, "nn2"),
    }
}

#[allow(clippy::large_enum_variant)] // one per session
enum Engine {
    Particle(DyEnsembleFilter),
    Kalman(KalmanFilter),
}

/// Raw-rate decoder: z-scores with calibration statistics, then filters.
pub struct Decoder {
    kind: DecoderKind,
    normalizer: Normalizer,
    model_ids: Vec<String>,
    engine: Engine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    pub x_hat: KinematicState,
    /// Model posterior of particle decoders; `[1.0]` for the Kalman filter.
    pub model_posterior: Vec<f64>,
}

/// Training data as aligned segments (one per trial or contiguous run).
pub type Segments = [(Vec<KinematicState>, Vec<NeuralObservation>)];

impl Decoder {
    /// Fit a decoder from scratch on raw observations.
    pub fn fit(kind: DecoderKind, segments: &Segments, settings: &DecoderSettings, seed: u64) -> Result<Self> {
        let raw: Vec<NeuralObservation> = segments.iter().flat_map(|(_, y)| y.iter().cloned()).collect();
        let normalizer = Normalizer::fit(&raw)?;
        let norm: Vec<(Vec<KinematicState>, Vec<NeuralObservation>)> =
            segments.iter().map(|(x, y)| (x.clone(), y.iter().map(|o| normalizer.apply(o)).collect())).collect();
        let x: Vec<KinematicState> = norm.iter().flat_map(|(x, _)| x.iter().cloned()).collect();
        let y: Vec<NeuralObservation> = norm.iter().flat_map(|(_, y)| y.iter().cloned()).collect();
        let filter_cfg = FilterConfig { seed: child_seed(seed, "filter"), ..settings.filter.clone() };
        if kind == DecoderKind::Kalman {
            let segs: Vec<(&[KinematicState], &[NeuralObservation])> = norm.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
            let mut model = fit_kalman_segments(&segs)?;
            model.transition = model.transition.stabilized(settings.max_spectral_radius);
            return Ok(Self::kalman(model, normalizer));
        }
        let state_segments: Vec<&[KinematicState]> = norm.iter().map(|(x, _)| x.as_slice()).collect();
        let trans = fit_transition_segments(&state_segments)?.stabilized(settings.max_spectral_radius);
        let models = kind.members().iter().map(|m| fit_member(*m, &x, &y, settings, seed)).collect::<Result<Vec<_>>>()?;
        Self::particle(kind, EncoderPool::new(models)?, trans, filter_cfg, normalizer)
    }

    pub fn kalman(model: KalmanModel, normalizer: Normalizer) -> Self {
        Self { kind: DecoderKind::Kalman, normalizer, model_ids: vec!["kalman".into()], engine: Engine::Kalman(KalmanFilter::new(model, KinematicState::ZERO)) }
    }

    /// Particle decoder over an already fitted pool.
    pub fn particle(kind: DecoderKind, pool: EncoderPool, trans: TransitionModel, cfg: FilterConfig, normalizer: Normalizer) -> Result<Self> {
        let model_ids = pool.ids();
        let filter = match kind {
            DecoderKind::StaticBma => DyEnsembleFilter::frozen(pool, trans, cfg, KinematicState::ZERO, None)?,
            DecoderKind::Kalman => return Err(Error::InvalidConfig("kalman is not a particle decoder".into())),
            _ => DyEnsembleFilter::new(pool, trans, cfg, KinematicState::ZERO)?,
        };
        Ok(Self { kind, normalizer, model_ids, engine: Engine::Particle(filter) })
    }

    pub fn kind(&self) -> DecoderKind {
        self.kind
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn reset(&mut self, x0: KinematicState) {
        match &mut self.engine {
            Engine::Particle(f) => f.reset(x0),
            Engine::Kalman(k) => k.reset(x0),
        }
    }

    pub fn step(&mut self, raw: &NeuralObservation) -> Result<DecodeStep> {
        let y = self.normalizer.apply(raw);
        match &mut self.engine {
            Engine::Particle(f) => {
                let out = f.step(&y)?;
                Ok(DecodeStep { x_hat: out.x_hat, model_posterior: out.model_posterior })
            }
            Engine::Kalman(k) => Ok(DecodeStep { x_hat: k.step(&y)?, model_posterior: vec![1.0] }),
        }
    }
}
