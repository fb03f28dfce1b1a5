use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderKind, EncoderModel, Mlp, NoiseModel, RowMatrix};
use crate::error::{Error, Result};
use crate::seed::{child_rng, SimRng};
use crate::statespace::{KinematicState, NeuralObservation};

/// How the ground-truth encoders are combined in one schedule segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrainMix {
    Single(usize),
    /// Convex weights over all truth encoders.
    Blend(Vec<f64>),
    /// Soft speed bands: `low` below `thresholds[0]·v_max`, `high` above
    /// `thresholds[1]·v_max`, `mid` in between.
    SpeedBanded {
        low: usize,
        mid: usize,
        high: usize,
        #[serde(default = "default_thresholds")]
        thresholds: [f64; 2],
        #[serde(default = "default_softness")]
        softness: f64,
    },
}

fn default_thresholds() -> [f64; 2] {
    [0.3, 0.6]
}

fn default_softness() -> f64 {
    0.03
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub start_bin: u64,
    pub mix: BrainMix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBrain {
    pub truth_encoders: Vec<EncoderModel>,
    pub schedule: Vec<ScheduleEntry>,
    pub obs_noise_scale: f64,
    /// Smoother span in bins; 0 disables smoothing.
    pub smoothing_window_bins: usize,
    pub intent_gain: f64,
    /// Speed normalizer for speed-banded segments.
    pub v_max: f64,
    #[serde(skip)]
    smoothed: Option<Vec<f64>>,
}

impl SyntheticBrain {
    pub fn new(
        truth_encoders: Vec<EncoderModel>,
        schedule: Vec<ScheduleEntry>,
        obs_noise_scale: f64,
        smoothing_window_bins: usize,
        intent_gain: f64,
        v_max: f64,
    ) -> Result<Self> {
        let brain = Self { truth_encoders, schedule, obs_noise_scale, smoothing_window_bins, intent_gain, v_max, smoothed: None };
        brain.validate()?;
        Ok(brain)
    }

    /// One truth encoder for all time.
    pub fn stationary(truth: EncoderModel, obs_noise_scale: f64, smoothing_window_bins: usize) -> Result<Self> {
        Self::new(vec![truth], vec![ScheduleEntry { start_bin: 0, mix: BrainMix::Single(0) }], obs_noise_scale, smoothing_window_bins, 1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.truth_encoders.is_empty() {
            return Err(Error::EmptyPool);
        }
        let c = self.truth_encoders[0].channels();
        if self.truth_encoders.iter().any(|e| e.channels() != c) {
            return bad("truth encoders disagree on channel count".into());
        }
        if self.schedule.is_empty() || self.schedule[0].start_bin != 0 {
            return bad("schedule must start at bin 0".into());
        }
        if self.schedule.windows(2).any(|w| w[1].start_bin <= w[0].start_bin) {
            return bad("schedule start bins must be strictly increasing".into());
        }
        let q = self.truth_encoders.len();
        for e in &self.schedule {
            match &e.mix {
                BrainMix::Single(i) if *i >= q => return bad(format!("truth index {i} out of range")),
                BrainMix::Blend(w) => {
                    let s: f64 = w.iter().sum();
                    if w.len() != q || w.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                        return bad("blend weights must be non-negative, one per truth, summing to 1".into());
                    }
                }
                BrainMix::SpeedBanded { low, mid, high, thresholds, softness } => {
                    if *low >= q || *mid >= q || *high >= q {
                        return bad("speed band index out of range".into());
                    }
                    if !(thresholds[0] < thresholds[1]) || !(*softness > 0.0) {
                        return bad("speed bands need increasing thresholds and positive softness".into());
                    }
                }
                _ => {}
            }
        }
        if !(self.obs_noise_scale >= 0.0) || !(self.intent_gain.is_finite()) || !(self.v_max > 0.0) {
            return bad("noise scale, gain and v_max must be valid".into());
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.truth_encoders[0].channels()
    }

    pub fn reset_smoothing(&mut self) {
        self.smoothed = None;
    }

    fn entry_at(&self, t_bin: u64) -> &ScheduleEntry {
        let i = self.schedule.partition_point(|e| e.start_bin <= t_bin);
        &self.schedule[i.saturating_sub(1)]
    }

    /// Mixture weights over the truth encoders at `t_bin` for this intent.
    pub fn weights_at(&self, t_bin: u64, intent: KinematicState) -> Vec<f64> {
        let q = self.truth_encoders.len();
        let mut w = vec![0.0; q];
        match &self.entry_at(t_bin).mix {
            BrainMix::Single(i) => w[*i] = 1.0,
            BrainMix::Blend(b) => w.copy_from_slice(b),
            BrainMix::SpeedBanded { low, mid, high, thresholds, softness } => {
                let s = intent.norm() / self.v_max;
                let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
                let wl = sig((thresholds[0] - s) / softness);
                let wh = sig((s - thresholds[1]) / softness);
                let wm = (1.0 - wl - wh).max(0.0);
                let z = wl + wm + wh;
                w[*low] += wl / z;
                w[*mid] += wm / z;
                w[*high] += wh / z;
            }
        }
        w
    }

    /// Index of the truth encoder with the largest weight (ties to the lowest).
    pub fn generating_index(&self, t_bin: u64, intent: KinematicState) -> usize {
        crate::ensemble::dominant_model(&self.weights_at(t_bin, intent))
    }

    /// Noise-free, unsmoothed mean rates.
    pub fn mean_rates(&self, t_bin: u64, intent: KinematicState) -> (Vec<f64>, Vec<f64>) {
        let x = intent * self.intent_gain;
        let c = self.channels();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (k, wk) in self.weights_at(t_bin, intent).into_iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            let e = &self.truth_encoders[k];
            for ((m, v), (r, s2)) in mean.iter_mut().zip(var.iter_mut()).zip(e.encode(x).into_iter().zip(e.noise.sigma2())) {
                *m += wk * r;
                *v += wk * s2;
            }
        }
        (mean, var)
    }

    /// One binned, smoothed observation.
    pub fn observe(&mut self, intent: KinematicState, t_bin: u64, rng: &mut SimRng) -> NeuralObservation {
        let (mut y, var) = self.mean_rates(t_bin, intent);
        if self.obs_noise_scale > 0.0 {
            for (v, s2) in y.iter_mut().zip(&var) {
                let e: f64 = rng.sample(StandardNormal);
                *v += s2.sqrt() * self.obs_noise_scale * e;
            }
        }
        if self.smoothing_window_bins > 0 {
            let beta = smoothing_pole(self.smoothing_window_bins);
            match &mut self.smoothed {
                Some(s) => {
                    for (si, yi) in s.iter_mut().zip(&y) {
                        *si = beta * *si + (1.0 - beta) * yi;
                    }
                    y.copy_from_slice(s);
                }
                None => self.smoothed = Some(y.clone()),
            }
        }
        NeuralObservation::new(y)
    }
}

/// Pole of the single-pole smoother: 95% of the kernel mass lies within
/// `window` bins.
pub fn smoothing_pole(window: usize) -> f64 {
    (-3.0 / window as f64).exp()
}

/// Shape of the standard truth set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthConfig {
    pub channels: usize,
    /// Scale of the quadratic weights of the polynomial truth.
    pub poly_strength: f64,
    /// Output scale of the random hidden units of the network truths.
    pub nn_strength: f64,
    /// Input gain of the random hidden units.
    pub nn_gain: f64,
    /// Per-truth perturbation of the shared linear core.
    pub linear_jitter: f64,
    pub noise_sigma2: f64,
    pub seed: u64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self { channels: 24, poly_strength: 1.5, nn_strength: 1.0, nn_gain: 3.0, linear_jitter: 0.5, noise_sigma2: 4.0, seed: 0 }
    }
}

fn normal_rows(rng: &mut SimRng, rows: usize, scale: f64) -> RowMatrix {
    let d = Normal::new(0.0, scale).unwrap();
    let mut m = RowMatrix::zeros(rows, 2);
    m.data.iter_mut().for_each(|v| *v = d.sample(rng));
    m
}

/// `hidden − 2` random tanh units on top of two near-linear units that
/// reproduce `w0`; the output is zero at rest.
fn network_truth(w0: &RowMatrix, hidden: usize, cfg: &TruthConfig, rng: &mut SimRng) -> Mlp {
    const EPS: f64 = 0.05;
    let c = w0.rows;
    let mut m = Mlp::zeros(hidden, c);
    m.w1[0] = EPS;
    m.w1[3] = EPS;
    for ch in 0..c {
        m.w2[ch * hidden] = w0.get(ch, 0) / EPS;
        m.w2[ch * hidden + 1] = w0.get(ch, 1) / EPS;
    }
    let gain = Normal::new(0.0, cfg.nn_gain).unwrap();
    let bias = Uniform::new(-1.0, 1.0).unwrap();
    let out = Normal::new(0.0, cfg.nn_strength / ((hidden - 2) as f64).sqrt()).unwrap();
    for h in 2..hidden {
        m.w1[2 * h] = gain.sample(rng);
        m.w1[2 * h + 1] = gain.sample(rng);
        m.b1[h] = bias.sample(rng);
    }
    for ch in 0..c {
        for h in 2..hidden {
            m.w2[ch * hidden + h] = out.sample(rng);
        }
        m.b2[ch] = -(2..hidden).map(|h| m.w2[ch * hidden + h] * m.b1[h].tanh()).sum::<f64>();
    }
    m
}

/// Ground-truth encoders around one linear core: `[linear, polynomial,
/// network (hidden 30), network (hidden 50)]`. Each truth's linear part is
/// the core plus its own `linear_jitter` perturbation.
pub fn standard_truths(cfg: &TruthConfig) -> Vec<EncoderModel> {
    let mut rng = child_rng(cfg.seed, "truths");
    let c = cfg.channels;
    let w0 = normal_rows(&mut rng, c, 1.0);
    let mut jitter_rng = child_rng(cfg.seed, "truth-jitter");
    let mut core = || {
        let mut w = w0.clone();
        if cfg.linear_jitter > 0.0 {
            let d = normal_rows(&mut jitter_rng, c, cfg.linear_jitter);
            w.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b);
        }
        w
    };
    let (wl, wp, wn1, wn2) = (core(), core(), core(), core());
    let noise = NoiseModel::isotropic(c, cfg.noise_sigma2);
    let linear = EncoderModel::linear("truth-linear", wl, noise.clone());
    let w2 = normal_rows(&mut rng, c, cfg.poly_strength);
    let poly = EncoderModel::new("truth-polynomial", EncoderKind::Polynomial { w2, w1: wp, w_cross: None, bias: None, ridge_lambda: 0.0 }, noise.clone());
    let nn1 = EncoderModel::new("truth-nn30", EncoderKind::Mlp(network_truth(&wn1, 30, cfg, &mut rng)), noise.clone());
    let nn2 = EncoderModel::new("truth-nn50", EncoderKind::Mlp(network_truth(&wn2, 50, cfg, &mut rng)), noise);
    vec![linear, poly, nn1, nn2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentSource {
    /// Per-component AR(1): `v_t = rho·v_{t−1} + sigma·ε`, clamped to `v_max`.
    RandomWalk {
        rho: f64,
        sigma: f64,
    },
    Recorded(Vec<KinematicState>),
}

impl Default for IntentSource {
    fn default() -> Self {
        IntentSource::RandomWalk { rho: 0.98, sigma: 0.1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwitchingDataset {
    pub states: Vec<KinematicState>,
    pub observations: Vec<NeuralObservation>,
    /// Generating truth index per bin.
    pub truth_schedule: Vec<usize>,
}

impl SwitchingDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> SwitchingDataset {
        SwitchingDataset {
            states: self.states[range.clone()].to_vec(),
            observations: self.observations[range.clone()].to_vec(),
            truth_schedule: self.truth_schedule[range].to_vec(),
        }
    }
}

/// Open-loop dataset: intents from `source`, observations from `brain`
/// starting at bin 0 with fresh smoothing state.
pub fn generate_switching_dataset(brain: &mut SyntheticBrain, n_bins: usize, source: &IntentSource, seed: u64) -> Result<SwitchingDataset> {
    let mut intent_rng = child_rng(seed, "intent");
    let mut noise_rng = child_rng(seed, "brain");
    brain.reset_smoothing();
    let states: Vec<KinematicState> = match source {
        IntentSource::Recorded(v) => {
            if v.len() < n_bins {
                return Err(Error::ShapeMismatch(format!("{} recorded intents for {n_bins} bins", v.len())));
            }
            v[..n_bins].to_vec()
        }
        IntentSource::RandomWalk { rho, sigma } => {
            let vm = brain.v_max;
            let mut v = KinematicState::ZERO;
            (0..n_bins)
                .map(|_| {
                    let a: f64 = intent_rng.sample(StandardNormal);
                    let b: f64 = intent_rng.sample(StandardNormal);
                    v = KinematicState::new(rho * v.vx + sigma * a, rho * v.vy + sigma * b);
                    let s = v.norm();
                    if s > vm {
                        v = v * (vm / s);
                    }
                    v
                })
                .collect()
        }
    };
    let mut observations = Vec::with_capacity(n_bins);
    let mut truth_schedule = Vec::with_capacity(n_bins);
    for (t, x) in states.iter().enumerate() {
        truth_schedule.push(brain.generating_index(t as u64, *x));
        observations.push(brain.observe(*x, t as u64, &mut noise_rng));
    }
    Ok(SwitchingDataset { states, observations, truth_schedule })
}

/// How truths are scheduled in a configured brain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BrainMode {
    /// One truth (index into the standard set) for all time.
    Stationary {
        truth: usize,
    },
    /// Linear at low speed, network at mid speed, polynomial at high speed.
    SpeedBanded {
        #[serde(default = "default_thresholds")]
        thresholds: [f64; 2],
        #[serde(default = "default_softness")]
        softness: f64,
    },
    Schedule(Vec<ScheduleEntry>),
}

/// Serializable recipe for a [`SyntheticBrain`] over the standard truths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrainConfig {
    #[serde(default)]
    pub truths: TruthConfig,
    pub mode: BrainMode,
    pub obs_noise_scale: f64,
    #[serde(default = "default_window")]
    pub smoothing_window_bins: usize,
    #[serde(default = "default_gain")]
    pub intent_gain: f64,
}

fn default_window() -> usize {
    22
}

fn default_gain() -> f64 {
    1.0
}

impl BrainConfig {
    pub fn stationary_linear(seed: u64) -> Self {
        Self {
            truths: TruthConfig { seed, ..TruthConfig::default() },
            mode: BrainMode::Stationary { truth: 0 },
            obs_noise_scale: 0.1,
            smoothing_window_bins: default_window(),
            intent_gain: 1.0,
        }
    }

    pub fn speed_banded(seed: u64) -> Self {
        Self {
            truths: TruthConfig { seed, ..TruthConfig::default() },
            mode: BrainMode::SpeedBanded { thresholds: default_thresholds(), softness: default_softness() },
            obs_noise_scale: 1.0,
            smoothing_window_bins: default_window(),
            intent_gain: 1.0,
        }
    }

    pub fn build(&self, v_max: f64) -> Result<SyntheticBrain> {
        let truths = standard_truths(&self.truths);
        let (truths, schedule) = match &self.mode {
            BrainMode::Stationary { truth } => {
                let t = truths.get(*truth).cloned().ok_or_else(|| Error::InvalidConfig(format!("truth index {truth} out of range")))?;
                (vec![t], vec![ScheduleEntry { start_bin: 0, mix: BrainMix::Single(0) }])
            }
            BrainMode::SpeedBanded { thresholds, softness } => (
                truths,
                vec![ScheduleEntry { start_bin: 0, mix: BrainMix::SpeedBanded { low: 0, mid: 2, high: 1, thresholds: *thresholds, softness: *softness } }],
            ),
            BrainMode::Schedule(s) => (truths, s.clone()),
        };
        SyntheticBrain::new(truths, schedule, self.obs_noise_scale, self.smoothing_window_bins, self.intent_gain, v_max)
    }
}
