//! Open-loop experiments on encoder-switching datasets.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_kalman, kalman_run, single_model_pf, static_bma_filter};
use crate::decoder::{fit_member, DecoderSettings, PoolMember};
use crate::encoders::{EncoderModel, EncoderPool};
use crate::ensemble::{DyEnsembleFilter, FilterConfig};
use crate::error::{Error, Result};
use crate::eval::{correlation_coefficient, dominant_model_accuracy, mse, DEFAULT_EXCLUSION_BINS};
use crate::seed::child_seed;
use crate::simulator::{generate_switching_dataset, standard_truths, BrainMix, IntentSource, ScheduleEntry, SwitchingDataset, SyntheticBrain, TruthConfig};
use crate::statespace::{fit_transition, KinematicState};

/// Where the filter's encoder pool comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    /// The generating encoders themselves.
    Truth,
    /// Each pool member fitted on the training bins of the segments its
    /// own truth generated.
    Fitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    pub truths: TruthConfig,
    /// Truth index of each segment; repeated cyclically.
    pub segment_order: Vec<usize>,
    pub segment_bins: usize,
    pub n_bins: usize,
    pub obs_noise_scale: f64,
    pub smoothing_window_bins: usize,
    pub intent: IntentSource,
    /// Leading fraction of bins used for fitting.
    pub train_fraction: f64,
    pub pool_source: PoolSource,
    pub decoder: DecoderSettings,
    pub exclusion_bins: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            truths: TruthConfig::default(),
            segment_order: vec![0, 2, 1, 3],
            segment_bins: 500,
            n_bins: 8000,
            obs_noise_scale: 1.0,
            smoothing_window_bins: 0,
            intent: IntentSource::default(),
            train_fraction: 0.5,
            pool_source: PoolSource::Fitted,
            decoder: DecoderSettings::default(),
            exclusion_bins: DEFAULT_EXCLUSION_BINS,
        }
    }
}

impl OfflineConfig {
    /// Linear → network → polynomial, one segment each, scored against the
    /// generating encoders.
    pub fn tracking() -> Self {
        Self { segment_order: vec![0, 2, 1], segment_bins: 1000, n_bins: 3000, train_fraction: 0.0, pool_source: PoolSource::Truth, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.segment_order.is_empty() || self.segment_order.iter().any(|i| *i >= 4) {
            return bad("segment_order must list truth indices in 0..4");
        }
        if self.segment_bins == 0 || self.n_bins < 2 {
            return bad("segment_bins and n_bins must be positive");
        }
        if !(0.0..1.0).contains(&self.train_fraction) {
            return bad("train_fraction must lie in [0, 1)");
        }
        if self.pool_source == PoolSource::Fitted && self.train_fraction == 0.0 {
            return bad("a fitted pool needs training bins");
        }
        Ok(())
    }

    pub fn brain(&self) -> Result<SyntheticBrain> {
        let schedule = (0..self.n_bins.div_ceil(self.segment_bins))
            .map(|s| ScheduleEntry { start_bin: (s * self.segment_bins) as u64, mix: BrainMix::Single(self.segment_order[s % self.segment_order.len()]) })
            .collect();
        SyntheticBrain::new(standard_truths(&self.truths), schedule, self.obs_noise_scale, self.smoothing_window_bins, 1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderScore {
    pub name: String,
    pub cc: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineReport {
    pub rows: Vec<DecoderScore>,
    pub model_ids: Vec<String>,
    /// Posterior of the first DyEnsemble run over the test bins.
    pub posteriors: Vec<Vec<f64>>,
    pub truth_schedule: Vec<usize>,
    pub dominance_accuracy: f64,
}

impl OfflineReport {
    pub fn score(&self, name: &str) -> Option<&DecoderScore> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn write_table_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "decoder,cc,mse")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.name, r.cc, r.mse)?;
        }
        Ok(())
    }
}

pub fn dyen_label(alpha: f64) -> String {
    format!("DyEn({alpha})")
}

const MEMBER_LABELS: [&str; 4] = ["Linear", "Polynomial", "NN-1", "NN-2"];

fn fitted_pool(cfg: &OfflineConfig, train: &SwitchingDataset, seed: u64) -> Result<Vec<EncoderModel>> {
    PoolMember::ALL
        .iter()
        .enumerate()
        .map(|(k, member)| {
            let idx: Vec<usize> = (0..train.len()).filter(|&t| train.truth_schedule[t] == k).collect();
            let (x, y): (Vec<_>, Vec<_>) = if idx.is_empty() {
                (train.states.clone(), train.observations.clone())
            } else {
                (idx.iter().map(|&t| train.states[t]).collect(), idx.iter().map(|&t| train.observations[t].clone()).collect())
            };
            fit_member(*member, &x, &y, &cfg.decoder, child_seed(seed, MEMBER_LABELS[k]))
        })
        .collect()
}

fn score(name: impl Into<String>, pred: &[KinematicState], truth: &[KinematicState]) -> Result<DecoderScore> {
    Ok(DecoderScore { name: name.into(), cc: correlation_coefficient(pred, truth)?, mse: mse(pred, truth)? })
}

fn run_filter(mut f: DyEnsembleFilter, data: &SwitchingDataset) -> Result<(Vec<KinematicState>, Vec<Vec<f64>>)> {
    let mut xs = Vec::with_capacity(data.len());
    let mut ps = Vec::with_capacity(data.len());
    for y in &data.observations {
        let o = f.step(y)?;
        xs.push(o.x_hat);
        ps.push(o.model_posterior);
    }
    Ok((xs, ps))
}

/// Dataset generation, pool construction and the decoder comparison.
/// With `baselines` false only the DyEnsemble rows are produced.
pub fn run_offline(cfg: &OfflineConfig, alphas: &[f64], seed: u64, baselines: bool) -> Result<OfflineReport> {
    cfg.validate()?;
    if alphas.is_empty() {
        return Err(Error::InvalidConfig("at least one alpha is required".into()));
    }
    let mut brain = cfg.brain()?;
    let data = generate_switching_dataset(&mut brain, cfg.n_bins, &cfg.intent, child_seed(seed, "dataset"))?;
    let n_train = (cfg.n_bins as f64 * cfg.train_fraction).round() as usize;
    let train = data.slice(0..n_train);
    let test = data.slice(n_train..data.len());

    let trans = fit_transition(if n_train >= 3 { &train.states } else { &data.states })?;
    let pool = match cfg.pool_source {
        PoolSource::Truth => brain.truth_encoders.clone(),
        PoolSource::Fitted => fitted_pool(cfg, &train, seed)?,
    };
    let model_ids: Vec<String> = pool.iter().map(|m| m.id.clone()).collect();
    let filter_cfg = |tag: &str, alpha: f64| FilterConfig { seed: child_seed(seed, tag), forgetting_alpha: alpha, ..cfg.decoder.filter.clone() };
    let x0 = test.states.first().copied().unwrap_or(KinematicState::ZERO);
    let x0 = if cfg.pool_source == PoolSource::Truth { x0 } else { KinematicState::ZERO };

    let mut rows = Vec::new();
    let mut posteriors = Vec::new();
    for (i, &alpha) in alphas.iter().enumerate() {
        let f = DyEnsembleFilter::new(EncoderPool::new(pool.clone())?, trans.clone(), filter_cfg("dyen", alpha), x0)?;
        let (xs, ps) = run_filter(f, &test)?;
        rows.push(score(dyen_label(alpha), &xs, &test.states)?);
        if i == 0 {
            posteriors = ps;
        }
    }
    if baselines {
        for (k, m) in pool.iter().enumerate() {
            let xs = single_model_pf(m.clone(), trans.clone(), filter_cfg("single", 1.0), x0, &test.observations)?;
            rows.push(score(MEMBER_LABELS[k], &xs, &test.states)?);
        }
        let km = fit_kalman(&train.states, &train.observations)?;
        rows.push(score("Kalman", &kalman_run(&km, x0, &test.observations)?, &test.states)?);
        let bma = static_bma_filter(EncoderPool::new(pool.clone())?, trans.clone(), filter_cfg("dyen", 1.0), x0, None)?;
        rows.push(score("BMA", &run_filter(bma, &test)?.0, &test.states)?);
    }
    let dominance_accuracy = dominant_model_accuracy(&posteriors, &test.truth_schedule, cfg.exclusion_bins)?;
    Ok(OfflineReport { rows, model_ids, posteriors, truth_schedule: test.truth_schedule, dominance_accuracy })
}
