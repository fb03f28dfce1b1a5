//! Metrics, normalization and CSV reports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ensemble::dominant_model;
use crate::error::{Error, Result};
use crate::simulator::{BlockRecord, TrialOutcome, TrialRecord};
use crate::statespace::{KinematicState, NeuralObservation};

pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_EXCLUSION_BINS: usize = 50;
pub const SPEED_BUCKETS: usize = 20;

/// Per-channel z-score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn fit(observations: &[NeuralObservation]) -> Result<Self> {
        let first = observations.first().ok_or(Error::EmptyInput)?;
        let c = first.channels();
        if observations.iter().any(|o| o.channels() != c) {
            return Err(Error::ShapeMismatch("observations disagree on channel count".into()));
        }
        let n = observations.len() as f64;
        let mut mean = vec![0.0; c];
        for o in observations {
            mean.iter_mut().zip(&o.rates).for_each(|(m, r)| *m += r);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for o in observations {
            for ((v, r), m) in var.iter_mut().zip(&o.rates).zip(&mean) {
                *v += (r - m) * (r - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, y: &NeuralObservation) -> NeuralObservation {
        NeuralObservation::new(y.rates.iter().zip(&self.mean).zip(&self.std).map(|((r, m), s)| (r - m) / s).collect())
    }

    pub fn invert(&self, z: &NeuralObservation) -> NeuralObservation {
        NeuralObservation::new(z.rates.iter().zip(&self.mean).zip(&self.std).map(|((r, m), s)| r * s + m).collect())
    }
}

fn check_len(pred: &[KinematicState], truth: &[KinematicState]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} truths", pred.len(), truth.len())));
    }
    Ok(())
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if sbb == 0.0 {
        return Err(Error::ConstantSeries);
    }
    if saa == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Pearson r per velocity component, averaged.
pub fn correlation_coefficient(pred: &[KinematicState], truth: &[KinematicState]) -> Result<f64> {
    check_len(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: pred.len() });
    }
    let comp = |s: &[KinematicState], i: usize| -> Vec<f64> { s.iter().map(|x| x.to_array()[i]).collect() };
    let rx = pearson(&comp(pred, 0), &comp(truth, 0))?;
    let ry = pearson(&comp(pred, 1), &comp(truth, 1))?;
    Ok(0.5 * (rx + ry))
}

/// Squared error pooled over both components and all bins.
pub fn mse(pred: &[KinematicState], truth: &[KinematicState]) -> Result<f64> {
    check_len(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p.vx - t.vx).powi(2) + (p.vy - t.vy).powi(2)).sum();
    Ok(s / (2 * pred.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessMetrics {
    pub success_rate: f64,
    /// `None` when no trial succeeded.
    pub mean_reach_time: Option<f64>,
}

pub fn success_metrics(records: &[TrialRecord]) -> Result<SuccessMetrics> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let times: Vec<f64> = records.iter().filter(|r| r.outcome == TrialOutcome::Success).filter_map(|r| r.reach_time).collect();
    Ok(SuccessMetrics {
        success_rate: times.len() as f64 / records.len() as f64,
        mean_reach_time: if times.is_empty() { None } else { Some(times.iter().sum::<f64>() / times.len() as f64) },
    })
}

/// Fraction of bins whose dominant model matches the generating index,
/// skipping `exclusion` bins on either side of every switch.
pub fn dominant_model_accuracy(posteriors: &[Vec<f64>], truth_schedule: &[usize], exclusion: usize) -> Result<f64> {
    if posteriors.len() != truth_schedule.len() {
        return Err(Error::ShapeMismatch(format!("{} posteriors vs {} schedule bins", posteriors.len(), truth_schedule.len())));
    }
    let n = truth_schedule.len();
    let mut keep = vec![true; n];
    for t in 1..n {
        if truth_schedule[t] != truth_schedule[t - 1] {
            let lo = t.saturating_sub(exclusion);
            let hi = (t + exclusion).min(n);
            keep[lo..hi].iter_mut().for_each(|k| *k = false);
        }
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for t in (0..n).filter(|&t| keep[t]) {
        total += 1;
        hit += (dominant_model(&posteriors[t]) == truth_schedule[t]) as usize;
    }
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_weights: Vec<f64>,
}

/// Mean model posterior per decoded-speed bucket over `[0, v_max]`;
/// speeds above `v_max` land in the last bucket. Empty buckets are omitted.
pub fn weight_speed_histogram(speeds: &[f64], posteriors: &[Vec<f64>], v_max: f64) -> Result<Vec<SpeedBucket>> {
    if speeds.len() != posteriors.len() {
        return Err(Error::ShapeMismatch(format!("{} speeds vs {} posteriors", speeds.len(), posteriors.len())));
    }
    let q = posteriors.first().map_or(0, |p| p.len());
    let width = v_max / SPEED_BUCKETS as f64;
    let mut sums = vec![vec![0.0; q]; SPEED_BUCKETS];
    let mut counts = [0usize; SPEED_BUCKETS];
    for (s, p) in speeds.iter().zip(posteriors) {
        let b = ((s / width).floor().max(0.0) as usize).min(SPEED_BUCKETS - 1);
        counts[b] += 1;
        sums[b].iter_mut().zip(p).for_each(|(a, w)| *a += w);
    }
    Ok((0..SPEED_BUCKETS)
        .filter(|&b| counts[b] > 0)
        .map(|b| SpeedBucket {
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            count: counts[b],
            mean_weights: sums[b].iter().map(|s| s / counts[b] as f64).collect(),
        })
        .collect())
}

/// Mean weight of `model` over the lowest and highest thirds of the
/// observed speed range.
pub fn tercile_weights(speeds: &[f64], posteriors: &[Vec<f64>], model: usize) -> Result<(f64, f64)> {
    if speeds.len() != posteriors.len() {
        return Err(Error::ShapeMismatch("speeds vs posteriors".into()));
    }
    if speeds.len() < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: speeds.len() });
    }
    let mut sorted = speeds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo_cut = sorted[sorted.len() / 3];
    let hi_cut = sorted[2 * sorted.len() / 3];
    let mean = |pred: &dyn Fn(f64) -> bool| {
        let (s, n) = speeds.iter().zip(posteriors).filter(|(v, _)| pred(**v)).fold((0.0, 0usize), |(s, n), (_, p)| (s + p[model], n + 1));
        s / n.max(1) as f64
    };
    Ok((mean(&|v| v < lo_cut), mean(&|v| v >= hi_cut)))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub const METRICS_HEADER: &str = "block_index,task,n_trials,n_success,success_rate,mean_reach_time_s";

pub fn write_metrics_csv<W: Write>(w: &mut W, blocks: &[BlockRecord]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for b in blocks {
        let m = success_metrics(&b.trials)?;
        let n_success = b.trials.iter().filter(|t| t.outcome == TrialOutcome::Success).count();
        writeln!(w, "{},{},{},{},{},{}", b.index, b.plan.task.label(), b.trials.len(), n_success, m.success_rate, fmt_opt(m.mean_reach_time))?;
    }
    Ok(())
}

pub fn write_weights_by_speed_csv<W: Write>(w: &mut W, buckets: &[SpeedBucket], model_ids: &[String]) -> Result<()> {
    write!(w, "speed_lo,speed_hi,count")?;
    for id in model_ids {
        write!(w, ",{id}")?;
    }
    writeln!(w)?;
    for b in buckets {
        write!(w, "{},{},{}", b.lo, b.hi, b.count)?;
        for m in &b.mean_weights {
            write!(w, ",{m}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Per-bin generating index, dominant model and posterior.
pub fn write_dominance_csv<W: Write>(w: &mut W, posteriors: &[Vec<f64>], truth_schedule: &[usize], model_ids: &[String]) -> Result<()> {
    write!(w, "bin,truth,dominant")?;
    for id in model_ids {
        write!(w, ",{id}")?;
    }
    writeln!(w)?;
    for (t, (p, truth)) in posteriors.iter().zip(truth_schedule).enumerate() {
        write!(w, "{t},{truth},{}", dominant_model(p))?;
        for v in p {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
