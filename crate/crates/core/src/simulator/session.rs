use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{integrate_cursor, ortho_impedance, planner_velocity, radial8_target, Phase, PlannerLimits, Position, SyntheticBrain, TaskConfig, TaskKind};
use crate::decoder::{Decoder, DecoderKind, DecoderSettings};
use crate::error::{Error, Result};
use crate::seed::{child_rng, child_seed, SimRng};
use crate::statespace::{KinematicState, NeuralObservation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Planner moves the cursor; the decoder only listens.
    Observation,
    /// Decoded velocity with ortho-impedance assistance.
    Assisted,
    FullControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialOutcome {
    Success,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub target: Position,
    pub start: Position,
    pub outcome: TrialOutcome,
    /// seconds; only for successes
    pub reach_time: Option<f64>,
    /// Bins up to and including the one that first entered the hold.
    pub reach_bins: usize,
    /// Global brain bin of the first bin.
    pub first_bin: u64,
    pub intent: Vec<KinematicState>,
    pub decoded: Vec<KinematicState>,
    pub control: Vec<KinematicState>,
    /// Kept separately from `intent` so a delayed user can be added later.
    pub planner: Vec<KinematicState>,
    pub cursor: Vec<Position>,
    pub model_posterior: Vec<Vec<f64>>,
    /// Raw observations; dropped from logs.
    #[serde(skip)]
    pub observations: Vec<NeuralObservation>,
}

impl TrialRecord {
    pub fn len(&self) -> usize {
        self.intent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intent.is_empty()
    }
}

/// Shared mutable context of a running session.
struct Runner<'a> {
    brain: &'a mut SyntheticBrain,
    brain_rng: SimRng,
    limits: PlannerLimits,
    t_bin: u64,
}

/// One trial. `decoder` may be absent only in observation mode.
fn trial(
    runner: &mut Runner<'_>,
    task: &TaskConfig,
    mut decoder: Option<&mut Decoder>,
    assist: f64,
    mode: ControlMode,
    start: Position,
    target: Position,
) -> Result<TrialRecord> {
    if decoder.is_none() && mode != ControlMode::Observation {
        return Err(Error::InvalidConfig("closed-loop trial without a decoder".into()));
    }
    let hold_bins = task.hold_bins();
    let max_bins = task.timeout_bins();
    let mut rec = TrialRecord {
        target,
        start,
        outcome: TrialOutcome::Timeout,
        reach_time: None,
        reach_bins: 0,
        first_bin: runner.t_bin,
        intent: Vec::with_capacity(max_bins),
        decoded: Vec::with_capacity(max_bins),
        control: Vec::with_capacity(max_bins),
        planner: Vec::with_capacity(max_bins),
        cursor: Vec::with_capacity(max_bins),
        model_posterior: Vec::with_capacity(max_bins),
        observations: Vec::with_capacity(max_bins),
    };
    let mut pos = start;
    let mut speed = 0.0;
    let mut held = 0usize;
    for b in 0..max_bins {
        let plan = planner_velocity(pos, target, speed, runner.limits, task.dt);
        speed = plan.norm();
        let y = runner.brain.observe(plan, runner.t_bin, &mut runner.brain_rng);
        runner.t_bin += 1;
        let (decoded, posterior) = match decoder.as_deref_mut() {
            Some(d) => {
                let s = d.step(&y)?;
                (s.x_hat, s.model_posterior)
            }
            None => (KinematicState::ZERO, Vec::new()),
        };
        let control = match mode {
            ControlMode::Observation => plan,
            ControlMode::Assisted => ortho_impedance(decoded, pos, target, assist),
            ControlMode::FullControl => decoded,
        };
        pos = integrate_cursor(pos, control, task.dt);
        rec.intent.push(plan);
        rec.planner.push(plan);
        rec.decoded.push(decoded);
        rec.control.push(control);
        rec.cursor.push(pos);
        rec.model_posterior.push(posterior);
        rec.observations.push(y);
        if (pos[0] - target[0]).hypot(pos[1] - target[1]) < task.reach_threshold {
            held += 1;
            if held >= hold_bins {
                let entered = b + 1 - held;
                rec.outcome = TrialOutcome::Success;
                rec.reach_bins = entered + 1;
                rec.reach_time = Some((entered + 1) as f64 * task.dt);
                break;
            }
        } else {
            held = 0;
        }
    }
    Ok(rec)
}

/// A single trial with a private brain stream.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    task: &TaskConfig,
    decoder: Option<&mut Decoder>,
    brain: &mut SyntheticBrain,
    assist: f64,
    mode: ControlMode,
    start: Position,
    target: Position,
    limits: PlannerLimits,
    seed: u64,
) -> Result<TrialRecord> {
    let mut runner = Runner { brain, brain_rng: child_rng(seed, "brain"), limits, t_bin: 0 };
    trial(&mut runner, task, decoder, assist, mode, start, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockPlan {
    pub task: TaskKind,
    pub mode: ControlMode,
    #[serde(default)]
    pub assist: f64,
}

impl BlockPlan {
    pub fn is_calibration(&self) -> bool {
        self.mode != ControlMode::FullControl
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionPlan {
    pub blocks: Vec<BlockPlan>,
}

impl SessionPlan {
    /// Two observation blocks, four assisted blocks with decreasing
    /// assistance, then Radial-8 big, Radial-8 small and `n_rtp` RTP blocks.
    pub fn standard(n_rtp: usize) -> Self {
        let cal = |mode, assist| BlockPlan { task: TaskKind::Radial8Big, mode, assist };
        let mut blocks = vec![cal(ControlMode::Observation, 1.0), cal(ControlMode::Observation, 1.0)];
        blocks.extend([0.7, 0.5, 0.3, 0.0].map(|a| cal(ControlMode::Assisted, a)));
        blocks.push(BlockPlan { task: TaskKind::Radial8Big, mode: ControlMode::FullControl, assist: 0.0 });
        blocks.push(BlockPlan { task: TaskKind::Radial8Small, mode: ControlMode::FullControl, assist: 0.0 });
        blocks.extend((0..n_rtp).map(|_| BlockPlan { task: TaskKind::Rtp, mode: ControlMode::FullControl, assist: 0.0 }));
        Self { blocks }
    }

    pub fn validate(&self) -> Result<()> {
        let first_test = self.blocks.iter().position(|b| !b.is_calibration()).unwrap_or(self.blocks.len());
        if self.blocks[first_test..].iter().any(|b| b.is_calibration()) {
            return Err(Error::InvalidConfig("calibration blocks must precede test blocks".into()));
        }
        if self.blocks.first().is_none_or(|b| b.mode != ControlMode::Observation) {
            return Err(Error::InvalidConfig("a session must open with an observation block".into()));
        }
        if self.blocks.iter().any(|b| !(0.0..=1.0).contains(&b.assist)) {
            return Err(Error::InvalidConfig("assist must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionSettings {
    pub limits: PlannerLimits,
    pub decoder: DecoderSettings,
    pub trials_per_block: usize,
    pub target_distance: f64,
    pub calibration_timeout: f64,
    pub test_timeout: f64,
    pub max_attempts: usize,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            limits: PlannerLimits::default(),
            decoder: DecoderSettings::default(),
            trials_per_block: 16,
            target_distance: 0.6,
            calibration_timeout: 3.0,
            test_timeout: 10.0,
            max_attempts: 3,
        }
    }
}

impl SessionSettings {
    pub fn task(&self, kind: TaskKind, calibration: bool) -> TaskConfig {
        let mut t = TaskConfig::new(kind, if calibration { Phase::Calibration } else { Phase::Test });
        t.trials_per_block = self.trials_per_block;
        t.target_distance = self.target_distance;
        t.timeout = if calibration { self.calibration_timeout } else { self.test_timeout };
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub index: usize,
    pub plan: BlockPlan,
    /// Model ids of the decoder active in this block (empty if none).
    pub model_ids: Vec<String>,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub decoder: DecoderKind,
    pub seed: u64,
    pub blocks: Vec<BlockRecord>,
}

#[derive(Serialize)]
struct BinLine<'a> {
    block: usize,
    trial: usize,
    bin: usize,
    t: u64,
    target: Position,
    cursor: Position,
    intent: [f64; 2],
    decoded: [f64; 2],
    control: [f64; 2],
    model_posterior: &'a [f64],
    outcome: Option<TrialOutcome>,
}

impl SessionLog {
    /// One JSON object per bin; the last bin of each trial carries its outcome.
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for b in &self.blocks {
            for (ti, tr) in b.trials.iter().enumerate() {
                for i in 0..tr.len() {
                    let line = BinLine {
                        block: b.index,
                        trial: ti,
                        bin: i,
                        t: tr.first_bin + i as u64,
                        target: tr.target,
                        cursor: tr.cursor[i],
                        intent: tr.intent[i].to_array(),
                        decoded: tr.decoded[i].to_array(),
                        control: tr.control[i].to_array(),
                        model_posterior: &tr.model_posterior[i],
                        outcome: (i + 1 == tr.len()).then_some(tr.outcome),
                    };
                    serde_json::to_writer(&mut *w, &line)?;
                    writeln!(w)?;
                }
            }
        }
        Ok(())
    }

    pub fn test_blocks(&self) -> impl Iterator<Item = &BlockRecord> {
        self.blocks.iter().filter(|b| !b.plan.is_calibration())
    }

    /// Decoded speed and model posterior over every test-phase bin.
    pub fn test_speed_weights(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut speeds = Vec::new();
        let mut post = Vec::new();
        for tr in self.test_blocks().flat_map(|b| &b.trials) {
            speeds.extend(tr.decoded.iter().map(|v| v.norm()));
            post.extend(tr.model_posterior.iter().cloned());
        }
        (speeds, post)
    }
}

fn rtp_target(rng: &mut SimRng, margin: f64) -> Position {
    let lim = super::WORKSPACE - margin;
    [rng.random_range(-lim..=lim), rng.random_range(-lim..=lim)]
}

/// Calibrate then test one decoder kind against `brain`.
pub fn run_session(kind: DecoderKind, brain: &mut SyntheticBrain, plan: &SessionPlan, settings: &SessionSettings, seed: u64) -> Result<SessionLog> {
    plan.validate()?;
    brain.validate()?;
    brain.reset_smoothing();
    let mut runner = Runner { brain, brain_rng: child_rng(seed, "brain"), limits: settings.limits, t_bin: 0 };
    let mut target_rng = child_rng(seed, "rtp-targets");
    let mut training: Vec<(Vec<KinematicState>, Vec<NeuralObservation>)> = Vec::new();
    let mut decoder: Option<Decoder> = None;
    let mut blocks = Vec::with_capacity(plan.blocks.len());
    let mut observation_done = false;

    for (index, bp) in plan.blocks.iter().enumerate() {
        let calibration = bp.is_calibration();
        if !observation_done && bp.mode != ControlMode::Observation {
            observation_done = true;
            if training.is_empty() {
                return Err(Error::CalibrationFailed("no successful trials in the observation blocks".into()));
            }
        }
        let task = settings.task(bp.task, calibration);
        if let Some(d) = decoder.as_mut() {
            d.reset(KinematicState::ZERO);
        }
        let mut trials = Vec::with_capacity(task.trials_per_block);
        let mut target_index = 0usize;
        let mut attempts = 0usize;
        let mut rtp_pos: Position = [0.0, 0.0];
        while trials.len() < task.trials_per_block {
            let (start, target) = match bp.task {
                TaskKind::Rtp => (rtp_pos, rtp_target(&mut target_rng, task.target_radius)),
                _ => ([0.0, 0.0], radial8_target(target_index, task.target_distance)),
            };
            let rec = trial(&mut runner, &task, decoder.as_mut(), bp.assist, bp.mode, start, target)?;
            attempts += 1;
            let success = rec.outcome == TrialOutcome::Success;
            if bp.task == TaskKind::Rtp {
                rtp_pos = target;
            }
            if success || !calibration || attempts >= settings.max_attempts {
                target_index += 1;
                attempts = 0;
            }
            if calibration && success {
                let n = rec.reach_bins;
                training.push((rec.planner[..n].to_vec(), rec.observations[..n].to_vec()));
            }
            trials.push(rec);
        }
        blocks.push(BlockRecord { index, plan: *bp, model_ids: decoder.as_ref().map(|d| d.model_ids().to_vec()).unwrap_or_default(), trials });
        if calibration && !training.is_empty() {
            let fit_seed = child_seed(seed, &format!("fit-{index}"));
            decoder = Some(Decoder::fit(kind, &training, &settings.decoder, fit_seed)?);
        }
    }
    if !observation_done && training.is_empty() {
        return Err(Error::CalibrationFailed("no successful trials in the observation blocks".into()));
    }
    Ok(SessionLog { decoder: kind, seed, blocks })
}
