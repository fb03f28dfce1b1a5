//! Closed-loop cursor environment: task geometry, the planner-driven
//! synthetic user, assistance, synthetic brains and the block protocol.

mod brain;
mod session;

pub use brain::{
    generate_switching_dataset, smoothing_pole, standard_truths, BrainConfig, BrainMix, BrainMode, IntentSource, ScheduleEntry, SwitchingDataset,
    SyntheticBrain, TruthConfig,
};
pub use session::{run_session, run_trial, BlockPlan, BlockRecord, ControlMode, SessionLog, SessionPlan, SessionSettings, TrialOutcome, TrialRecord};

use serde::{Deserialize, Serialize};

use crate::statespace::KinematicState;

pub type Position = [f64; 2];

pub const WORKSPACE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "radial8_big")]
    Radial8Big,
    #[serde(rename = "radial8_small")]
    Radial8Small,
    #[serde(rename = "rtp")]
    Rtp,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Radial8Big => "radial8_big",
            TaskKind::Radial8Small => "radial8_small",
            TaskKind::Rtp => "rtp",
        }
    }
}

/// Which timeout applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Calibration,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task_kind: TaskKind,
    pub cursor_radius: f64,
    pub target_radius: f64,
    pub reach_threshold: f64,
    /// seconds
    pub holding_time: f64,
    /// seconds
    pub timeout: f64,
    pub trials_per_block: usize,
    /// Radial-8 ring radius.
    pub target_distance: f64,
    pub dt: f64,
}

impl TaskConfig {
    pub fn new(kind: TaskKind, phase: Phase) -> Self {
        let (cursor_radius, target_radius, reach_threshold) = match kind {
            TaskKind::Radial8Big => (0.07, 0.13, 0.1),
            TaskKind::Radial8Small | TaskKind::Rtp => (0.05, 0.1, 0.075),
        };
        Self {
            task_kind: kind,
            cursor_radius,
            target_radius,
            reach_threshold,
            holding_time: 0.05,
            timeout: match phase {
                Phase::Calibration => 3.0,
                Phase::Test => 10.0,
            },
            trials_per_block: 16,
            target_distance: 0.6,
            dt: 0.02,
        }
    }

    /// Consecutive in-threshold bins needed for success.
    pub fn hold_bins(&self) -> usize {
        ((self.holding_time / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn timeout_bins(&self) -> usize {
        (self.timeout / self.dt).round() as usize
    }
}

/// Kinematic limits of the synthetic user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerLimits {
    pub a_max: f64,
    pub v_max: f64,
}

impl Default for PlannerLimits {
    fn default() -> Self {
        Self { a_max: 2.0, v_max: 1.0 }
    }
}

/// The i-th Radial-8 target, clockwise from the top.
pub fn radial8_target(i: usize, radius: f64) -> Position {
    let theta = std::f64::consts::FRAC_PI_2 - (i % 8) as f64 * std::f64::consts::FRAC_PI_4;
    [radius * theta.cos(), radius * theta.sin()]
}

fn distance(a: Position, b: Position) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Next planner speed: brake once within stopping distance, else accelerate.
pub fn planner_speed(distance_to_target: f64, speed: f64, limits: PlannerLimits, dt: f64) -> f64 {
    let brake = speed * speed / (2.0 * limits.a_max);
    if distance_to_target <= brake {
        (speed - limits.a_max * dt).max(0.0)
    } else {
        (speed + limits.a_max * dt).min(limits.v_max)
    }
}

/// Target-directed velocity with accelerate/brake logic. `speed` is the
/// planner's current speed.
pub fn planner_velocity(cursor: Position, target: Position, speed: f64, limits: PlannerLimits, dt: f64) -> KinematicState {
    let d = distance(cursor, target);
    let new_speed = planner_speed(d, speed, limits, dt);
    if d < 1e-12 {
        return KinematicState::ZERO;
    }
    let scale = new_speed / d;
    KinematicState::new((target[0] - cursor[0]) * scale, (target[1] - cursor[1]) * scale)
}

/// Keeps the component of `decoded` along cursor→target and scales the
/// perpendicular part by `1 − assist`.
pub fn ortho_impedance(decoded: KinematicState, cursor: Position, target: Position, assist: f64) -> KinematicState {
    let d = distance(cursor, target);
    if d < 1e-9 {
        return decoded;
    }
    let u = KinematicState::new((target[0] - cursor[0]) / d, (target[1] - cursor[1]) / d);
    let par = u * decoded.dot(u);
    let perp = decoded - par;
    par + perp * (1.0 - assist)
}

pub fn integrate_cursor(pos: Position, v: KinematicState, dt: f64) -> Position {
    [(pos[0] + v.vx * dt).clamp(-WORKSPACE, WORKSPACE), (pos[1] + v.vy * dt).clamp(-WORKSPACE, WORKSPACE)]
}
