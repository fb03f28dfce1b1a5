//! Self-checks behind `dyens verify` and the acceptance test target.
//!
//! Every criterion returns a [`CriterionResult`]; nothing here panics on a
//! failed check, so a suite always reports every line.

use std::fmt;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::baselines::{bma_posterior, static_bma_filter, KalmanFilter, KalmanModel};
use crate::decoder::DecoderKind;
use crate::encoders::{EncoderModel, EncoderPool, Mlp, NoiseModel, RowMatrix};
use crate::ensemble::{effective_sample_size, systematic_resample, DyEnsembleFilter, FilterConfig};
use crate::error::Result;
use crate::eval::{correlation_coefficient, tercile_weights, Normalizer};
use crate::offline::{dyen_label, run_offline, OfflineConfig};
use crate::seed::{child_rng, child_seed, SimRng};
use crate::simulator::{ortho_impedance, run_session, BrainConfig, SessionLog, SessionPlan, SessionSettings, TaskKind};
use crate::statespace::{KinematicState, NeuralObservation, TransitionModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Fast properties: invariants and the hand-enumerated step.
    Unit,
    /// Independent reference computations.
    Oracle,
    /// All eight acceptance criteria.
    Acceptance,
}

impl std::str::FromStr for Suite {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Suite::Unit),
            "oracle" => Ok(Suite::Oracle),
            "acceptance" => Ok(Suite::Acceptance),
            _ => Err(crate::Error::InvalidConfig(format!("unknown suite {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {} {}: {} ({:.1} s)", if self.passed { "PASS" } else { "FAIL" }, self.id, self.name, self.detail, self.elapsed.as_secs_f64())
    }
}

fn timed(id: u8, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CriterionResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    CriterionResult { id, name, passed, detail, elapsed: start.elapsed() }
}

/// Worker count: `DYENS_THREADS` if set, else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var("DYENS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving parallel map over independent seeds.
pub fn par_map<T: Send, F: Fn(u64) -> T + Sync>(seeds: &[u64], f: F) -> Vec<T> {
    let threads = thread_count().min(seeds.len()).max(1);
    if threads == 1 {
        return seeds.iter().map(|s| f(*s)).collect();
    }
    let chunk = seeds.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds.chunks(chunk).map(|c| scope.spawn(|| c.iter().map(|s| f(*s)).collect::<Vec<T>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

pub fn run_suite(suite: Suite) -> Vec<CriterionResult> {
    match suite {
        Suite::Unit => vec![hand_enumerated_step(), invariants()],
        Suite::Oracle => vec![hand_enumerated_step(), kalman_equivalence()],
        Suite::Acceptance => acceptance(),
    }
}

pub fn acceptance() -> Vec<CriterionResult> {
    let mut out = vec![hand_enumerated_step(), kalman_equivalence(), dominant_tracking(), decoder_ordering(), closed_loop_sanity()];
    let mut banded = None;
    out.push(timed(6, "closed-loop advantage", || {
        let (ok, detail, logs) = closed_loop_advantage_inner()?;
        banded = Some(logs);
        Ok((ok, detail))
    }));
    out.push(invariants());
    out.push(match banded {
        Some(logs) => speed_regime_from(&logs),
        None => speed_regime(),
    });
    out
}

// ---- 1 -------------------------------------------------------------------

fn gauss_density(y: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    y.iter().zip(mean).zip(var).map(|((y, m), v)| (-(y - m) * (y - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()).product()
}

/// Plain-arithmetic replay of two recursions on a 3-particle, 2-model
/// instance, compared with the filter term by term.
pub fn hand_enumerated_step() -> CriterionResult {
    timed(1, "hand-enumerated step", || {
        let w = [[[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]], [[0.5, 0.2], [-0.3, 1.0], [0.8, 0.4]]];
        let var = [[0.5, 0.5, 0.7], [0.3, 0.8, 0.4]];
        let models: Vec<EncoderModel> = (0..2)
            .map(|k| {
                let rows: Vec<Vec<f64>> = w[k].iter().map(|r| r.to_vec()).collect();
                EncoderModel::linear(format!("m{k}"), RowMatrix::from_rows(&rows), NoiseModel::new(var[k].to_vec()))
            })
            .collect();
        let a = [[0.9, 0.05], [-0.02, 0.95]];
        let b = [0.01, -0.02];
        let trans = TransitionModel::new(a, b, [1e-4, 4e-4]);
        let (alpha, floor) = (0.9, 1e-3);
        let cfg = FilterConfig { n_particles: 3, forgetting_alpha: alpha, weight_floor: floor, ess_threshold_fraction: 0.0, seed: 7 };
        let mut f = DyEnsembleFilter::new(EncoderPool::new(models)?, trans, cfg, KinematicState::ZERO)?;
        let mut px = [[0.1, 0.2], [-0.3, 0.4], [0.5, -0.1]];
        f.set_particles(px.iter().map(|p| KinematicState::from_array(*p)).collect())?;

        let noises = [[[0.01, -0.02], [0.0, 0.03], [-0.015, 0.005]], [[0.02, 0.01], [-0.01, -0.01], [0.0, 0.02]]];
        let ys = [[0.2, 0.3, -0.1], [0.05, 0.5, 0.3]];

        let mut combined = [1.0 / 3.0; 3];
        let mut rows = [[1.0 / 3.0; 3]; 2];
        let mut post: [f64; 2] = [0.5, 0.5];
        let mut worst: f64 = 0.0;
        for (noise, y) in noises.iter().zip(&ys) {
            for i in 0..3 {
                let p = px[i];
                px[i] = [a[0][0] * p[0] + a[0][1] * p[1] + b[0] + noise[i][0], a[1][0] * p[0] + a[1][1] * p[1] + b[1] + noise[i][1]];
            }
            let mut lik = [[0.0; 3]; 2];
            for k in 0..2 {
                for i in 0..3 {
                    let m: Vec<f64> = w[k].iter().map(|r| r[0] * px[i][0] + r[1] * px[i][1]).collect();
                    lik[k][i] = gauss_density(y, &m, &var[k]);
                }
            }
            let marg: Vec<f64> = (0..2).map(|k| (0..3).map(|i| combined[i] * lik[k][i]).sum()).collect();
            // forgetting prior then floor (two models: one floor, other takes the rest)
            let pa = [post[0].powf(alpha), post[1].powf(alpha)];
            let mut prior = [pa[0] / (pa[0] + pa[1]), pa[1] / (pa[0] + pa[1])];
            floor2(&mut prior, floor);
            let un = [prior[0] * marg[0], prior[1] * marg[1]];
            post = [un[0] / (un[0] + un[1]), un[1] / (un[0] + un[1])];
            floor2(&mut post, floor);
            for k in 0..2 {
                let s: f64 = (0..3).map(|i| rows[k][i] * lik[k][i]).sum();
                for i in 0..3 {
                    rows[k][i] = rows[k][i] * lik[k][i] / s;
                }
            }
            let mut c = [0.0; 3];
            for i in 0..3 {
                c[i] = post[0] * rows[0][i] + post[1] * rows[1][i];
            }
            let cs: f64 = c.iter().sum();
            combined = [c[0] / cs, c[1] / cs, c[2] / cs];
            let xh = [(0..3).map(|i| combined[i] * px[i][0]).sum::<f64>(), (0..3).map(|i| combined[i] * px[i][1]).sum::<f64>()];

            let out = f.step_with_noise(&NeuralObservation::new(y.to_vec()), noise)?;
            worst = worst
                .max((out.x_hat.vx - xh[0]).abs())
                .max((out.x_hat.vy - xh[1]).abs())
                .max((out.model_posterior[0] - post[0]).abs())
                .max((out.model_posterior[1] - post[1]).abs());
        }
        Ok((worst < 1e-10, format!("max deviation {worst:.2e} (tol 1e-10)")))
    })
}

fn floor2(p: &mut [f64; 2], floor: f64) {
    for k in 0..2 {
        if p[k] < floor {
            p[k] = floor;
            p[1 - k] = 1.0 - floor;
        }
    }
}

// ---- 2 -------------------------------------------------------------------

fn linear_gaussian_model() -> KalmanModel {
    let h = RowMatrix::from_rows(&[vec![1.0, 0.2], vec![-0.4, 0.9], vec![0.6, 0.6], vec![0.3, -0.8]]);
    KalmanModel { transition: TransitionModel::new([[0.95, 0.05], [-0.05, 0.95]], [0.0, 0.0], [0.01, 0.01]), h, q_noise: vec![0.5; 4] }
}

fn simulate_linear_gaussian(model: &KalmanModel, n: usize, rng: &mut SimRng) -> Vec<NeuralObservation> {
    let t = &model.transition;
    let sd = t.noise_std();
    let mut x = KinematicState::ZERO;
    (0..n)
        .map(|_| {
            let m = t.mean(x);
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            x = KinematicState::new(m.vx + sd[0] * a, m.vy + sd[1] * b);
            let rates = (0..model.channels())
                .map(|c| {
                    let e: f64 = rng.sample(StandardNormal);
                    model.h.get(c, 0) * x.vx + model.h.get(c, 1) * x.vy + model.q_noise[c].sqrt() * e
                })
                .collect();
            NeuralObservation::new(rates)
        })
        .collect()
}

/// RMS gap between the single-model particle filter and the exact
/// Kalman mean for each cloud size, averaged over seeds.
pub fn kalman_gaps(sizes: &[usize], n_seeds: u64, steps: usize) -> Result<Vec<f64>> {
    let model = linear_gaussian_model();
    let per_seed = par_map(&seeds(n_seeds), |seed| -> Result<Vec<f64>> {
        let ys = simulate_linear_gaussian(&model, steps, &mut child_rng(seed, "lg-data"));
        let mut kf = KalmanFilter::new(model.clone(), KinematicState::ZERO);
        let exact: Vec<KinematicState> = ys.iter().map(|y| kf.step(y)).collect::<Result<_>>()?;
        sizes
            .iter()
            .map(|&n| {
                let cfg = FilterConfig { n_particles: n, seed: child_seed(seed, &format!("pf-{n}")), ..FilterConfig::default() };
                let mut f = DyEnsembleFilter::new(EncoderPool::new(vec![model.as_encoder()])?, model.transition.clone(), cfg, KinematicState::ZERO)?;
                let mut sq = 0.0;
                for (y, k) in ys.iter().zip(&exact) {
                    let x = f.step(y)?.x_hat;
                    sq += (x.vx - k.vx).powi(2) + (x.vy - k.vy).powi(2);
                }
                Ok((sq / (2 * steps) as f64).sqrt())
            })
            .collect()
    });
    let per_seed: Vec<Vec<f64>> = per_seed.into_iter().collect::<Result<_>>()?;
    Ok((0..sizes.len()).map(|j| mean(&per_seed.iter().map(|r| r[j]).collect::<Vec<_>>())).collect())
}

pub fn kalman_equivalence() -> CriterionResult {
    timed(2, "kalman equivalence", || {
        let sizes = [500, 2000, 20000];
        let gaps = kalman_gaps(&sizes, 10, 200)?;
        let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
        let ok = decreasing && gaps[2] < 0.05;
        Ok((ok, format!("rms gap {:.4} / {:.4} / {:.4} at N = 500 / 2000 / 20000 (need < 0.05, decreasing)", gaps[0], gaps[1], gaps[2])))
    })
}

// ---- 3, 4 ----------------------------------------------------------------

pub fn dominant_tracking() -> CriterionResult {
    timed(3, "dominant-model tracking", || {
        let cfg = OfflineConfig::tracking();
        let acc = par_map(&seeds(5), |s| run_offline(&cfg, &[0.98], s, false).map(|r| r.dominance_accuracy)).into_iter().collect::<Result<Vec<_>>>()?;
        let m = mean(&acc);
        Ok((m >= 0.70, format!("mean accuracy {m:.3} over 5 seeds (need ≥ 0.70)")))
    })
}

pub fn decoder_ordering() -> CriterionResult {
    timed(4, "decoder ordering", || {
        let cfg = OfflineConfig::default();
        let reports = par_map(&seeds(10), |s| run_offline(&cfg, &[0.98], s, true)).into_iter().collect::<Result<Vec<_>>>()?;
        let cc = |name: &str| mean(&reports.iter().map(|r| r.score(name).map_or(f64::NAN, |s| s.cc)).collect::<Vec<_>>());
        let dyen = cc(&dyen_label(0.98));
        let bma = cc("BMA");
        let kalman = cc("Kalman");
        let best_single = ["Linear", "Polynomial", "NN-1", "NN-2"].iter().map(|n| cc(n)).fold(f64::NEG_INFINITY, f64::max);
        let ok = dyen >= bma && bma >= best_single - 0.02 && dyen >= kalman + 0.02;
        Ok((ok, format!("CC DyEn {dyen:.3}, BMA {bma:.3}, best single {best_single:.3}, Kalman {kalman:.3}")))
    })
}

// ---- 5, 6, 8 -------------------------------------------------------------

fn session(kind: DecoderKind, brain: &BrainConfig, seed: u64) -> Result<SessionLog> {
    let settings = SessionSettings::default();
    let mut b = brain.build(settings.limits.v_max)?;
    run_session(kind, &mut b, &SessionPlan::standard(3), &settings, seed)
}

fn block_success(log: &SessionLog, task: TaskKind) -> f64 {
    let trials: Vec<_> = log.test_blocks().filter(|b| b.plan.task == task).flat_map(|b| &b.trials).collect();
    trials.iter().filter(|t| t.outcome == crate::simulator::TrialOutcome::Success).count() as f64 / trials.len().max(1) as f64
}

pub fn closed_loop_sanity() -> CriterionResult {
    timed(5, "closed-loop sanity", || {
        let mut parts = Vec::new();
        let mut ok = true;
        for kind in DecoderKind::ALL {
            let rates = par_map(&seeds(5), |s| session(kind, &BrainConfig::stationary_linear(s), s).map(|l| block_success(&l, TaskKind::Radial8Big)))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let m = mean(&rates);
            ok &= m >= 14.0 / 16.0;
            parts.push(format!("{kind} {:.2}/16", m * 16.0));
        }
        Ok((ok, format!("radial-8 big test success: {} (need ≥ 14/16 each)", parts.join(", "))))
    })
}

/// DyEn session plus RTP success and mean reach time for DyEn and Kalman.
struct Paired {
    log: SessionLog,
    success: [f64; 2],
    reach: [Option<f64>; 2],
}

fn closed_loop_advantage_inner() -> Result<(bool, String, Vec<SessionLog>)> {
    let runs = par_map(&seeds(10), |s| -> Result<Paired> {
        let brain = BrainConfig::speed_banded(s);
        let dy = session(DecoderKind::Dyensemble, &brain, s)?;
        let kf = session(DecoderKind::Kalman, &brain, s)?;
        let rt = |l: &SessionLog| {
            crate::eval::success_metrics(&l.test_blocks().filter(|b| b.plan.task == TaskKind::Rtp).flat_map(|b| b.trials.clone()).collect::<Vec<_>>())
                .ok()
                .and_then(|m| m.mean_reach_time)
        };
        let success = [block_success(&dy, TaskKind::Rtp), block_success(&kf, TaskKind::Rtp)];
        let reach = [rt(&dy), rt(&kf)];
        Ok(Paired { log: dy, success, reach })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let wins = runs.iter().filter(|r| r.success[0] >= r.success[1]).count();
    let md = mean(&runs.iter().map(|r| r.success[0]).collect::<Vec<_>>());
    let mk = mean(&runs.iter().map(|r| r.success[1]).collect::<Vec<_>>());
    let times = |j: usize| {
        let v: Vec<f64> = runs.iter().filter_map(|r| r.reach[j]).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            mean(&v)
        }
    };
    let (td, tk) = (times(0), times(1));
    let detail = format!("DyEn ≥ Kalman in {wins}/10 sessions (need ≥ 8); RTP success {md:.3} vs {mk:.3}; reach time {td:.2} s vs {tk:.2} s");
    Ok((wins >= 8, detail, runs.into_iter().map(|r| r.log).collect()))
}

pub fn closed_loop_advantage() -> CriterionResult {
    timed(6, "closed-loop advantage", || closed_loop_advantage_inner().map(|(ok, d, _)| (ok, d)))
}

fn speed_regime_from(logs: &[SessionLog]) -> CriterionResult {
    timed(8, "speed-weight regime", || {
        let mut lows = Vec::new();
        let mut highs = Vec::new();
        for log in logs.iter().take(5) {
            let (speeds, post) = log.test_speed_weights();
            let (lo, hi) = tercile_weights(&speeds, &post, 0)?;
            lows.push(lo);
            highs.push(hi);
        }
        let (lo, hi) = (mean(&lows), mean(&highs));
        Ok((lo > hi, format!("linear weight {lo:.3} in the slowest third vs {hi:.3} in the fastest, over {} seeds", lows.len())))
    })
}

pub fn speed_regime() -> CriterionResult {
    let logs: Result<Vec<SessionLog>> = par_map(&seeds(5), |s| session(DecoderKind::Dyensemble, &BrainConfig::speed_banded(s), s)).into_iter().collect();
    match logs {
        Ok(l) => speed_regime_from(&l),
        Err(e) => CriterionResult { id: 8, name: "speed-weight regime", passed: false, detail: format!("error: {e}"), elapsed: Duration::ZERO },
    }
}

// ---- 7 -------------------------------------------------------------------

const CASES: usize = 128;

fn random_linear(rng: &mut SimRng, id: &str, c: usize) -> EncoderModel {
    let rows: Vec<Vec<f64>> = (0..c).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
    let var = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    EncoderModel::linear(id, RowMatrix::from_rows(&rows), NoiseModel::new(var))
}

fn random_filter(rng: &mut SimRng, q: usize, alpha: f64, floor: f64) -> Result<(DyEnsembleFilter, Vec<NeuralObservation>)> {
    let c = rng.random_range(2..6);
    let pool = EncoderPool::new((0..q).map(|k| random_linear(rng, &format!("m{k}"), c)).collect())?;
    let trans = TransitionModel::new([[0.9, 0.0], [0.0, 0.9]], [0.0, 0.0], [0.01, 0.01]);
    let cfg =
        FilterConfig { n_particles: rng.random_range(20..80), forgetting_alpha: alpha, weight_floor: floor, ess_threshold_fraction: 0.5, seed: rng.random() };
    let ys = (0..rng.random_range(5..20)).map(|_| NeuralObservation::new((0..c).map(|_| rng.random_range(-3.0..3.0)).collect())).collect();
    Ok((DyEnsembleFilter::new(pool, trans, cfg, KinematicState::ZERO)?, ys))
}

fn check(name: &str, ok: bool, failures: &mut Vec<String>) {
    if !ok && !failures.iter().any(|f| f == name) {
        failures.push(name.to_string());
    }
}

/// Randomized properties, `CASES` instances each.
pub fn invariants() -> CriterionResult {
    timed(7, "invariant suite", || {
        let mut rng = child_rng(0, "invariants");
        let mut fails = Vec::new();
        for _ in 0..CASES {
            // normalization and ESS bounds
            let q = rng.random_range(1..5);
            let alpha = rng.random_range(0.05..1.0);
            let (mut f, ys) = random_filter(&mut rng, q, alpha, 1e-4)?;
            let n = f.config().n_particles as f64;
            for y in &ys {
                let out = f.step(y)?;
                let st = f.state();
                check("normalization", (st.combined_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9, &mut fails);
                check("normalization", (out.model_posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9, &mut fails);
                check("normalization", out.model_posterior.iter().all(|p| *p >= 1e-4 - 1e-12), &mut fails);
                check("normalization", st.per_model_weights.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9), &mut fails);
                check("ess", out.ess >= 1.0 - 1e-9 && out.ess <= n + 1e-9, &mut fails);
                if out.resampled {
                    check("ess", (st.effective_sample_size() - n).abs() < 1e-6, &mut fails);
                }
            }

            // systematic resampling preserves count and index range
            let w: Vec<f64> = (0..rng.random_range(2..50)).map(|_| rng.random_range(0.0..1.0)).collect();
            let idx = systematic_resample(&w, rng.random_range(0.0..1.0));
            check("ess", idx.len() == w.len() && idx.iter().all(|i| *i < w.len()) && idx.windows(2).all(|p| p[0] <= p[1]), &mut fails);
            check("ess", effective_sample_size(&vec![1.0 / w.len() as f64; w.len()]) - w.len() as f64 <= 1e-9, &mut fails);

            // determinism
            let seed: u64 = rng.random();
            let (mut f1, ys) = random_filter(&mut child_rng(seed, "det"), 3, 0.9, 1e-6)?;
            let (mut f2, _) = random_filter(&mut child_rng(seed, "det"), 3, 0.9, 1e-6)?;
            for y in &ys {
                let (a, b) = (f1.step(y)?, f2.step(y)?);
                check("determinism", a.x_hat == b.x_hat && a.model_posterior == b.model_posterior, &mut fails);
            }

            // forgetting limit: α = 1 without floor is recursive model averaging
            let (mut f, ys) = random_filter(&mut rng, 3, 1.0, 0.0)?;
            let mut margs = Vec::new();
            let mut last = Vec::new();
            for y in &ys {
                let out = f.step(y)?;
                margs.push(out.log_marginals);
                last = out.model_posterior;
            }
            let bma = bma_posterior(&[1.0 / 3.0; 3], &margs);
            check("forgetting-limit", last.iter().zip(&bma).all(|(a, b)| (a - b).abs() < 1e-9), &mut fails);
            // frozen filter keeps its weights
            let mut s = static_bma_filter(f.pool().clone(), f.transition().clone(), f.config().clone(), KinematicState::ZERO, None)?;
            for y in &ys {
                let out = s.step(y)?;
                check("forgetting-limit", out.model_posterior.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15), &mut fails);
            }

            // gradient check
            let (h, c) = (rng.random_range(1..6), rng.random_range(1..4));
            let mut net = Mlp::init(h, c, rng.random());
            let xs: Vec<KinematicState> = (0..4).map(|_| KinematicState::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let yv: Vec<Vec<f64>> = (0..4).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let yr: Vec<&[f64]> = yv.iter().map(|v| v.as_slice()).collect();
            let p = net.params();
            let mut g = vec![0.0; p.len()];
            net.mse_and_grad(&xs, &yr, Some(&mut g));
            let j = rng.random_range(0..p.len());
            let eps = 1e-6;
            let mut pp = p.clone();
            pp[j] += eps;
            net.set_params(&pp);
            let up = net.mse_and_grad(&xs, &yr, None);
            pp[j] -= 2.0 * eps;
            net.set_params(&pp);
            let dn = net.mse_and_grad(&xs, &yr, None);
            let fd = (up - dn) / (2.0 * eps);
            check("gradient", (fd - g[j]).abs() <= 1e-6 * (1.0 + fd.abs()), &mut fails);

            // ortho impedance never grows the off-axis component
            let v = KinematicState::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let cur = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let tgt = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let assist = rng.random_range(0.0..=1.0);
            let out = ortho_impedance(v, cur, tgt, assist);
            let d = [tgt[0] - cur[0], tgt[1] - cur[1]];
            let dl = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if dl > 1e-9 {
                let u = KinematicState::new(d[0] / dl, d[1] / dl);
                let perp = |x: KinematicState| (x.vx * -u.vy + x.vy * u.vx).abs();
                check("ortho-impedance", (out.dot(u) - v.dot(u)).abs() < 1e-12, &mut fails);
                check("ortho-impedance", (perp(out) - (1.0 - assist) * perp(v)).abs() < 1e-9, &mut fails);
            }

            // z-score round trip and a sanity check on CC
            let obs: Vec<NeuralObservation> = (0..10).map(|_| NeuralObservation::new((0..3).map(|_| rng.random_range(-5.0..5.0)).collect())).collect();
            let norm = Normalizer::fit(&obs)?;
            check("normalization", obs.iter().all(|o| norm.invert(&norm.apply(o)).rates.iter().zip(&o.rates).all(|(a, b)| (a - b).abs() < 1e-9)), &mut fails);
            let tr: Vec<KinematicState> = (0..10).map(|_| KinematicState::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            check("normalization", (correlation_coefficient(&tr, &tr)? - 1.0).abs() < 1e-12, &mut fails);
        }
        let names = "normalization, ess, determinism, gradient, forgetting-limit, ortho-impedance";
        if fails.is_empty() {
            Ok((true, format!("{CASES} cases each: {names}")))
        } else {
            Ok((false, format!("failed: {}", fails.join(", "))))
        }
    })
}
