//! Closed-loop deployment runs and their precision-zone metrics.

use serde::{Deserialize, Serialize};

use crate::controllers::{
    feedback_tension, lyapunov_value, mpc_solve, shift_warm_start, FeedbackGains, MpcWeights, Predictor, PredictorProxy,
};
use crate::dynamics::{State, DEFAULT_TS};
use crate::error::{Error, Result};
use crate::koopman::{ProxyModel, DEFAULT_DAMPING};
use crate::online::{ProxyEstimator, UpdateEvent, UpdateSchedule};
use crate::uncertainty::{plant_step, UncertaintyModel};

/// Half-width of the precision zone in `alpha` and `lambda`.
pub const ZONE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerKind {
    Feedback {
        #[serde(default)]
        gains: FeedbackGains,
    },
    Mpc {
        #[serde(default)]
        weights: MpcWeights,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProxySource {
    /// `d_hat = 0` throughout.
    None,
    Offline,
    Online {
        window: usize,
        schedule: UpdateSchedule,
    },
    /// `d_hat` equals the true uncertainty at the sampling instant. For
    /// verification runs only.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub x0: [f64; 4],
    pub uncertainty: UncertaintyModel,
    pub controller: ControllerKind,
    pub proxy: ProxySource,
    /// Dimensionless run length.
    pub duration: f64,
    pub t_s: f64,
    pub damping: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            x0: [0.0, -0.99, 0.0, 1.5],
            uncertainty: UncertaintyModel::BASELINE,
            controller: ControllerKind::Feedback {
                gains: FeedbackGains::default(),
            },
            proxy: ProxySource::Offline,
            duration: 30.0,
            t_s: DEFAULT_TS,
            damping: DEFAULT_DAMPING,
        }
    }
}

impl ScenarioConfig {
    pub fn steps(&self) -> usize {
        (self.duration / self.t_s).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_s > 0.0) || !(self.duration > 0.0) {
            return Err(Error::Invalid("duration and sampling interval must be positive".into()));
        }
        State::from_array(self.x0).check()?;
        match &self.controller {
            ControllerKind::Feedback { gains } => gains.validate()?,
            ControllerKind::Mpc { weights } => weights.validate()?,
        }
        if let ProxySource::Online { window, schedule } = self.proxy {
            if window < 2 {
                return Err(Error::Invalid(format!("online window must hold at least 2 samples, got {window}")));
            }
            if schedule.period == Some(0) {
                return Err(Error::Invalid("update period must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub tau: f64,
    pub state: State,
    pub u_raw: f64,
    pub u_applied: f64,
    pub d_true: f64,
    pub d_hat: f64,
    pub lyapunov: f64,
    pub update: Option<UpdateEvent>,
    pub solver_iterations: Option<usize>,
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLog {
    pub t_s: f64,
    pub records: Vec<StepRecord>,
    /// Set when the run stopped early at the singularity guard.
    pub aborted: Option<String>,
    pub mpc_nonconverged: usize,
}

impl SimLog {
    pub fn final_state(&self) -> Option<State> {
        self.records.last().map(|r| r.state)
    }
}

enum Estimator {
    Zero,
    Oracle,
    Proxy(Box<ProxyEstimator>),
}

/// Runs the deployment loop: estimate, control, clamp, integrate the true
/// plant. `proxy` is required unless the source is `None` or `Oracle`.
pub fn run_deployment(cfg: &ScenarioConfig, proxy: Option<&ProxyModel>) -> Result<SimLog> {
    cfg.validate()?;
    let need = |p: Option<&ProxyModel>| p.cloned().ok_or_else(|| Error::Invalid("scenario needs a proxy model".into()));
    let mut est = match cfg.proxy {
        ProxySource::None => Estimator::Zero,
        ProxySource::Oracle => Estimator::Oracle,
        ProxySource::Offline => Estimator::Proxy(Box::new(ProxyEstimator::offline(need(proxy)?)?)),
        ProxySource::Online { window, schedule } => Estimator::Proxy(Box::new(ProxyEstimator::online(
            need(proxy)?,
            window,
            schedule,
            cfg.damping,
        )?)),
    };
    if let Estimator::Proxy(p) = &est {
        if (p.model().t_s - cfg.t_s).abs() > 1e-12 {
            return Err(Error::Invalid(format!(
                "proxy sampled at {} but scenario at {}",
                p.model().t_s,
                cfg.t_s
            )));
        }
    }
    let gains_for_v = match &cfg.controller {
        ControllerKind::Feedback { gains } => *gains,
        ControllerKind::Mpc { .. } => FeedbackGains::default(),
    };
    let steps = cfg.steps();
    let mut log = SimLog {
        t_s: cfg.t_s,
        records: Vec::with_capacity(steps),
        aborted: None,
        mpc_nonconverged: 0,
    };
    let mut x = State::from_array(cfg.x0);
    let mut warm: Option<Vec<f64>> = None;
    for k in 0..steps {
        let tau = k as f64 * cfg.t_s;
        let d_true = cfg.uncertainty.evaluate(tau, &x);
        let (d_hat, update) = match &mut est {
            Estimator::Zero => (0.0, None),
            Estimator::Oracle => (d_true, None),
            Estimator::Proxy(p) => match p.estimate(&x) {
                Ok(e) => (e.d_hat, e.update),
                Err(e @ Error::Singularity { .. }) => {
                    log.aborted = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            },
        };
        let control = match &cfg.controller {
            ControllerKind::Feedback { gains } => feedback_tension(&x, d_hat, gains).map(|t| (t.raw, t.applied, None, None)),
            ControllerKind::Mpc { weights } if k % weights.hold_steps != 0 => {
                let u0 = warm.as_ref().map_or(0.0, |w| w[0]);
                Ok((u0, u0, None, None))
            }
            ControllerKind::Mpc { weights } => {
                let chain = match &est {
                    Estimator::Proxy(p) => p.lifted_state().map(|z| (z.clone(), p.history())),
                    _ => None,
                };
                let start = warm.as_deref().map(shift_warm_start);
                let solved = match (&est, &chain) {
                    (Estimator::Proxy(p), Some((z0, hist))) => {
                        let (a, b) = p.operator();
                        let pred = Predictor::Chain(PredictorProxy {
                            a,
                            b,
                            c: &p.model().c,
                            feature: &p.model().feature,
                            z0,
                            hist,
                        });
                        mpc_solve(&x, &pred, weights, cfg.t_s, start.as_deref())
                    }
                    (Estimator::Oracle, _) => {
                        mpc_solve(&x, &Predictor::Preview(&[d_hat]), weights, cfg.t_s, start.as_deref())
                    }
                    _ => mpc_solve(&x, &Predictor::Nominal, weights, cfg.t_s, start.as_deref()),
                };
                solved.map(|s| {
                    if !s.converged {
                        log.mpc_nonconverged += 1;
                    }
                    let u0 = s.controls[0];
                    let obj = s.objective;
                    let it = s.iterations;
                    // The first entry stays applied until the next solve.
                    warm = Some(s.controls);
                    (u0, u0.max(0.0), Some(it), Some(obj))
                })
            }
        };
        let (u_raw, u_applied, solver_iterations, objective) = match control {
            Ok(c) => c,
            Err(e @ Error::Singularity { .. }) => {
                log.aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        log.records.push(StepRecord {
            tau,
            state: x,
            u_raw,
            u_applied,
            d_true,
            d_hat,
            lyapunov: lyapunov_value(&x, &gains_for_v),
            update,
            solver_iterations,
            objective,
        });
        if let Estimator::Proxy(p) = &mut est {
            p.commit(x, u_applied);
        }
        match plant_step(&cfg.uncertainty, tau, &x, u_applied, cfg.t_s) {
            Ok(next) => x = next,
            Err(e @ Error::Singularity { .. }) => {
                log.aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub settled: bool,
    pub settling_time: Option<f64>,
    pub rmse: f64,
    pub max_abs_error: f64,
    /// RMS of `d - d_hat` over the final fifth of the run.
    pub trailing_rms: f64,
    pub clamp_count: usize,
    pub clamps_after_settling: usize,
    pub steps: usize,
}

pub fn in_zone(x: &State) -> bool {
    x.alpha.abs() <= ZONE && x.lam.abs() <= ZONE
}

/// Settled iff the zone holds from some sample to the end of the log. A run
/// aborted early never counts as settled.
pub fn precision_zone_metrics(log: &SimLog) -> Result<Metrics> {
    if log.records.is_empty() {
        return Err(Error::Invalid("empty simulation log".into()));
    }
    let n = log.records.len();
    let first_in = log
        .records
        .iter()
        .rposition(|r| !in_zone(&r.state))
        .map_or(Some(0), |i| (i + 1 < n).then_some(i + 1));
    let settled = first_in.is_some() && log.aborted.is_none();
    let settling_time = if settled { first_in.map(|i| log.records[i].tau) } else { None };
    let clamp_count = log.records.iter().filter(|r| r.u_applied != r.u_raw).count();
    let clamps_after_settling = match (settled, first_in) {
        (true, Some(i)) => log.records[i..].iter().filter(|r| r.u_applied != r.u_raw).count(),
        _ => 0,
    };
    Ok(Metrics {
        settled,
        settling_time,
        rmse: prediction_rmse(log)?,
        max_abs_error: log.records.iter().map(|r| (r.d_true - r.d_hat).abs()).fold(0.0, f64::max),
        trailing_rms: trailing_rms(log, 0.2)?,
        clamp_count,
        clamps_after_settling,
        steps: n,
    })
}

pub fn prediction_rmse(log: &SimLog) -> Result<f64> {
    window_rms(&log.records)
}

/// RMS of `d - d_hat` over the last `fraction` of the records.
pub fn trailing_rms(log: &SimLog, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let n = log.records.len();
    let take = ((n as f64) * fraction).ceil() as usize;
    window_rms(&log.records[n - take.min(n)..])
}

fn window_rms(rs: &[StepRecord]) -> Result<f64> {
    if rs.is_empty() {
        return Err(Error::Invalid("empty simulation log".into()));
    }
    Ok((rs.iter().map(|r| (r.d_true - r.d_hat).powi(2)).sum::<f64>() / rs.len() as f64).sqrt())
}
