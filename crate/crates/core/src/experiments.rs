//! Drivers for the evaluation scenarios: offline training replications,
//! online refitting, the dimensional MPC deployment and the refit timing.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controllers::MpcWeights;
use crate::dataset::{collect_dataset, CollectConfig, Dataset};
use crate::dynamics::{Dimensional, State, SystemParams};
use crate::error::Result;
use crate::koopman::{FeatureConfig, ProxyModel, DEFAULT_DAMPING};
use crate::nn::{Activation, Mlp};
use crate::online::{refit, OnlineWindow, UpdateSchedule};
use crate::sim::{precision_zone_metrics, run_deployment, ControllerKind, Metrics, ProxySource, ScenarioConfig, SimLog};
use crate::training::{train_control_oriented, train_supervised, Scheme, TrainConfig, TrainReport};
use crate::uncertainty::UncertaintyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: Metrics,
    pub train_seconds: f64,
    pub best_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub scheme: Scheme,
    pub runs: Vec<SeedOutcome>,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub settled: usize,
    pub total_train_seconds: f64,
}

impl ReplicationSummary {
    fn from_runs(scheme: Scheme, runs: Vec<SeedOutcome>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = runs.iter().map(|r| r.metrics.rmse).sum::<f64>() / n;
        let var = runs.iter().map(|r| (r.metrics.rmse - mean).powi(2)).sum::<f64>() / n;
        ReplicationSummary {
            scheme,
            mean_rmse: mean,
            std_rmse: var.sqrt(),
            settled: runs.iter().filter(|r| r.metrics.settled).count(),
            total_train_seconds: runs.iter().map(|r| r.train_seconds).sum(),
            runs,
        }
    }
}

/// Trains a proxy with either scheme and returns its discrete form.
pub fn train_any(dataset: &Dataset, cfg: &TrainConfig) -> Result<(ProxyModel, TrainReport)> {
    match cfg.scheme {
        Scheme::Supervised => train_supervised(dataset, cfg),
        Scheme::ControlOriented => {
            let (m, r) = train_control_oriented(dataset, cfg)?;
            Ok((m.to_discrete()?, r))
        }
    }
}

/// Trains one proxy per seed on `dataset` and deploys each on `scenario`.
pub fn exp_replicate(dataset: &Dataset, base: &TrainConfig, seeds: &[u64], scenario: &ScenarioConfig) -> Result<ReplicationSummary> {
    let runs = seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..base.clone() };
            let (model, report) = train_any(dataset, &cfg)?;
            let log = run_deployment(scenario, Some(&model))?;
            Ok(SeedOutcome {
                seed,
                metrics: precision_zone_metrics(&log)?,
                train_seconds: report.wall_clock_s,
                best_loss: report.best.total,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicationSummary::from_runs(base.scheme, runs))
}

pub fn exp_supervised(dataset: &Dataset, seeds: &[u64]) -> Result<ReplicationSummary> {
    exp_replicate(dataset, &TrainConfig::default(), seeds, &ScenarioConfig::default())
}

pub fn exp_control_oriented(dataset: &Dataset, seeds: &[u64]) -> Result<ReplicationSummary> {
    exp_replicate(dataset, &TrainConfig::control_oriented(), seeds, &ScenarioConfig::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOutcome {
    /// `None` is the offline proxy without refitting.
    pub period: Option<usize>,
    pub metrics: Metrics,
    pub updates: usize,
    /// RMS of `d - d_hat` from the instant the window first fills.
    pub window_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSummary {
    pub uncertainty: UncertaintyModel,
    pub training_trajectories: usize,
    pub window: usize,
    pub outcomes: Vec<ScheduleOutcome>,
}

impl OnlineSummary {
    pub fn get(&self, period: Option<usize>) -> Option<&ScheduleOutcome> {
        self.outcomes.iter().find(|o| o.period == period)
    }
}

/// Deploys one proxy once per refit period (`None` for no refitting).
pub fn exp_online(
    model: &ProxyModel,
    base: &ScenarioConfig,
    window: usize,
    periods: &[Option<usize>],
    training_trajectories: usize,
) -> Result<OnlineSummary> {
    let outcomes = periods
        .iter()
        .map(|&period| {
            let cfg = ScenarioConfig {
                proxy: ProxySource::Online {
                    window,
                    schedule: UpdateSchedule { period },
                },
                ..base.clone()
            };
            let log = run_deployment(&cfg, Some(model))?;
            let tail = log.records.get(window..).unwrap_or_default();
            let window_rms = (tail.iter().map(|r| (r.d_true - r.d_hat).powi(2)).sum::<f64>() / tail.len().max(1) as f64).sqrt();
            Ok(ScheduleOutcome {
                period,
                metrics: precision_zone_metrics(&log)?,
                updates: log.records.iter().filter(|r| r.update.is_some()).count(),
                window_rms,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OnlineSummary {
        uncertainty: base.uncertainty,
        training_trajectories,
        window,
        outcomes,
    })
}

pub const INSUFFICIENT_PERIODS: [Option<usize>; 4] = [None, Some(1), Some(50), Some(100)];

/// Proxy trained on only `k` trajectories, refit over a window of 100.
pub fn exp_online_insufficient(k: usize, seed: u64, periods: &[Option<usize>]) -> Result<OnlineSummary> {
    let ds = collect_dataset(&CollectConfig {
        k,
        seed,
        ..CollectConfig::default()
    })?;
    let (model, _) = train_supervised(&ds, &TrainConfig { seed, ..TrainConfig::default() })?;
    exp_online(&model, &ScenarioConfig::default(), 100, periods, k)
}

/// Proxy trained on the Baseline dataset, deployed against NewV1.
pub fn exp_online_new_uncertainty(dataset: &Dataset, seed: u64, periods: &[Option<usize>]) -> Result<OnlineSummary> {
    let (model, _) = train_supervised(dataset, &TrainConfig { seed, ..TrainConfig::default() })?;
    let scenario = ScenarioConfig {
        uncertainty: UncertaintyModel::NEW_V1,
        ..ScenarioConfig::default()
    };
    exp_online(&model, &scenario, 100, periods, dataset.trajectories.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcScenario {
    pub params: SystemParams,
    /// Tether length at the start [m]; zero length is singular.
    pub start_length: f64,
    /// [m/s]
    pub start_rate: f64,
    pub uncertainty: UncertaintyModel,
    pub window: usize,
    pub weights: MpcWeights,
    pub duration: f64,
    pub damping: f64,
}

impl Default for MpcScenario {
    fn default() -> Self {
        MpcScenario {
            params: SystemParams::reference(),
            start_length: 100.0,
            start_rate: 0.5,
            uncertainty: UncertaintyModel::NEW_V2,
            window: 200,
            // One solve per 0.1 time units; on the plant grid the 30-step
            // horizon is too short to see the deployment through.
            weights: MpcWeights {
                hold_steps: 10,
                ..MpcWeights::default()
            },
            duration: 30.0,
            damping: DEFAULT_DAMPING,
        }
    }
}

impl MpcScenario {
    pub fn initial_state(&self) -> Result<State> {
        let q = self.params.to_dimensionless(Dimensional {
            length: self.start_length,
            length_rate: self.start_rate,
            time: 0.0,
            tension: 0.0,
        })?;
        Ok(State::new(0.0, q.lam, 0.0, q.dlam))
    }

    pub fn scenario(&self, proxy: ProxySource) -> Result<ScenarioConfig> {
        Ok(ScenarioConfig {
            x0: self.initial_state()?.to_array(),
            uncertainty: self.uncertainty,
            controller: ControllerKind::Mpc {
                weights: self.weights.clone(),
            },
            proxy,
            duration: self.duration,
            damping: self.damping,
            ..ScenarioConfig::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcOutcome {
    pub compensated: SimLog,
    pub uncompensated: SimLog,
    pub compensated_metrics: Metrics,
    pub uncompensated_metrics: Metrics,
}

/// Proxy-compensated MPC (online refit at every instant) against MPC with
/// `d_hat = 0` in the predictor.
pub fn exp_mpc_dimensional(model: &ProxyModel, sc: &MpcScenario) -> Result<MpcOutcome> {
    let comp = run_deployment(
        &sc.scenario(ProxySource::Online {
            window: sc.window,
            schedule: UpdateSchedule::every(1)?,
        })?,
        Some(model),
    )?;
    let unc = run_deployment(&sc.scenario(ProxySource::None)?, None)?;
    Ok(MpcOutcome {
        compensated_metrics: precision_zone_metrics(&comp)?,
        uncompensated_metrics: precision_zone_metrics(&unc)?,
        compensated: comp,
        uncompensated: unc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub window: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub calls: usize,
}

/// Mean wall-clock of one refit per window size, with the lifting's outputs
/// cached in the window as in the live loop.
pub fn bench_update_timing(lifting: &Mlp, windows: &[usize], calls: usize, seed: u64) -> Result<Vec<TimingRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = FeatureConfig::default().dim();
    windows
        .iter()
        .map(|&m| {
            let mut w = OnlineWindow::new(m)?;
            for _ in 0..m {
                let d = rng.gen_range(-0.3..0.3);
                let z = DVector::from_vec(lifting.forward_vec(&[d])?);
                w.push_lifted(d, DVector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0)), z);
            }
            refit(&w, lifting, DEFAULT_DAMPING)?;
            let mut times = Vec::with_capacity(calls);
            for _ in 0..calls {
                let t0 = Instant::now();
                let fit = refit(&w, lifting, DEFAULT_DAMPING)?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
                std::hint::black_box(fit);
            }
            let mean = times.iter().sum::<f64>() / calls as f64;
            let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / calls as f64).sqrt();
            Ok(TimingRow {
                window: m,
                mean_ms: mean,
                std_ms: std,
                calls,
            })
        })
        .collect()
}

/// A randomly initialised lifting of the default shape, for timing only.
pub fn default_lifting(seed: u64) -> Result<Mlp> {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp::init(&[1, cfg.hidden, cfg.lifted_dim], Activation::Relu, false, &mut rng)
}
