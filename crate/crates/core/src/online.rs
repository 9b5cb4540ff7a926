//! Receding-horizon refit of `[A B]` over a sliding window of measurements,
//! with the lifting and readout frozen.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::koopman::{build_feature, solve_normal_equations, EdmdFit, ProxyModel};
use crate::nn::Mlp;
use crate::uncertainty::BackwardEstimator;

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub d: f64,
    pub zeta: DVector<f64>,
    lifted: Option<DVector<f64>>,
}

/// FIFO of the last `capacity` `(d, zeta)` pairs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineWindow {
    capacity: usize,
    items: VecDeque<WindowSample>,
}

impl OnlineWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::Invalid(format!("window needs at least 2 slots, got {capacity}")));
        }
        Ok(OnlineWindow {
            capacity,
            items: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    pub fn push(&mut self, d: f64, zeta: DVector<f64>) {
        self.push_sample(WindowSample { d, zeta, lifted: None });
    }

    /// Push with `Phi(d)` already evaluated, so refits do not lift again.
    pub fn push_lifted(&mut self, d: f64, zeta: DVector<f64>, lifted: DVector<f64>) {
        self.push_sample(WindowSample {
            d,
            zeta,
            lifted: Some(lifted),
        });
    }

    fn push_sample(&mut self, s: WindowSample) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(s);
    }

    pub fn iter(&self) -> impl Iterator<Item = &WindowSample> {
        self.items.iter()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }
}

/// Refit every `period` control instants; `None` disables refitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSchedule {
    pub period: Option<usize>,
}

impl UpdateSchedule {
    pub fn every(period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::Invalid("update period must be >= 1".into()));
        }
        Ok(UpdateSchedule { period: Some(period) })
    }

    pub const DISABLED: UpdateSchedule = UpdateSchedule { period: None };

    /// Parses a positive integer or `inf`/`never`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "never" | "off" => Ok(Self::DISABLED),
            other => other
                .parse::<usize>()
                .map_err(|_| Error::Invalid(format!("bad update period '{s}'")))
                .and_then(Self::every),
        }
    }
}

/// Least-squares `[A B]` over the window with the frozen lifting:
/// `Z1 = Phi(d_1..d_{m-1})`, `Z2 = Phi(d_2..d_m)`, `Delta = zeta_1..zeta_{m-1}`.
pub fn refit(window: &OnlineWindow, lifting: &Mlp, damping: f64) -> Result<EdmdFit> {
    if !window.is_full() {
        return Err(Error::WindowNotFull {
            filled: window.len(),
            capacity: window.capacity,
        });
    }
    let n = lifting.output_dim();
    let p = window.items[0].zeta.len();
    let k = n + p;
    let lifts: Vec<DVector<f64>> = window
        .items
        .iter()
        .map(|s| match &s.lifted {
            Some(z) => Ok(z.clone()),
            None => lifting.forward_vec(&[s.d]).map(DVector::from_vec),
        })
        .collect::<Result<_>>()?;
    let cols = window.len() - 1;
    let mut g = DMatrix::<f64>::zeros(k, cols);
    let mut z2 = DMatrix::<f64>::zeros(n, cols);
    for j in 0..cols {
        g.view_mut((0, j), (n, 1)).copy_from(&lifts[j]);
        let zeta = &window.items[j].zeta;
        if zeta.len() != p {
            return Err(Error::shape("window feature", p, zeta.len()));
        }
        g.view_mut((n, j), (p, 1)).copy_from(zeta);
        z2.column_mut(j).copy_from(&lifts[j + 1]);
    }
    if !(damping >= 0.0) {
        return Err(Error::Invalid(format!("damping must be >= 0, got {damping}")));
    }
    let gram = &g * g.transpose();
    let cross = &g * z2.transpose();
    Ok(solve_normal_equations(gram, cross, n, damping))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub step: usize,
    pub solve_time_ms: f64,
    pub residual: f64,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub d_hat: f64,
    /// Backward-difference measurement of the previous instant's uncertainty.
    pub measurement: Option<f64>,
    pub update: Option<UpdateEvent>,
}

/// Live uncertainty estimator: measure, optionally refit, predict.
///
/// At instant `k` the measurement `d_{k-1}` is formed from `(x_{k-1}, x_k,
/// u_{k-1})`; the lifted state is re-anchored at `Phi(d_{k-1})` and advanced
/// one step, so `d_hat_k = C (A Phi(d_{k-1}) + B zeta_{k-1})`. Before any
/// measurement exists `d_hat = C z_0 = 0`.
#[derive(Debug, Clone)]
pub struct ProxyEstimator {
    model: ProxyModel,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    window: Option<OnlineWindow>,
    schedule: UpdateSchedule,
    damping: f64,
    backward: BackwardEstimator,
    /// Most recent measurement first.
    meas: VecDeque<f64>,
    prev: Option<(State, f64)>,
    since_refit: Option<usize>,
    lifted: Option<DVector<f64>>,
    step: usize,
    events: Vec<UpdateEvent>,
}

impl ProxyEstimator {
    pub fn offline(model: ProxyModel) -> Result<Self> {
        Self::build(model, None, UpdateSchedule::DISABLED, crate::koopman::DEFAULT_DAMPING)
    }

    pub fn online(model: ProxyModel, window: usize, schedule: UpdateSchedule, damping: f64) -> Result<Self> {
        Self::build(model, Some(OnlineWindow::new(window)?), schedule, damping)
    }

    fn build(model: ProxyModel, window: Option<OnlineWindow>, schedule: UpdateSchedule, damping: f64) -> Result<Self> {
        model.validate()?;
        Ok(ProxyEstimator {
            a: model.a.clone(),
            b: model.b.clone(),
            backward: BackwardEstimator::new(model.t_s),
            model,
            window,
            schedule,
            damping,
            meas: VecDeque::new(),
            prev: None,
            since_refit: None,
            lifted: None,
            step: 0,
            events: Vec::new(),
        })
    }

    pub fn model(&self) -> &ProxyModel {
        &self.model
    }

    /// The operator currently used for prediction.
    pub fn operator(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.a, &self.b)
    }

    pub fn events(&self) -> &[UpdateEvent] {
        &self.events
    }

    /// Most recent measurement, if any.
    pub fn last_measurement(&self) -> Option<f64> {
        self.meas.front().copied()
    }

    /// Measured history, most recent first, as it enters the next feature.
    pub fn history(&self) -> Vec<f64> {
        self.meas.iter().take(self.model.feature.t_unknown).copied().collect()
    }

    /// Lifted state behind the latest estimate (`C z = d_hat`), if any.
    pub fn lifted_state(&self) -> Option<&DVector<f64>> {
        self.lifted.as_ref()
    }

    /// Algorithm step for the state sampled at the current instant. Must be
    /// followed by [`ProxyEstimator::commit`] with the applied tension.
    pub fn estimate(&mut self, x: &State) -> Result<Estimate> {
        let Some(dm) = self.backward.observe(x)? else {
            return Ok(Estimate {
                d_hat: 0.0,
                measurement: None,
                update: None,
            });
        };
        let (xp, up) = self.prev.expect("backward estimator had a previous sample");
        let zeta = build_feature(&self.model.feature, &xp, up, &self.history());
        self.meas.push_front(dm);
        self.meas.truncate(self.model.feature.t_unknown.max(1));
        let lifted = self.model.lift(dm);

        let mut update = None;
        if let Some(w) = &mut self.window {
            w.push_lifted(dm, zeta.clone(), lifted.clone());
            if let Some(s) = self.since_refit.as_mut() {
                *s += 1;
            }
            let due = match (self.schedule.period, self.since_refit) {
                (None, _) => false,
                (Some(_), None) => true,
                (Some(p), Some(s)) => s >= p,
            };
            if w.is_full() && due {
                let t0 = Instant::now();
                let fit = refit(w, &self.model.lifting, self.damping)?;
                let solve_time_ms = t0.elapsed().as_secs_f64() * 1e3;
                let residual = window_residual(w, &fit, &self.model.lifting)?;
                self.a = fit.a;
                self.b = fit.b;
                self.since_refit = Some(0);
                let ev = UpdateEvent {
                    step: self.step,
                    solve_time_ms,
                    residual,
                    rank_deficient: fit.rank_deficient,
                };
                self.events.push(ev);
                update = Some(ev);
            }
        }
        let z = &self.a * lifted + &self.b * zeta;
        let d_hat = self.model.recover(&z);
        self.lifted = Some(z);
        Ok(Estimate {
            d_hat,
            measurement: Some(dm),
            update,
        })
    }

    pub fn commit(&mut self, x: State, u: f64) {
        self.backward.commit(x, u);
        self.prev = Some((x, u));
        self.step += 1;
    }
}

fn window_residual(w: &OnlineWindow, fit: &EdmdFit, lifting: &Mlp) -> Result<f64> {
    let mut acc = 0.0;
    let items: Vec<&WindowSample> = w.iter().collect();
    for j in 0..items.len() - 1 {
        let z1 = match &items[j].lifted {
            Some(z) => z.clone(),
            None => DVector::from_vec(lifting.forward_vec(&[items[j].d])?),
        };
        let z2 = match &items[j + 1].lifted {
            Some(z) => z.clone(),
            None => DVector::from_vec(lifting.forward_vec(&[items[j + 1].d])?),
        };
        acc += (z2 - &fit.a * z1 - &fit.b * &items[j].zeta).norm_squared();
    }
    Ok(acc.sqrt())
}
