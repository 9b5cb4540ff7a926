//! Ground-truth uncertainty generators and label extraction from sampled data.

use serde::{Deserialize, Serialize};

use crate::dynamics::{drift, rk4_step, rhs, State};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum UncertaintyModel {
    /// `a (cos t + sin alpha' + cos lambda')`
    Baseline { amplitude: f64 },
    /// Baseline plus `a cos lambda`.
    NewV1 { amplitude: f64 },
    /// Baseline plus a second `a cos t`.
    NewV2 { amplitude: f64 },
    /// Time- and state-independent value.
    Constant { value: f64 },
}

impl UncertaintyModel {
    pub const BASELINE: UncertaintyModel = UncertaintyModel::Baseline { amplitude: 0.1 };
    pub const NEW_V1: UncertaintyModel = UncertaintyModel::NewV1 { amplitude: 0.1 };
    pub const NEW_V2: UncertaintyModel = UncertaintyModel::NewV2 { amplitude: 0.1 };
    pub const NONE: UncertaintyModel = UncertaintyModel::Constant { value: 0.0 };

    /// Parses `baseline`, `new-v1`, `new-v2`, `none` or a number (constant).
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "baseline" => Ok(Self::BASELINE),
            "new-v1" | "newv1" => Ok(Self::NEW_V1),
            "new-v2" | "newv2" => Ok(Self::NEW_V2),
            "none" | "zero" => Ok(Self::NONE),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(|value| UncertaintyModel::Constant { value })
                .ok_or_else(|| Error::Invalid(format!("unknown uncertainty variant '{name}'"))),
        }
    }

    /// `t` is the simulation's dimensionless time. It stands in for the
    /// unknown vector and is never visible to the learning pipeline.
    pub fn evaluate(&self, t: f64, x: &State) -> f64 {
        let base = |a: f64| a * (t.cos() + x.dalpha.sin() + x.dlam.cos());
        match *self {
            UncertaintyModel::Baseline { amplitude } => base(amplitude),
            UncertaintyModel::NewV1 { amplitude } => base(amplitude) + amplitude * x.lam.cos(),
            UncertaintyModel::NewV2 { amplitude } => base(amplitude) + amplitude * t.cos(),
            UncertaintyModel::Constant { value } => value,
        }
    }
}

/// Advances the true plant by one sample with `u` held and `d` re-evaluated
/// at every integrator stage.
pub fn plant_step(model: &UncertaintyModel, t: f64, x: &State, u: f64, dt: f64) -> Result<State> {
    rk4_step(|off, s| rhs(s, u, model.evaluate(t + off, s)), x, dt)
}

/// Uniformly sampled record of one run.
///
/// `controls[k]` is the tension held from sample `k` to `k + 1`.
/// `labels[j]` estimates the uncertainty at sample `j + label_offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t_s: f64,
    #[serde(default)]
    pub t0: f64,
    pub states: Vec<State>,
    pub controls: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_true: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<f64>>,
    #[serde(default)]
    pub label_offset: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.states.len();
        if !(self.t_s > 0.0 && self.t_s.is_finite()) {
            return Err(Error::Invalid(format!("sampling interval must be positive, got {}", self.t_s)));
        }
        if self.controls.len() != m {
            return Err(Error::shape("trajectory controls", m, self.controls.len()));
        }
        if let Some(d) = &self.d_true {
            if d.len() != m {
                return Err(Error::shape("trajectory d_true", m, d.len()));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() + self.label_offset > m {
                return Err(Error::shape("trajectory labels", format!("<= {}", m - self.label_offset.min(m)), l.len()));
            }
        }
        if !self.states.iter().all(State::is_finite) || !self.controls.iter().all(|u| u.is_finite()) {
            return Err(Error::Invalid("trajectory contains non-finite values".into()));
        }
        Ok(())
    }

    /// Computes central-difference labels and stores them with offset 1.
    pub fn attach_central_labels(&mut self) -> Result<()> {
        self.labels = Some(extract_labels_central(self)?);
        self.label_offset = 1;
        Ok(())
    }

    /// Label aligned with sample `k`, if one exists.
    pub fn label_at(&self, k: usize) -> Option<f64> {
        let labels = self.labels.as_ref()?;
        k.checked_sub(self.label_offset).and_then(|j| labels.get(j)).copied()
    }
}

/// Second-order central-difference estimate of `d` at samples `1..m-1`.
///
/// Over `[k-1, k+1]` the tension switches at `k`, so the control term uses the
/// mean of `u[k-1]` and `u[k]`.
pub fn extract_labels_central(traj: &Trajectory) -> Result<Vec<f64>> {
    let m = traj.states.len();
    if m < 3 {
        return Err(Error::Length {
            context: "central-difference labels",
            needed: 3,
            actual: m,
        });
    }
    if traj.controls.len() != m {
        return Err(Error::shape("trajectory controls", m, traj.controls.len()));
    }
    let h = traj.t_s;
    (1..m - 1)
        .map(|k| {
            let xdot = (traj.states[k + 1].dlam - traj.states[k - 1].dlam) / (2.0 * h);
            let f = drift(&traj.states[k])?[3];
            let u = 0.5 * (traj.controls[k - 1] + traj.controls[k]);
            Ok(xdot - f + u)
        })
        .collect()
}

/// Causal first-order estimate of the uncertainty acting between two
/// consecutive samples, from the last component of the state derivative.
pub fn estimate_d_backward(x_prev: &State, x_curr: &State, u_prev: f64, t_s: f64) -> Result<f64> {
    if !(t_s > 0.0) {
        return Err(Error::Invalid(format!("sampling interval must be positive, got {t_s}")));
    }
    let mid = State::from_array(std::array::from_fn(|i| 0.5 * (x_prev.to_array()[i] + x_curr.to_array()[i])));
    let xdot = (x_curr.dlam - x_prev.dlam) / t_s;
    Ok(xdot - drift(&mid)?[3] + u_prev)
}

/// Running wrapper around [`estimate_d_backward`] for a live loop.
#[derive(Debug, Clone)]
pub struct BackwardEstimator {
    t_s: f64,
    prev: Option<(State, f64)>,
}

impl BackwardEstimator {
    pub fn new(t_s: f64) -> Self {
        BackwardEstimator { t_s, prev: None }
    }

    /// Feeds the newest sample. Returns `None` on the first call since no
    /// previous sample exists yet.
    pub fn observe(&mut self, x: &State) -> Result<Option<f64>> {
        match self.prev {
            Some((xp, up)) => estimate_d_backward(&xp, x, up, self.t_s).map(Some),
            None => Ok(None),
        }
    }

    /// Records the sample and the tension applied from it onward.
    pub fn commit(&mut self, x: State, u: f64) {
        self.prev = Some((x, u));
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }
}
