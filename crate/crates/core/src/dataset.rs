//! Offline trajectory collection under the excitation controller.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{data_collection_controller, State, DEFAULT_TS};
use crate::error::{Error, Result};
use crate::uncertainty::{plant_step, Trajectory, UncertaintyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    /// Number of trajectories.
    pub k: usize,
    /// Samples per trajectory.
    pub m: usize,
    pub t_s: f64,
    pub seed: u64,
    pub uncertainty: UncertaintyModel,
    pub x0_low: [f64; 4],
    pub x0_high: [f64; 4],
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            k: 200,
            m: 40,
            t_s: DEFAULT_TS,
            seed: 0,
            uncertainty: UncertaintyModel::BASELINE,
            x0_low: [-2.5, -0.99, -1.0, 0.0],
            x0_high: [0.5, 0.05, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub controller: String,
    pub uncertainty: UncertaintyModel,
    pub seed: u64,
    /// Trajectories discarded at the singularity guard and redrawn.
    pub resampled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub t_s: f64,
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::Invalid("dataset has no trajectories".into()));
        }
        for tr in &self.trajectories {
            tr.validate()?;
            if tr.t_s != self.t_s {
                return Err(Error::Invalid(format!("mixed sampling intervals {} and {}", tr.t_s, self.t_s)));
            }
        }
        Ok(())
    }

    /// Deterministic split into `(train, holdout)` with `fraction` of the
    /// trajectories held out.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Invalid(format!("holdout fraction must be in [0, 1), got {fraction}")));
        }
        let n = self.trajectories.len();
        let n_hold = ((n as f64) * fraction).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let pick = |ids: &[usize]| Dataset {
            t_s: self.t_s,
            trajectories: ids.iter().map(|&i| self.trajectories[i].clone()).collect(),
            meta: self.meta.clone(),
        };
        let (hold, train) = idx.split_at(n_hold);
        let mut train = train.to_vec();
        let mut hold = hold.to_vec();
        train.sort_unstable();
        hold.sort_unstable();
        Ok((pick(&train), pick(&hold)))
    }
}

/// Simulates `k` trajectories of `m` samples from uniformly drawn initial
/// states, each starting at `t = 0`, and attaches central-difference labels.
pub fn collect_dataset(cfg: &CollectConfig) -> Result<Dataset> {
    if cfg.k == 0 || cfg.m < 3 {
        return Err(Error::Invalid(format!("need k >= 1 and m >= 3, got k = {}, m = {}", cfg.k, cfg.m)));
    }
    if !(cfg.t_s > 0.0) {
        return Err(Error::Invalid(format!("sampling interval must be positive, got {}", cfg.t_s)));
    }
    for i in 0..4 {
        if !(cfg.x0_low[i] <= cfg.x0_high[i]) {
            return Err(Error::Invalid(format!("empty initial-state box in component {i}")));
        }
    }
    if cfg.x0_low[1] <= -1.0 {
        return Err(Error::Invalid("initial-state box reaches lambda = -1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trajectories = Vec::with_capacity(cfg.k);
    let mut resampled = 0;
    while trajectories.len() < cfg.k {
        let x0 = State::from_array(std::array::from_fn(|i| {
            if cfg.x0_low[i] == cfg.x0_high[i] {
                cfg.x0_low[i]
            } else {
                rng.gen_range(cfg.x0_low[i]..cfg.x0_high[i])
            }
        }));
        match simulate_collection(&cfg.uncertainty, x0, cfg.m, cfg.t_s) {
            Ok(tr) => trajectories.push(tr),
            Err(Error::Singularity { .. }) => {
                resampled += 1;
                log::debug!("collection trajectory from {x0:?} hit the singularity guard; redrawing");
                if resampled > 100 * cfg.k {
                    return Err(Error::Invalid("initial-state box yields almost only singular runs".into()));
                }
            }
            Err(e) => return Err(e),
        }
    }
    if resampled > 0 {
        log::info!("resampled {resampled} singular trajectories");
    }
    Ok(Dataset {
        t_s: cfg.t_s,
        trajectories,
        meta: DatasetMeta {
            controller: "u = max(4 lambda + 2 lambda' + 3, 0)".into(),
            uncertainty: cfg.uncertainty,
            seed: cfg.seed,
            resampled,
        },
    })
}

fn simulate_collection(model: &UncertaintyModel, x0: State, m: usize, t_s: f64) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(m);
    let mut controls = Vec::with_capacity(m);
    let mut d = Vec::with_capacity(m);
    let mut x = x0;
    for k in 0..m {
        let t = k as f64 * t_s;
        let u = data_collection_controller(&x);
        states.push(x);
        controls.push(u);
        d.push(model.evaluate(t, &x));
        if k + 1 < m {
            x = plant_step(model, t, &x, u, t_s)?;
        }
    }
    let mut tr = Trajectory {
        t_s,
        t0: 0.0,
        states,
        controls,
        d_true: Some(d),
        labels: None,
        label_offset: 0,
    };
    tr.attach_central_labels()?;
    Ok(tr)
}
