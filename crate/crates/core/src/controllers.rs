//! Lyapunov tension law with uncertainty compensation, and a shooting MPC
//! whose predictor carries the lifted proxy chain.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_held, step_held_with_sensitivity, State, EQUILIBRIUM_TENSION, SINGULARITY_GUARD};
use crate::error::{Error, Result};
use crate::koopman::{build_feature, FeatureConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackGains {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl Default for FeedbackGains {
    fn default() -> Self {
        FeedbackGains { k1: 1.0, k2: 0.5, k3: 3.5 }
    }
}

impl FeedbackGains {
    pub fn validate(&self) -> Result<()> {
        if self.k1 > 0.0 && self.k2 >= 0.0 && self.k3 > 0.0 {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "gains need k1 > 0, k2 >= 0, k3 > 0; got ({}, {}, {})",
                self.k1, self.k2, self.k3
            )))
        }
    }
}

pub fn lyapunov_value(x: &State, g: &FeedbackGains) -> f64 {
    let swing = x.dalpha * x.dalpha / 3.0 + x.alpha.sin().powi(2);
    0.5 * (x.dlam * x.dlam + g.k1 * x.lam * x.lam + g.k2 * swing + 3.0 * (x.lam + 1.0).powi(2) * swing)
}

/// `-k3 lambda'^2 + d - d_hat`, the closed-form decay rate used to verify the
/// law. With `d = d_hat` it coincides with the exact derivative.
pub fn vdot_oracle(x: &State, g: &FeedbackGains, d: f64, d_hat: f64) -> f64 {
    -g.k3 * x.dlam * x.dlam + d - d_hat
}

/// Exact time derivative of [`lyapunov_value`] along the closed loop with an
/// unclamped law: the mismatch enters through `lambda'`.
pub fn vdot_exact(x: &State, g: &FeedbackGains, d: f64, d_hat: f64) -> f64 {
    -g.k3 * x.dlam * x.dlam + x.dlam * (d - d_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tension {
    pub raw: f64,
    pub applied: f64,
}

impl Tension {
    pub fn clamped(&self) -> bool {
        self.applied != self.raw
    }
}

pub fn feedback_tension(x: &State, d_hat: f64, g: &FeedbackGains) -> Result<Tension> {
    let one_l = 1.0 + x.lam;
    if one_l <= SINGULARITY_GUARD {
        return Err(Error::Singularity {
            lam: x.lam,
            guard: SINGULARITY_GUARD,
        });
    }
    let raw = 3.0 * one_l + g.k1 * x.lam - 2.0 / 3.0 * g.k2 * x.dalpha * (1.0 + x.dalpha) / one_l
        + g.k3 * x.dlam
        + d_hat;
    Ok(Tension {
        raw,
        applied: raw.max(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcWeights {
    /// Diagonal of the state weight.
    pub q: [f64; 4],
    pub r: f64,
    /// Diagonal of the terminal weight.
    pub p: [f64; 4],
    pub horizon: usize,
    /// Plant samples each planned tension is held for; the predictor still
    /// integrates on the plant grid.
    pub hold_steps: usize,
    pub predictor: PredictorMode,
    pub u_min: f64,
    pub u_max: Option<f64>,
    /// Added to `r` to keep the problem strictly convex in `u` when `r = 0`.
    pub conditioning: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        MpcWeights {
            q: [30.0; 4],
            r: 0.0,
            p: [0.0; 4],
            horizon: 30,
            hold_steps: 1,
            predictor: PredictorMode::Chain,
            u_min: 0.0,
            u_max: None,
            conditioning: 1e-8,
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

impl MpcWeights {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.hold_steps == 0 {
            return Err(Error::Invalid("MPC horizon and hold must be >= 1".into()));
        }
        if self.q.iter().chain(&self.p).any(|v| !(*v >= 0.0)) || !(self.r >= 0.0) || !(self.conditioning >= 0.0) {
            return Err(Error::Invalid("MPC weights must be non-negative".into()));
        }
        if let Some(hi) = self.u_max {
            if !(hi >= self.u_min) {
                return Err(Error::Invalid(format!("empty tension box [{}, {hi}]", self.u_min)));
            }
        }
        Ok(())
    }

    fn project(&self, u: f64) -> f64 {
        let lo = u.max(self.u_min);
        self.u_max.map_or(lo, |hi| lo.min(hi))
    }

    fn q_mat(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::from(self.q))
    }

    fn p_mat(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::from(self.p))
    }
}

/// The proxy chain carried inside the predictor. `z0` is the lifted state
/// whose readout is the current estimate and `hist` the measured history
/// (most recent first) that enters the first feature vector.
#[derive(Debug, Clone, Copy)]
pub struct PredictorProxy<'a> {
    pub a: &'a DMatrix<f64>,
    pub b: &'a DMatrix<f64>,
    pub c: &'a DMatrix<f64>,
    pub feature: &'a FeatureConfig,
    pub z0: &'a DVector<f64>,
    pub hist: &'a [f64],
}

/// Use of the proxy inside the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    /// `d_hat_i = C z_i`, `z_{i+1} = A z_i + B zeta_i`, optimised through.
    Chain,
    /// The chain evaluated once along the warm start, then held fixed.
    Preview,
    /// The current estimate `C z_0` held over the whole horizon.
    Held,
}

/// How the predictor obtains the uncertainty along the horizon.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// `d_hat = 0`.
    Nominal,
    /// The proxy chain runs alongside the predicted states and is optimised
    /// through.
    Chain(PredictorProxy<'a>),
    /// A fixed sequence on the plant grid, held at its last value beyond
    /// its end.
    Preview(&'a [f64]),
}

impl<'a> Predictor<'a> {
    fn chain(&self) -> Option<&PredictorProxy<'a>> {
        match self {
            Predictor::Chain(p) => Some(p),
            _ => None,
        }
    }
}

/// The chain's uncertainty sequence along a fixed plan, for use as a
/// [`Predictor::Preview`].
pub fn preview_sequence(x0: &State, u: &[f64], proxy: &PredictorProxy, w: &MpcWeights, t_s: f64) -> Result<Vec<f64>> {
    Ok(rollout(x0, u, &Predictor::Chain(*proxy), w, t_s, None)?.d_hat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    pub controls: Vec<f64>,
    /// Predicted states on the plant grid.
    pub states: Vec<State>,
    pub d_hat: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted iterate, starting with the warm start.
    pub history: Vec<f64>,
}

struct Rollout {
    states: Vec<State>,
    d_hat: Vec<f64>,
    cost: f64,
}

struct Sensitivities {
    jac: Vec<[[f64; 4]; 4]>,
    sens: Vec<[f64; 4]>,
}

fn rollout(
    x0: &State,
    u: &[f64],
    pred: &Predictor,
    w: &MpcWeights,
    t_s: f64,
    keep: Option<&mut Sensitivities>,
) -> Result<Rollout> {
    let q = w.q_mat();
    let p = w.p_mat();
    let hold = w.hold_steps;
    let fine = u.len() * hold;
    let mut states = Vec::with_capacity(fine + 1);
    let mut d_hat = Vec::with_capacity(fine);
    states.push(*x0);
    let proxy = pred.chain();
    let mut z = proxy.map(|p| p.z0.clone());
    let mut hist: Vec<f64> = proxy.map(|p| p.hist.to_vec()).unwrap_or_default();
    let mut cost: f64 = u.iter().map(|v| (w.r + w.conditioning) * v * v).sum();
    let mut keep = keep;
    for s in 0..fine {
        let x = states[s];
        let ui = u[s / hold];
        let d = match (pred, &z) {
            (Predictor::Chain(p), Some(z)) => (p.c * z)[(0, 0)],
            (Predictor::Preview(seq), _) => seq.get(s).or(seq.last()).copied().unwrap_or(0.0),
            _ => 0.0,
        };
        let next = match keep.as_deref_mut() {
            Some(k) => {
                let (nx, jac, sens) = step_held_with_sensitivity(&x, ui, d, t_s)?;
                k.jac.push(jac);
                k.sens.push(sens);
                nx
            }
            None => step_held(&x, ui, d, t_s)?,
        };
        if let (Some(p), Some(zc)) = (proxy, z.as_mut()) {
            let zeta = build_feature(p.feature, &x, ui, &hist);
            *zc = p.a * &*zc + p.b * zeta;
            hist.insert(0, d);
            hist.truncate(p.feature.t_unknown);
        }
        if (s + 1) % hold == 0 {
            let xv = Vector4::from(next.to_array());
            cost += xv.dot(&(q * xv));
            if s + 1 == fine {
                cost += xv.dot(&(p * xv));
            }
        }
        d_hat.push(d);
        states.push(next);
    }
    Ok(Rollout { states, d_hat, cost })
}

/// Objective of the shooting problem for a fixed control sequence.
pub fn mpc_objective(
    x0: &State,
    u: &[f64],
    pred: &Predictor,
    w: &MpcWeights,
    t_s: f64,
) -> Result<f64> {
    Ok(rollout(x0, u, pred, w, t_s, None)?.cost)
}

/// Objective and its gradient with respect to the control sequence, by a
/// hand-written adjoint sweep through the state and lifted chains.
pub fn mpc_gradient(
    x0: &State,
    u: &[f64],
    pred: &Predictor,
    w: &MpcWeights,
    t_s: f64,
) -> Result<(f64, Vec<f64>)> {
    let hold = w.hold_steps;
    let fine = u.len() * hold;
    let mut tape = Sensitivities {
        jac: Vec::with_capacity(fine),
        sens: Vec::with_capacity(fine),
    };
    let ro = rollout(x0, u, pred, w, t_s, Some(&mut tape))?;
    let proxy = pred.chain();
    let q = w.q_mat();
    let xn = Vector4::from(ro.states[fine].to_array());
    let mut lx: Vector4<f64> = 2.0 * (q + w.p_mat()) * xn;
    let t = proxy.map_or(0, |p| p.feature.t_unknown);
    let nz = proxy.map_or(0, |p| p.a.nrows());
    let mut lz = DVector::<f64>::zeros(nz);
    let mut lh = vec![0.0; t];
    let mut g: Vec<f64> = u.iter().map(|v| 2.0 * (w.r + w.conditioning) * v).collect();
    for s in (0..fine).rev() {
        let sd = Vector4::from(tape.sens[s]);
        let sd_dot = sd.dot(&lx);
        let lzeta = proxy.map(|p| p.b.transpose() * &lz);
        let mut gu = -sd_dot;
        let mut lx_prev = {
            let j = Matrix4::from_fn(|r, c| tape.jac[s][r][c]);
            j.transpose() * lx
        };
        if let (Some(p), Some(lzeta)) = (proxy, lzeta.as_ref()) {
            if let Some(ui) = p.feature.u_index() {
                gu += lzeta[ui];
            }
            for r in 0..4 {
                lx_prev[r] += lzeta[r];
            }
            let gd = sd_dot + lh.first().copied().unwrap_or(0.0);
            lz = p.a.transpose() * &lz + p.c.transpose().column(0) * gd;
            let h0 = p.feature.hist_index();
            let mut nh = vec![0.0; t];
            for (j, slot) in nh.iter_mut().enumerate() {
                *slot = h0.map_or(0.0, |h| lzeta[h + j]) + lh.get(j + 1).copied().unwrap_or(0.0);
            }
            lh = nh;
        }
        if s >= 1 && s % hold == 0 {
            lx_prev += 2.0 * q * Vector4::from(ro.states[s].to_array());
        }
        g[s / hold] += gu;
        lx = lx_prev;
    }
    Ok((ro.cost, g))
}

/// Drop the first entry, duplicate the last.
pub fn shift_warm_start(previous: &[f64]) -> Vec<f64> {
    match previous.len() {
        0 => Vec::new(),
        n => previous[1..].iter().copied().chain(std::iter::once(previous[n - 1])).collect(),
    }
}

/// Projected-gradient single shooting with Armijo backtracking. The first
/// trial step of every iteration is a Barzilai-Borwein estimate.
/// Constant plans tried when the start of the solver is infeasible.
const FALLBACK_TENSIONS: [f64; 9] = [0.0, 0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 30.0];

pub fn mpc_solve(
    x0: &State,
    pred: &Predictor,
    w: &MpcWeights,
    t_s: f64,
    warm_start: Option<&[f64]>,
) -> Result<MpcSolution> {
    w.validate()?;
    x0.check()?;
    let n = w.horizon;
    let mut u: Vec<f64> = match warm_start {
        Some(ws) if ws.len() == n => ws.iter().map(|v| w.project(*v)).collect(),
        Some(ws) => return Err(Error::shape("warm start", n, ws.len())),
        None => vec![w.project(EQUILIBRIUM_TENSION); n],
    };
    let frozen;
    let pred = match (pred, w.predictor) {
        (Predictor::Chain(p), PredictorMode::Preview) => {
            frozen = preview_sequence(x0, &u, p, w, t_s)?;
            &Predictor::Preview(&frozen)
        }
        (Predictor::Chain(p), PredictorMode::Held) => {
            frozen = vec![(p.c * p.z0)[(0, 0)]];
            &Predictor::Preview(&frozen)
        }
        _ => pred,
    };
    // A start that runs into the singularity inside the horizon is replaced
    // by the cheapest feasible constant plan.
    if !matches!(mpc_objective(x0, &u, pred, w, t_s), Ok(f) if f.is_finite()) {
        let mut best: Option<(f64, f64)> = None;
        for c in FALLBACK_TENSIONS {
            let c = w.project(c);
            if let Ok(f) = mpc_objective(x0, &vec![c; n], pred, w, t_s) {
                if f.is_finite() && best.is_none_or(|(bf, _)| f < bf) {
                    best = Some((f, c));
                }
            }
        }
        let Some((_, c)) = best else {
            return Err(Error::Singularity { lam: x0.lam, guard: crate::dynamics::SINGULARITY_GUARD });
        };
        u = vec![c; n];
    }
    let (mut f, mut g) = mpc_gradient(x0, &u, pred, w, t_s)?;
    let mut history = vec![f];
    let mut step = 1e-2;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut converged = false;
    let mut iterations = 0;
    let pg_norm = |u: &[f64], g: &[f64]| -> f64 {
        u.iter()
            .zip(g)
            .map(|(ui, gi)| (ui - w.project(ui - gi)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    while iterations < w.max_iter {
        if pg_norm(&u, &g) <= w.tol {
            converged = true;
            break;
        }
        iterations += 1;
        if let Some((up, gp)) = &prev {
            let s: Vec<f64> = u.iter().zip(up).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g.iter().zip(gp).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            let ss: f64 = s.iter().map(|a| a * a).sum();
            if sy > 1e-300 {
                step = (ss / sy).clamp(1e-8, 1e4);
            }
        }
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = u.iter().zip(&g).map(|(ui, gi)| w.project(ui - step * gi)).collect();
            let decrease: f64 = u.iter().zip(&trial).zip(&g).map(|((a, b), gi)| gi * (a - b)).sum();
            match mpc_objective(x0, &trial, pred, w, t_s) {
                Ok(ft) if ft.is_finite() && ft <= f - 1e-4 * decrease => {
                    accepted = Some((trial, ft));
                    break;
                }
                Ok(_) | Err(Error::Singularity { .. }) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((trial, _)) = accepted else {
            log::debug!("MPC line search stalled after {iterations} iterations");
            break;
        };
        let (ft, gt) = mpc_gradient(x0, &trial, pred, w, t_s)?;
        prev = Some((std::mem::replace(&mut u, trial), std::mem::replace(&mut g, gt)));
        f = ft;
        history.push(f);
    }
    if !converged && pg_norm(&u, &g) <= w.tol {
        converged = true;
    }
    let ro = rollout(x0, &u, pred, w, t_s, None)?;
    Ok(MpcSolution {
        controls: u,
        states: ro.states,
        d_hat: ro.d_hat,
        objective: ro.cost,
        iterations,
        converged,
        history,
    })
}
