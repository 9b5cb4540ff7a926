//! Offline learning of the proxy: the supervised multi-step scheme and the
//! control-oriented scheme trained through integrated state predictions.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::Dataset;
use crate::dynamics::{step_held, step_held_with_sensitivity, State};
use crate::error::{Error, Result};
use crate::koopman::{build_feature, edmd_fit, edmd_residual, ContinuousProxy, FeatureConfig, ProxyModel};
use crate::nn::{Activation, Adam, Mlp, MlpVars};
use crate::uncertainty::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Supervised,
    /// Trained through RK4 state predictions (neural-ODE style).
    #[serde(alias = "node")]
    ControlOriented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Chain `z_{j+1} = A z_j + B zeta_j` from the first lifted label.
    MultiStep,
    /// Restart every prediction from the lifted label of the same step.
    TeacherForced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    /// Per-step decay of the multi-step prediction error.
    pub eta: f64,
    /// Weight of `||[A B]||_F^2`.
    pub xi: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub rollout: RolloutMode,
    pub hidden: usize,
    pub lifted_dim: usize,
    pub activation: Activation,
    pub bias: bool,
    pub spectral_norm: bool,
    pub feature: FeatureConfig,
    /// After gradient training, refit `[A B]` in closed form on the
    /// training transitions with the learned lifting (supervised only).
    pub operator_refit: bool,
    pub refit_damping: f64,
    /// Fraction of trajectories withheld from training.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Supervised,
            eta: 1.0 - 1e-3,
            xi: 0.5,
            epochs: 200,
            lr: 1e-3,
            seed: 0,
            rollout: RolloutMode::MultiStep,
            hidden: 128,
            lifted_dim: 24,
            activation: Activation::Relu,
            bias: false,
            spectral_norm: false,
            feature: FeatureConfig::default(),
            operator_refit: true,
            refit_damping: crate::koopman::DEFAULT_DAMPING,
            holdout_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn control_oriented() -> Self {
        TrainConfig {
            scheme: Scheme::ControlOriented,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Invalid(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        if !(self.xi >= 0.0) {
            return Err(Error::Invalid(format!("xi must be >= 0, got {}", self.xi)));
        }
        if !(self.lr > 0.0) || self.hidden == 0 || self.lifted_dim == 0 {
            return Err(Error::Invalid("learning rate and layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Invalid(format!("holdout fraction must be in [0, 1), got {}", self.holdout_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub prediction: f64,
    pub reconstruction: f64,
    pub regularization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitSummary {
    pub transitions: usize,
    pub residual: f64,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub scheme: Scheme,
    pub seed: u64,
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best: EpochLoss,
    pub wall_clock_s: f64,
    pub refit: Option<RefitSummary>,
}

/// Trainable pieces of a discrete proxy.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParts {
    pub lifting: Mlp,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearParts {
    pub fn init(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = cfg.lifted_dim;
        let lifting = Mlp::init(&[1, cfg.hidden, n], cfg.activation, cfg.bias, rng)?;
        let mut unif = |r: usize, c: usize| {
            let bound = 1.0 / (c as f64).sqrt();
            DMatrix::from_fn(r, c, |_, _| rng.gen_range(-bound..bound))
        };
        Ok(LinearParts {
            a: unif(n, n),
            b: unif(n, cfg.feature.dim()),
            c: unif(1, n),
            lifting,
        })
    }

    fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut p = self.lifting.params_mut();
        p.push(&mut self.a);
        p.push(&mut self.b);
        p.push(&mut self.c);
        p
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        let mut s: Vec<_> = self.lifting.params().iter().map(|m| m.shape()).collect();
        s.extend([self.a.shape(), self.b.shape(), self.c.shape()]);
        s
    }
}

struct Recorded {
    net: MlpVars,
    a: Var,
    b: Var,
    c: Var,
}

impl Recorded {
    fn new(tape: &mut Tape, p: &LinearParts) -> Self {
        Recorded {
            net: p.lifting.record_params(tape),
            a: tape.param(p.a.clone()),
            b: tape.param(p.b.clone()),
            c: tape.param(p.c.clone()),
        }
    }

    fn all(&self) -> Vec<Var> {
        let mut v = Mlp::vars_list(&self.net);
        v.extend([self.a, self.b, self.c]);
        v
    }
}

/// Trajectories of equal length stacked column-wise, time-major.
struct Group<'a> {
    trajs: Vec<&'a Trajectory>,
    m: usize,
}

fn group_by_length(trajs: &[Trajectory]) -> Vec<Group<'_>> {
    let mut map: BTreeMap<usize, Vec<&Trajectory>> = BTreeMap::new();
    for t in trajs {
        map.entry(t.len()).or_default().push(t);
    }
    map.into_iter().map(|(m, trajs)| Group { trajs, m }).collect()
}

fn row_of(vals: impl Iterator<Item = f64>) -> DMatrix<f64> {
    let v: Vec<f64> = vals.collect();
    DMatrix::from_row_slice(1, v.len(), &v)
}

fn states_at(g: &Group, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(4, g.trajs.len(), |r, j| g.trajs[j].states[k].to_array()[r])
}

fn supervised_label(t: &Trajectory, k: usize, idx: usize) -> Result<f64> {
    t.label_at(k).ok_or(Error::MissingLabels { index: idx })
}

/// First sample whose feature vector has a full label history.
fn first_transition(feature: &FeatureConfig) -> usize {
    1 + feature.t_unknown
}

/// Records the supervised loss on `tape`; returns `(total, prediction, reconstruction, regularization)`.
fn record_supervised(
    tape: &mut Tape,
    vars: &Recorded,
    parts: &LinearParts,
    trajs: &[Trajectory],
    cfg: &TrainConfig,
) -> Result<(Var, Var, Var, Var)> {
    let k0 = first_transition(&cfg.feature);
    let mut pred_terms = Vec::new();
    let mut rec_terms = Vec::new();
    let mut n_transitions = 0usize;
    let mut n_labels = 0usize;
    for (gi, g) in group_by_length(trajs).iter().enumerate() {
        let kb = g.trajs.len();
        for (j, t) in g.trajs.iter().enumerate() {
            if t.labels.is_none() {
                return Err(Error::MissingLabels { index: gi * 1000 + j });
            }
        }
        let first = g.trajs[0].label_offset;
        let n_lab = g.trajs[0].labels.as_ref().map_or(0, |l| l.len());
        if g.trajs.iter().any(|t| t.label_offset != first || t.labels.as_ref().map_or(0, |l| l.len()) != n_lab) {
            return Err(Error::Invalid("trajectories of equal length must share label layout".into()));
        }
        let last = first + n_lab; // one past the last labelled sample
        let k0 = k0.max(first + cfg.feature.t_unknown);
        // Labels for samples first..last, time-major.
        let mut lab = Vec::with_capacity(n_lab * kb);
        for s in first..last {
            for (j, t) in g.trajs.iter().enumerate() {
                lab.push(supervised_label(t, s, j)?);
            }
        }
        let lrow = tape.constant(DMatrix::from_row_slice(1, lab.len(), &lab));
        let zall = parts.lifting.record_forward(tape, &vars.net, lrow)?;
        let col = |s: usize| (s - first) * kb;

        let recon = tape.matmul(vars.c, zall)?;
        let err = tape.sub(recon, lrow)?;
        rec_terms.push(tape.sum_squares(err));
        n_labels += lab.len();

        if last < k0 + 2 {
            continue;
        }
        let mut zh = tape.cols(zall, col(k0), kb)?;
        for (j, k) in (k0..last - 1).enumerate() {
            if cfg.rollout == RolloutMode::TeacherForced {
                zh = tape.cols(zall, col(k), kb)?;
            }
            let zeta = DMatrix::from_fn(cfg.feature.dim(), kb, |r, c| {
                let t = g.trajs[c];
                let hist: Vec<f64> = (1..=cfg.feature.t_unknown).map(|h| t.label_at(k - h).unwrap_or(0.0)).collect();
                build_feature(&cfg.feature, &t.states[k], t.controls[k], &hist)[r]
            });
            let zeta = tape.constant(zeta);
            let az = tape.matmul(vars.a, zh)?;
            let bz = tape.matmul(vars.b, zeta)?;
            zh = tape.add(az, bz)?;
            let target = tape.cols(zall, col(k + 1), kb)?;
            let e = tape.sub(zh, target)?;
            let se = tape.sum_squares(e);
            pred_terms.push(tape.scale(se, cfg.eta.powi(j as i32 + 1)));
            n_transitions += kb;
        }
    }
    let sum = |tape: &mut Tape, terms: &[Var]| -> Result<Var> {
        let mut acc = tape.constant(DMatrix::zeros(1, 1));
        for t in terms {
            acc = tape.add(acc, *t)?;
        }
        Ok(acc)
    };
    let pred = sum(tape, &pred_terms)?;
    let pred = tape.scale(pred, 1.0 / n_transitions.max(1) as f64);
    let rec = sum(tape, &rec_terms)?;
    let rec = tape.scale(rec, 1.0 / n_labels.max(1) as f64);
    let ra = tape.sum_squares(vars.a);
    let rb = tape.sum_squares(vars.b);
    let reg = tape.add(ra, rb)?;
    let reg = tape.scale(reg, cfg.xi);
    let total = tape.add(pred, rec)?;
    let total = tape.add(total, reg)?;
    Ok((total, pred, rec, reg))
}

/// Supervised loss: step-decayed multi-step lifted prediction error,
/// reconstruction error of `C Phi(d)`, and `xi ||[A B]||_F^2`.
pub fn supervised_loss(parts: &LinearParts, trajs: &[Trajectory], cfg: &TrainConfig) -> Result<EpochLoss> {
    let mut tape = Tape::new();
    let vars = Recorded::new(&mut tape, parts);
    let (t, p, r, g) = record_supervised(&mut tape, &vars, parts, trajs, cfg)?;
    Ok(EpochLoss {
        epoch: 0,
        total: tape.scalar(t),
        prediction: tape.scalar(p),
        reconstruction: tape.scalar(r),
        regularization: tape.scalar(g),
    })
}

/// Gradient of the supervised loss with respect to every parameter, in the
/// order lifting weights (and biases), `A`, `B`, `C`.
pub fn supervised_gradient(
    parts: &LinearParts,
    trajs: &[Trajectory],
    cfg: &TrainConfig,
) -> Result<(EpochLoss, Vec<DMatrix<f64>>)> {
    let mut tape = Tape::new();
    let vars = Recorded::new(&mut tape, parts);
    let (t, p, r, g) = record_supervised(&mut tape, &vars, parts, trajs, cfg)?;
    let grads = tape.backward(t)?;
    let shapes = parts.shapes();
    let out = vars
        .all()
        .iter()
        .zip(shapes)
        .map(|(v, s)| grads.get_or_zeros(*v, s))
        .collect();
    Ok((
        EpochLoss {
            epoch: 0,
            total: tape.scalar(t),
            prediction: tape.scalar(p),
            reconstruction: tape.scalar(r),
            regularization: tape.scalar(g),
        },
        out,
    ))
}

/// Lifted training transitions `(Z1, Z2, Delta)` built from labels.
pub fn supervised_transitions(
    lifting: &Mlp,
    trajs: &[Trajectory],
    feature: &FeatureConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let k0 = first_transition(feature);
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    let mut zetas: Vec<DVector<f64>> = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        if t.labels.is_none() {
            return Err(Error::MissingLabels { index: i });
        }
        let start = k0.max(t.label_offset + feature.t_unknown);
        for k in start..t.len() {
            let (Some(a), Some(b)) = (t.label_at(k), t.label_at(k + 1)) else { continue };
            let hist: Vec<f64> = (1..=feature.t_unknown).map(|h| t.label_at(k - h).unwrap_or(0.0)).collect();
            d1.push(a);
            d2.push(b);
            zetas.push(build_feature(feature, &t.states[k], t.controls[k], &hist));
        }
    }
    if d1.is_empty() {
        return Err(Error::Length {
            context: "supervised transitions",
            needed: 1,
            actual: 0,
        });
    }
    let z1 = lifting.forward(&row_of(d1.into_iter()))?;
    let z2 = lifting.forward(&row_of(d2.into_iter()))?;
    let delta = DMatrix::from_columns(&zetas);
    Ok((z1, z2, delta))
}

fn check_dataset(dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    dataset.validate()?;
    let trajs = if cfg.holdout_fraction > 0.0 {
        dataset.split(cfg.holdout_fraction, cfg.seed)?.0.trajectories
    } else {
        dataset.trajectories.clone()
    };
    Ok(trajs)
}

fn step_optimizer(
    opt: &mut Adam,
    parts: &mut LinearParts,
    grads: &[DMatrix<f64>],
    spectral: bool,
) -> Result<()> {
    opt.update(&mut parts.params_mut(), grads)?;
    if spectral {
        parts.lifting.spectral_normalize_all()?;
    }
    Ok(())
}

/// Adam on the supervised loss, best epoch kept, then the optional
/// closed-form refit of `[A B]`.
pub fn train_supervised(dataset: &Dataset, cfg: &TrainConfig) -> Result<(ProxyModel, TrainReport)> {
    let started = Instant::now();
    let trajs = check_dataset(dataset, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut parts = LinearParts::init(cfg, &mut rng)?;
    let mut opt = Adam::new(cfg.lr, &parts.shapes());
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let mut best: Option<(EpochLoss, LinearParts)> = None;
    for epoch in 0..=cfg.epochs {
        let (mut loss, grads) = supervised_gradient(&parts, &trajs, cfg)?;
        loss.epoch = epoch;
        if !loss.total.is_finite() {
            return Err(Error::Divergence { epoch, loss: loss.total });
        }
        curve.push(loss);
        if best.as_ref().is_none_or(|(b, _)| loss.total < b.total) {
            best = Some((loss, parts.clone()));
        }
        if epoch < cfg.epochs {
            step_optimizer(&mut opt, &mut parts, &grads, cfg.spectral_norm)?;
        }
    }
    let (best_loss, mut parts) = best.expect("at least one epoch evaluated");
    let refit = if cfg.operator_refit {
        let (z1, z2, delta) = supervised_transitions(&parts.lifting, &trajs, &cfg.feature)?;
        let fit = edmd_fit(&z1, &z2, &delta, cfg.refit_damping)?;
        let residual = edmd_residual(&fit.a, &fit.b, &z1, &z2, &delta);
        parts.a = fit.a;
        parts.b = fit.b;
        Some(RefitSummary {
            transitions: z1.ncols(),
            residual,
            rank_deficient: fit.rank_deficient,
        })
    } else {
        None
    };
    let model = ProxyModel {
        a: parts.a,
        b: parts.b,
        c: parts.c,
        lifting: parts.lifting,
        t_s: dataset.t_s,
        feature: cfg.feature,
    };
    model.validate()?;
    let report = TrainReport {
        scheme: Scheme::Supervised,
        seed: cfg.seed,
        curve,
        best_epoch: best_loss.epoch,
        best: best_loss,
        wall_clock_s: started.elapsed().as_secs_f64(),
        refit,
    };
    Ok((model, report))
}

/// Continuous-time trainable parts: `(Phi, A_c, B_c, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousParts(pub LinearParts);

/// Records one RK4 step of the plant with `d_hat` as the only differentiable
/// input; the state anchors and tensions are data.
fn record_plant_step(tape: &mut Tape, x: &DMatrix<f64>, u: &[f64], dh: Var, t_s: f64) -> Result<Var> {
    let d = tape.value(dh).clone();
    let kb = x.ncols();
    let mut out = DMatrix::zeros(4, kb);
    let mut sens = DMatrix::zeros(4, kb);
    for j in 0..kb {
        let xs = State::from_array([x[(0, j)], x[(1, j)], x[(2, j)], x[(3, j)]]);
        let (next, _, sd) = step_held_with_sensitivity(&xs, u[j], d[(0, j)], t_s)?;
        out.column_mut(j).copy_from_slice(&next.to_array());
        sens.column_mut(j).copy_from_slice(&sd);
    }
    Ok(tape.custom(
        &[dh],
        out,
        Box::new(move |g| vec![DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).dot(&sens.column(j)))]),
    ))
}

/// One RK4 step of `z_dot = A_c z + B_c zeta` on the tape.
fn record_lifted_rk4(tape: &mut Tape, a_c: Var, b_c: Var, z: Var, zeta: Var, h: f64) -> Result<Var> {
    let forcing = tape.matmul(b_c, zeta)?;
    let field = |tape: &mut Tape, s: Var| -> Result<Var> {
        let az = tape.matmul(a_c, s)?;
        tape.add(az, forcing)
    };
    let k1 = field(tape, z)?;
    let s = tape.scale(k1, 0.5 * h);
    let z2 = tape.add(z, s)?;
    let k2 = field(tape, z2)?;
    let s = tape.scale(k2, 0.5 * h);
    let z3 = tape.add(z, s)?;
    let k3 = field(tape, z3)?;
    let s = tape.scale(k3, h);
    let z4 = tape.add(z, s)?;
    let k4 = field(tape, z4)?;
    let k23 = tape.add(k2, k3)?;
    let k23 = tape.scale(k23, 2.0);
    let acc = tape.add(k1, k23)?;
    let acc = tape.add(acc, k4)?;
    let acc = tape.scale(acc, h / 6.0);
    tape.add(z, acc)
}

/// Records the control-oriented loss; returns `(loss, count)` where `loss`
/// is the summed squared state error.
fn record_control_oriented(
    tape: &mut Tape,
    vars: &Recorded,
    parts: &LinearParts,
    trajs: &[Trajectory],
    feature: &FeatureConfig,
    t_s: f64,
) -> Result<(Var, usize)> {
    let n = parts.a.nrows();
    let mut terms = Vec::new();
    let mut count = 0usize;
    for g in group_by_length(trajs) {
        if g.m < 2 {
            return Err(Error::Length {
                context: "control-oriented loss",
                needed: 2,
                actual: g.m,
            });
        }
        let kb = g.trajs.len();
        let zeros_row = tape.constant(DMatrix::zeros(1, kb));
        let mut dh = zeros_row;
        let mut hist: Vec<Var> = vec![zeros_row; feature.t_unknown];
        let mut z = tape.constant(DMatrix::zeros(n, kb));
        for k in 0..g.m - 1 {
            let xk = states_at(&g, k);
            let uk: Vec<f64> = g.trajs.iter().map(|t| t.controls[k]).collect();
            let xhat = record_plant_step(tape, &xk, &uk, dh, t_s)?;
            let target = tape.constant(states_at(&g, k + 1));
            let e = tape.sub(xhat, target)?;
            terms.push(tape.sum_squares(e));
            count += 4 * kb;
            if k + 2 == g.m {
                break;
            }
            if k > 0 {
                z = parts.lifting.record_forward(tape, &vars.net, dh)?;
            }
            let mut parts_zeta = vec![tape.constant(xk)];
            if feature.include_u {
                parts_zeta.push(tape.constant(row_of(uk.into_iter())));
            }
            parts_zeta.extend(hist.iter().copied());
            let zeta = tape.vstack(&parts_zeta)?;
            let znext = record_lifted_rk4(tape, vars.a, vars.b, z, zeta, t_s)?;
            if feature.t_unknown > 0 {
                hist.rotate_right(1);
                hist[0] = dh;
            }
            dh = tape.matmul(vars.c, znext)?;
            z = znext;
        }
    }
    let mut acc = tape.constant(DMatrix::zeros(1, 1));
    for t in terms {
        acc = tape.add(acc, t)?;
    }
    Ok((acc, count))
}

/// Mean squared error between chained RK4 predictions anchored at the
/// measured states and the measured states themselves.
pub fn control_oriented_loss(parts: &ContinuousParts, trajs: &[Trajectory], feature: &FeatureConfig, t_s: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = Recorded::new(&mut tape, &parts.0);
    let (l, count) = record_control_oriented(&mut tape, &vars, &parts.0, trajs, feature, t_s)?;
    Ok(tape.scalar(l) / count.max(1) as f64)
}

/// Loss and parameter gradients in the order lifting, `A_c`, `B_c`, `C`.
pub fn control_oriented_gradient(
    parts: &ContinuousParts,
    trajs: &[Trajectory],
    feature: &FeatureConfig,
    t_s: f64,
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    let mut tape = Tape::new();
    let vars = Recorded::new(&mut tape, &parts.0);
    let (l, count) = record_control_oriented(&mut tape, &vars, &parts.0, trajs, feature, t_s)?;
    let scale = 1.0 / count.max(1) as f64;
    let l = tape.scale(l, scale);
    let grads = tape.backward(l)?;
    let out = vars
        .all()
        .iter()
        .zip(parts.0.shapes())
        .map(|(v, s)| grads.get_or_zeros(*v, s))
        .collect();
    Ok((tape.scalar(l), out))
}

/// Adam on the control-oriented loss with gradients through the RK4 rollout.
pub fn train_control_oriented(dataset: &Dataset, cfg: &TrainConfig) -> Result<(ContinuousProxy, TrainReport)> {
    let started = Instant::now();
    let trajs = check_dataset(dataset, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut parts = ContinuousParts(LinearParts::init(cfg, &mut rng)?);
    let mut opt = Adam::new(cfg.lr, &parts.0.shapes());
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let mut best: Option<(EpochLoss, ContinuousParts)> = None;
    for epoch in 0..=cfg.epochs {
        let (loss, grads) = control_oriented_gradient(&parts, &trajs, &cfg.feature, dataset.t_s)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        let rec = EpochLoss {
            epoch,
            total: loss,
            prediction: loss,
            reconstruction: 0.0,
            regularization: 0.0,
        };
        curve.push(rec);
        if best.as_ref().is_none_or(|(b, _)| loss < b.total) {
            best = Some((rec, parts.clone()));
        }
        if epoch < cfg.epochs {
            step_optimizer(&mut opt, &mut parts.0, &grads, cfg.spectral_norm)?;
        }
    }
    let (best_loss, ContinuousParts(p)) = best.expect("at least one epoch evaluated");
    let model = ContinuousProxy {
        a_c: p.a,
        b_c: p.b,
        c: p.c,
        lifting: p.lifting,
        t_s: dataset.t_s,
        feature: cfg.feature,
    };
    model.validate()?;
    let report = TrainReport {
        scheme: Scheme::ControlOriented,
        seed: cfg.seed,
        curve,
        best_epoch: best_loss.epoch,
        best: best_loss,
        wall_clock_s: started.elapsed().as_secs_f64(),
        refit: None,
    };
    Ok((model, report))
}

/// Chained prediction with `z_0 = 0`: `d_k = C z_k`, the plant is stepped
/// with `d_k` held, and `z_{k+1} = A Phi(d_k) + B zeta_k` (with `Phi(d_0)`
/// replaced by `z_0`). Each step starts from `anchors[k]` when given,
/// otherwise from the previous prediction. `proxy = None` means `d = 0`.
///
/// Returns predicted states for samples `1..horizon` and the `d` sequence.
pub fn rollout_prediction(
    x0: &State,
    controls: &[f64],
    proxy: Option<&ProxyModel>,
    horizon: usize,
    anchors: Option<&[State]>,
) -> Result<(Vec<State>, Vec<f64>)> {
    if horizon < 2 || controls.len() + 1 < horizon {
        return Err(Error::Length {
            context: "rollout prediction",
            needed: horizon.max(2) - 1,
            actual: controls.len(),
        });
    }
    let mut xs = Vec::with_capacity(horizon - 1);
    let mut ds = Vec::with_capacity(horizon - 1);
    let mut x = *x0;
    let mut z = proxy.map(|p| DVector::zeros(p.lifted_dim()));
    let mut hist = vec![0.0; proxy.map_or(0, |p| p.feature.t_unknown)];
    let t_s = proxy.map_or(crate::dynamics::DEFAULT_TS, |p| p.t_s);
    for k in 0..horizon - 1 {
        let base = anchors.and_then(|a| a.get(k)).copied().unwrap_or(x);
        let d = match (proxy, &z) {
            (Some(p), Some(zk)) => p.recover(zk),
            _ => 0.0,
        };
        ds.push(d);
        let next = step_held(&base, controls[k], d, t_s)?;
        if let (Some(p), Some(zk)) = (proxy, z.as_mut()) {
            let lifted = if k == 0 { zk.clone() } else { p.lift(d) };
            let zeta = build_feature(&p.feature, &base, controls[k], &hist);
            *zk = p.step(&lifted, &zeta)?;
            if !hist.is_empty() {
                hist.rotate_right(1);
                hist[0] = d;
            }
        }
        xs.push(next);
        x = next;
    }
    Ok((xs, ds))
}
