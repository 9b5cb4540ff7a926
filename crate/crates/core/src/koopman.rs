//! Lifted linear proxy of the uncertainty:
//! `z' = A z + B zeta`, `d = C z`, `z = Phi(d)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::matfun;
use crate::nn::Mlp;

/// Damping used by every least-squares solve unless configured otherwise.
pub const DEFAULT_DAMPING: f64 = 1e-8;

/// Layout of the feature vector `zeta = [x, u, d_{k-1}, ..., d_{k-T}]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Number of past uncertainty values standing in for the unknown vector.
    pub t_unknown: usize,
    pub include_u: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            t_unknown: 1,
            include_u: true,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        4 + usize::from(self.include_u) + self.t_unknown
    }

    /// Row of `u` inside `zeta`, if present.
    pub fn u_index(&self) -> Option<usize> {
        self.include_u.then_some(4)
    }

    /// Row of the most recent history entry, if any.
    pub fn hist_index(&self) -> Option<usize> {
        (self.t_unknown > 0).then(|| 4 + usize::from(self.include_u))
    }
}

/// Concatenates `(x, u, d_hist)`; `d_hist[0]` is the most recent value and
/// missing entries are zero-filled.
pub fn build_feature(cfg: &FeatureConfig, x: &State, u: f64, d_hist: &[f64]) -> DVector<f64> {
    let mut v = Vec::with_capacity(cfg.dim());
    v.extend_from_slice(&x.to_array());
    if cfg.include_u {
        v.push(u);
    }
    for i in 0..cfg.t_unknown {
        v.push(d_hist.get(i).copied().unwrap_or(0.0));
    }
    DVector::from_vec(v)
}

/// Discrete lifted linear system with its lifting network.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub lifting: Mlp,
    pub t_s: f64,
    pub feature: FeatureConfig,
}

/// Continuous-time twin: `z_dot = A_c z + B_c zeta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousProxy {
    pub a_c: DMatrix<f64>,
    pub b_c: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub lifting: Mlp,
    pub t_s: f64,
    pub feature: FeatureConfig,
}

fn check_operator(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    lifting: &Mlp,
    feature: &FeatureConfig,
) -> Result<()> {
    lifting.validate()?;
    let n = lifting.output_dim();
    if lifting.input_dim() != 1 {
        return Err(Error::shape("lifting input", 1, lifting.input_dim()));
    }
    if a.shape() != (n, n) {
        return Err(Error::shape("A", format!("{n}x{n}"), format!("{:?}", a.shape())));
    }
    if b.shape() != (n, feature.dim()) {
        return Err(Error::shape("B", format!("{n}x{}", feature.dim()), format!("{:?}", b.shape())));
    }
    if c.shape() != (1, n) {
        return Err(Error::shape("C", format!("1x{n}"), format!("{:?}", c.shape())));
    }
    if ![a, b, c].iter().all(|m| m.iter().all(|v| v.is_finite())) {
        return Err(Error::Invalid("proxy operator has non-finite entries".into()));
    }
    Ok(())
}

impl ProxyModel {
    pub fn validate(&self) -> Result<()> {
        check_operator(&self.a, &self.b, &self.c, &self.lifting, &self.feature)?;
        if !(self.t_s > 0.0) {
            return Err(Error::Invalid(format!("sampling interval must be positive, got {}", self.t_s)));
        }
        Ok(())
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn lift(&self, d: f64) -> DVector<f64> {
        let out = self
            .lifting
            .forward(&DMatrix::from_element(1, 1, d))
            .expect("lifting validated to take a scalar");
        DVector::from_column_slice(out.as_slice())
    }

    /// Lifts every entry of `d` (one column each).
    pub fn lift_many(&self, d: &[f64]) -> DMatrix<f64> {
        self.lifting
            .forward(&DMatrix::from_row_slice(1, d.len(), d))
            .expect("lifting validated to take a scalar")
    }

    pub fn step(&self, z: &DVector<f64>, zeta: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.a.ncols() {
            return Err(Error::shape("lifted state", self.a.ncols(), z.len()));
        }
        if zeta.len() != self.b.ncols() {
            return Err(Error::shape("feature vector", self.b.ncols(), zeta.len()));
        }
        Ok(&self.a * z + &self.b * zeta)
    }

    pub fn recover(&self, z: &DVector<f64>) -> f64 {
        (&self.c * z)[(0, 0)]
    }

    /// One-step prediction from a measured uncertainty and the feature
    /// vector of the same instant: `C (A Phi(d) + B zeta)`.
    pub fn predict_next(&self, d: f64, zeta: &DVector<f64>) -> Result<f64> {
        Ok(self.recover(&self.step(&self.lift(d), zeta)?))
    }

    pub fn to_continuous(&self) -> Result<ContinuousProxy> {
        let (a_c, b_c) = matfun::discrete_to_continuous(&self.a, &self.b, self.t_s)?;
        Ok(ContinuousProxy {
            a_c,
            b_c,
            c: self.c.clone(),
            lifting: self.lifting.clone(),
            t_s: self.t_s,
            feature: self.feature,
        })
    }
}

impl ContinuousProxy {
    pub fn validate(&self) -> Result<()> {
        check_operator(&self.a_c, &self.b_c, &self.c, &self.lifting, &self.feature)
    }

    pub fn to_discrete(&self) -> Result<ProxyModel> {
        let (a, b) = matfun::continuous_to_discrete(&self.a_c, &self.b_c, self.t_s)?;
        Ok(ProxyModel {
            a,
            b,
            c: self.c.clone(),
            lifting: self.lifting.clone(),
            t_s: self.t_s,
            feature: self.feature,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmdFit {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `G G^T` was numerically singular and no damping had been requested.
    pub rank_deficient: bool,
    pub damping: f64,
}

/// Damped least squares for `Z2 ≈ A Z1 + B Delta`:
/// `[A B] = Z2 G^T (G G^T + damping I)^{-1}` with `G = [Z1; Delta]`.
pub fn edmd_fit(z1: &DMatrix<f64>, z2: &DMatrix<f64>, delta: &DMatrix<f64>, damping: f64) -> Result<EdmdFit> {
    let n = z1.nrows();
    let p = delta.nrows();
    let t = z1.ncols();
    if z2.ncols() != t || delta.ncols() != t {
        return Err(Error::shape("edmd column counts", t, format!("{} and {}", z2.ncols(), delta.ncols())));
    }
    if z2.nrows() != n {
        return Err(Error::shape("edmd lifted rows", n, z2.nrows()));
    }
    if !(damping >= 0.0) || !damping.is_finite() {
        return Err(Error::Invalid(format!("damping must be finite and >= 0, got {damping}")));
    }
    let mut g = DMatrix::<f64>::zeros(n + p, t);
    g.view_mut((0, 0), (n, t)).copy_from(z1);
    g.view_mut((n, 0), (p, t)).copy_from(delta);
    let gram = &g * g.transpose();
    let cross = &g * z2.transpose();
    Ok(solve_normal_equations(gram, cross, n, damping))
}

/// Solves `(gram + damping I) X = cross` and splits `X^T` into `[A B]`.
pub(crate) fn solve_normal_equations(gram: DMatrix<f64>, cross: DMatrix<f64>, n: usize, damping: f64) -> EdmdFit {
    let k = gram.nrows();
    let mut rank_deficient = false;
    let mut used = damping;
    if damping == 0.0 {
        let eig = gram.clone().symmetric_eigenvalues();
        let top = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let low = eig.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        if top == 0.0 || low <= top * 1e-13 {
            rank_deficient = true;
            used = DEFAULT_DAMPING;
            log::warn!("least-squares Gram matrix is rank deficient; applying damping {used:e}");
        }
    }
    let mut lhs = gram;
    for i in 0..k {
        lhs[(i, i)] += used;
    }
    let sol = match lhs.clone().cholesky() {
        Some(ch) => ch.solve(&cross),
        None => {
            // Only reachable with damping 0 and a barely positive spectrum.
            rank_deficient = true;
            used = used.max(DEFAULT_DAMPING);
            for i in 0..k {
                lhs[(i, i)] += DEFAULT_DAMPING;
            }
            lhs.cholesky().map(|ch| ch.solve(&cross)).unwrap_or_else(|| DMatrix::zeros(k, cross.ncols()))
        }
    };
    let ab = sol.transpose();
    EdmdFit {
        a: ab.columns(0, n).into_owned(),
        b: ab.columns(n, k - n).into_owned(),
        rank_deficient,
        damping: used,
    }
}

/// `||Z2 - A Z1 - B Delta||_F`
pub fn edmd_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, z1: &DMatrix<f64>, z2: &DMatrix<f64>, delta: &DMatrix<f64>) -> f64 {
    (z2 - a * z1 - b * delta).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_layout() {
        let cfg = FeatureConfig::default();
        assert_eq!(build_feature(&cfg, &State::ORIGIN, 0.0, &[0.0]), DVector::zeros(6));
        let f = build_feature(&cfg, &State::new(0.0, -0.99, 0.0, 1.5), 2.04, &[0.2]);
        assert_eq!(f.as_slice(), &[0.0, -0.99, 0.0, 1.5, 2.04, 0.2]);
        let two = FeatureConfig {
            t_unknown: 2,
            include_u: true,
        };
        let f = build_feature(&two, &State::ORIGIN, 1.0, &[0.3, 0.1]);
        assert_eq!(f.len(), 7);
        assert_eq!(f[5], 0.3);
        assert_eq!(f[6], 0.1);
        assert_eq!(build_feature(&two, &State::ORIGIN, 1.0, &[]).rows(5, 2).sum(), 0.0);
    }

    fn small_model(rng: &mut ChaCha8Rng) -> ProxyModel {
        let lifting = Mlp::init(&[1, 8, 3], Activation::Relu, false, rng).unwrap();
        ProxyModel {
            a: DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.5..0.5)),
            b: DMatrix::from_fn(3, 6, |_, _| rng.gen_range(-0.5..0.5)),
            c: DMatrix::from_fn(1, 3, |_, _| rng.gen_range(-0.5..0.5)),
            lifting,
            t_s: 0.01,
            feature: FeatureConfig::default(),
        }
    }

    #[test]
    fn lift_step_recover() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = small_model(&mut rng);
        m.validate().unwrap();
        let z = m.lift(0.37);
        assert_eq!(z, m.lift(0.37));
        assert_eq!(z.as_slice(), m.lifting.forward_vec(&[0.37]).unwrap().as_slice());
        let zeta = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let next = m.step(&z, &zeta).unwrap();
        for i in 0..3 {
            let mut want = 0.0;
            for j in 0..3 {
                want += m.a[(i, j)] * z[j];
            }
            for j in 0..6 {
                want += m.b[(i, j)] * zeta[j];
            }
            assert!((next[i] - want).abs() < 1e-15);
        }
        assert!(m.step(&DVector::zeros(3), &DVector::zeros(6)).unwrap().iter().all(|v| *v == 0.0));
        assert!(m.step(&z, &DVector::zeros(5)).is_err());
        let r = m.recover(&next);
        assert!((r - (0..3).map(|i| m.c[(0, i)] * next[i]).sum::<f64>()).abs() < 1e-15);
        let mut e = small_model(&mut rng);
        e.c = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        assert_eq!(e.recover(&DVector::from_column_slice(&[1.0, 0.0, 0.0])), 1.0);
    }

    #[test]
    fn edmd_scalar_example() {
        let zeta: Vec<f64> = (0..10).map(|i| ((i * i) as f64 * 0.37).sin()).collect();
        let mut z = vec![1.0];
        for i in 0..9 {
            z.push(0.5 * z[i] + 2.0 * zeta[i]);
        }
        let z1 = DMatrix::from_row_slice(1, 9, &z[..9]);
        let z2 = DMatrix::from_row_slice(1, 9, &z[1..]);
        let d = DMatrix::from_row_slice(1, 9, &zeta[..9]);
        let fit = edmd_fit(&z1, &z2, &d, 0.0).unwrap();
        assert!(!fit.rank_deficient);
        assert!((fit.a[(0, 0)] - 0.5).abs() < 1e-10);
        assert!((fit.b[(0, 0)] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn edmd_identity_and_ridge_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z1 = DMatrix::from_fn(3, 12, |_, _| rng.gen_range(-1.0..1.0));
        let fit = edmd_fit(&z1, &z1, &DMatrix::zeros(2, 12), 0.0).unwrap();
        assert!(fit.rank_deficient);
        assert!((fit.a - DMatrix::<f64>::identity(3, 3)).norm() < 1e-6);
        assert!(fit.b.norm() < 1e-12);
        let big = edmd_fit(&z1, &z1, &DMatrix::from_element(2, 12, 1.0), 1e12).unwrap();
        assert!(big.a.norm() < 1e-9 && big.b.norm() < 1e-9);
    }

    #[test]
    fn edmd_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z1 = DMatrix::from_fn(4, 30, |_, _| rng.gen_range(-1.0..1.0));
        let d = DMatrix::from_fn(2, 30, |_, _| rng.gen_range(-1.0..1.0));
        let z2 = DMatrix::from_fn(4, 30, |_, _| rng.gen_range(-1.0..1.0));
        let fit = edmd_fit(&z1, &z2, &d, 0.0).unwrap();
        let best = edmd_residual(&fit.a, &fit.b, &z1, &z2, &d);
        for _ in 0..10 {
            let mut da = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let mut db = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
            da *= 1e-3 / da.norm();
            db *= 1e-3 / db.norm();
            assert!(best <= edmd_residual(&(&fit.a + da), &(&fit.b + db), &z1, &z2, &d));
        }
    }

    #[test]
    fn continuous_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut m = small_model(&mut rng);
        m.a = DMatrix::from_row_slice(3, 3, &[0.9, 0.05, 0.0, 0.0, 0.8, 0.1, 0.0, 0.0, 0.95]);
        let back = m.to_continuous().unwrap().to_discrete().unwrap();
        assert!((back.a - &m.a).norm() < 1e-10);
        assert!((back.b - &m.b).norm() < 1e-10);
    }
}
