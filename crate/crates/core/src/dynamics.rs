//! In-plane deployment dynamics of a tethered space robot in dimensionless form.
//!
//! Time is the true anomaly `tau = Omega * t`, tether length enters as
//! `lambda = l / L - 1`, and the tension as `u = T / (Omega^2 L m_eq)`.
//! The state is `[alpha, lambda, alpha', lambda']` with derivatives taken
//! with respect to `tau`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible value of `1 + lambda`.
pub const SINGULARITY_GUARD: f64 = 1e-9;

/// Sampling interval used throughout the experiments (dimensionless time).
pub const DEFAULT_TS: f64 = 0.01;

/// Tension that holds the robot at the origin with no uncertainty.
pub const EQUILIBRIUM_TENSION: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub alpha: f64,
    pub lam: f64,
    pub dalpha: f64,
    pub dlam: f64,
}

impl State {
    pub const ORIGIN: State = State::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(alpha: f64, lam: f64, dalpha: f64, dlam: f64) -> Self {
        State {
            alpha,
            lam,
            dalpha,
            dlam,
        }
    }

    pub const fn from_array(a: [f64; 4]) -> Self {
        State::new(a[0], a[1], a[2], a[3])
    }

    pub const fn to_array(self) -> [f64; 4] {
        [self.alpha, self.lam, self.dalpha, self.dlam]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// `1 + lambda` is above the singularity guard.
    pub fn is_admissible(&self) -> bool {
        self.is_finite() && self.lam > -1.0 + SINGULARITY_GUARD
    }

    /// Inside the nominal admissible set `-1 < lambda <= 0`.
    pub fn in_nominal_set(&self) -> bool {
        self.is_admissible() && self.lam <= 0.0
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.is_admissible() {
            Ok(())
        } else {
            Err(Error::Singularity {
                lam: self.lam,
                guard: SINGULARITY_GUARD,
            })
        }
    }

    fn axpy(self, h: f64, k: [f64; 4]) -> State {
        let a = self.to_array();
        State::from_array([
            a[0] + h * k[0],
            a[1] + h * k[1],
            a[2] + h * k[2],
            a[3] + h * k[3],
        ])
    }
}

impl From<[f64; 4]> for State {
    fn from(a: [f64; 4]) -> Self {
        State::from_array(a)
    }
}

/// Time derivative of the state with respect to `tau`.
pub type StateDerivative = [f64; 4];

/// Uncontrolled, undisturbed vector field `f(x)`.
pub fn drift(x: &State) -> Result<StateDerivative> {
    x.check()?;
    let (s, c) = x.alpha.sin_cos();
    let one_lam = 1.0 + x.lam;
    let one_da = 1.0 + x.dalpha;
    Ok([
        x.dalpha,
        x.dlam,
        -2.0 * x.dlam / one_lam * one_da - 3.0 * s * c,
        one_lam * (one_da * one_da + 3.0 * c * c - 1.0),
    ])
}

/// Jacobian of [`drift`] with respect to the state, row-major.
pub fn drift_jacobian(x: &State) -> Result<[[f64; 4]; 4]> {
    x.check()?;
    let (s, c) = x.alpha.sin_cos();
    let one_lam = 1.0 + x.lam;
    let one_da = 1.0 + x.dalpha;
    let cos2a = c * c - s * s;
    Ok([
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [
            -3.0 * cos2a,
            2.0 * x.dlam * one_da / (one_lam * one_lam),
            -2.0 * x.dlam / one_lam,
            -2.0 * one_da / one_lam,
        ],
        [
            -6.0 * one_lam * s * c,
            one_da * one_da + 3.0 * c * c - 1.0,
            2.0 * one_lam * one_da,
            0.0,
        ],
    ])
}

/// Full vector field `f(x) + B_u u + B_d d` with `B_u = -e4` and `B_d = e4`.
pub fn rhs(x: &State, u: f64, d: f64) -> Result<StateDerivative> {
    let mut dx = drift(x)?;
    dx[3] += d - u;
    Ok(dx)
}

/// Classic explicit fourth-order Runge-Kutta step.
///
/// `field(offset, x)` is evaluated at the four stages with `offset` in
/// `{0, dt/2, dt/2, dt}`, so time-varying inputs can be sampled inside the step.
pub fn rk4_step<F>(mut field: F, x: &State, dt: f64) -> Result<State>
where
    F: FnMut(f64, &State) -> Result<StateDerivative>,
{
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("rk4 step must be positive, got {dt}")));
    }
    let k1 = field(0.0, x)?;
    let x2 = x.axpy(0.5 * dt, k1);
    x2.check()?;
    let k2 = field(0.5 * dt, &x2)?;
    let x3 = x.axpy(0.5 * dt, k2);
    x3.check()?;
    let k3 = field(0.5 * dt, &x3)?;
    let x4 = x.axpy(dt, k3);
    x4.check()?;
    let k4 = field(dt, &x4)?;
    let mut out = x.to_array();
    for i in 0..4 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    let out = State::from_array(out);
    out.check()?;
    Ok(out)
}

/// One RK4 step with constant tension and constant uncertainty.
pub fn step_held(x: &State, u: f64, d: f64, dt: f64) -> Result<State> {
    rk4_step(|_, s| rhs(s, u, d), x, dt)
}

/// One RK4 step with constant `u` and `d`, together with the sensitivities of
/// the result with respect to the initial state (4x4, row-major) and to `u`
/// and `d` (since `B_d = -B_u` the `u` column is the negated `d` column).
pub fn step_held_with_sensitivity(
    x: &State,
    u: f64,
    d: f64,
    dt: f64,
) -> Result<(State, [[f64; 4]; 4], [f64; 4])> {
    // Forward-mode tangents propagated through the four stages.
    // Columns 0..4 are the state directions, column 4 the `d` direction.
    type Tan = [[f64; 5]; 4];
    let stage = |s: &State, ds: &Tan| -> Result<(StateDerivative, Tan)> {
        let k = rhs(s, u, d)?;
        let j = drift_jacobian(s)?;
        let mut dk = [[0.0; 5]; 4];
        for r in 0..4 {
            for c in 0..5 {
                let mut acc = 0.0;
                for m in 0..4 {
                    acc += j[r][m] * ds[m][c];
                }
                dk[r][c] = acc;
            }
        }
        dk[3][4] += 1.0;
        Ok((k, dk))
    };
    let mut t0: Tan = [[0.0; 5]; 4];
    for (i, row) in t0.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let comb = |base: &Tan, h: f64, dk: &Tan| -> Tan {
        let mut out = *base;
        for r in 0..4 {
            for c in 0..5 {
                out[r][c] += h * dk[r][c];
            }
        }
        out
    };
    let (k1, d1) = stage(x, &t0)?;
    let x2 = x.axpy(0.5 * dt, k1);
    let (k2, d2) = stage(&x2, &comb(&t0, 0.5 * dt, &d1))?;
    let x3 = x.axpy(0.5 * dt, k2);
    let (k3, d3) = stage(&x3, &comb(&t0, 0.5 * dt, &d2))?;
    let x4 = x.axpy(dt, k3);
    let (k4, d4) = stage(&x4, &comb(&t0, dt, &d3))?;
    let mut out = x.to_array();
    let mut jac = [[0.0; 4]; 4];
    let mut sens_d = [0.0; 4];
    for r in 0..4 {
        out[r] += dt / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
        for c in 0..5 {
            let v = t0[r][c] + dt / 6.0 * (d1[r][c] + 2.0 * d2[r][c] + 2.0 * d3[r][c] + d4[r][c]);
            if c < 4 {
                jac[r][c] = v;
            } else {
                sens_d[r] = v;
            }
        }
    }
    let out = State::from_array(out);
    out.check()?;
    Ok((out, jac, sens_d))
}

/// Linear feedback used to excite the plant while collecting training data,
/// `u = 4 lambda + 2 lambda' + 3`, clamped at zero.
pub fn data_collection_controller(x: &State) -> f64 {
    clamp_tension(4.0 * x.lam + 2.0 * x.dlam + 3.0)
}

/// Tethers cannot push.
pub fn clamp_tension(u: f64) -> f64 {
    u.max(0.0)
}

/// Physical parameters of the platform/robot pair on a circular orbit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemParams {
    /// Nominal (fully deployed) tether length `L` [m].
    pub tether_length: f64,
    /// Orbital angular rate `Omega` [rad/s].
    pub orbit_rate: f64,
    /// [kg]
    pub mass_platform: f64,
    /// [kg]
    pub mass_robot: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams::reference()
    }
}

impl SystemParams {
    pub fn new(tether_length: f64, orbit_rate: f64, mass_platform: f64, mass_robot: f64) -> Result<Self> {
        let p = SystemParams {
            tether_length,
            orbit_rate,
            mass_platform,
            mass_robot,
        };
        p.validate()?;
        Ok(p)
    }

    /// The 10 km tether, 10 kg equivalent mass, 0.0017 rad/s orbit used for the
    /// predictive-control deployment.
    pub fn reference() -> Self {
        SystemParams {
            tether_length: 10_000.0,
            orbit_rate: 0.0017,
            mass_platform: 20.0,
            mass_robot: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.tether_length,
            self.orbit_rate,
            self.mass_platform,
            self.mass_robot,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("system parameters must be positive: {self:?}")))
        }
    }

    /// `m_p m_r / (m_p + m_r)`
    pub fn equivalent_mass(&self) -> f64 {
        self.mass_platform * self.mass_robot / (self.mass_platform + self.mass_robot)
    }

    fn tension_scale(&self) -> f64 {
        self.orbit_rate * self.orbit_rate * self.tether_length * self.equivalent_mass()
    }

    pub fn to_dimensionless(&self, q: Dimensional) -> Result<Dimensionless> {
        self.validate()?;
        Ok(Dimensionless {
            lam: q.length / self.tether_length - 1.0,
            dlam: q.length_rate / (self.orbit_rate * self.tether_length),
            tau: self.orbit_rate * q.time,
            u: q.tension / self.tension_scale(),
        })
    }

    pub fn to_dimensional(&self, q: Dimensionless) -> Result<Dimensional> {
        self.validate()?;
        Ok(Dimensional {
            length: (q.lam + 1.0) * self.tether_length,
            length_rate: q.dlam * self.orbit_rate * self.tether_length,
            time: q.tau / self.orbit_rate,
            tension: q.u * self.tension_scale(),
        })
    }
}

/// Tether length [m], length rate [m/s], time [s] and tension [N].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dimensional {
    pub length: f64,
    pub length_rate: f64,
    pub time: f64,
    pub tension: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dimensionless {
    pub lam: f64,
    pub dlam: f64,
    pub tau: f64,
    pub u: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn drift_at_origin() {
        assert_eq!(drift(&State::ORIGIN).unwrap(), [0.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn drift_symmetry_case() {
        let x = State::new(std::f64::consts::FRAC_PI_2, -0.5, 0.0, 0.0);
        let f = drift(&x).unwrap();
        for v in f {
            assert!(v.abs() < 1e-15, "{f:?}");
        }
    }

    #[test]
    fn drift_matches_symbolic_substitution() {
        // 30-digit evaluation of the four rows at [0.1, -0.9, 0.2, -0.3].
        let f = drift(&State::new(0.1, -0.9, 0.2, -0.3)).unwrap();
        assert_relative_eq!(f[0], 0.2, epsilon = 1e-15);
        assert_relative_eq!(f[1], -0.3, epsilon = 1e-15);
        assert_relative_eq!(f[2], 6.901_996_003_807_408, epsilon = 1e-12);
        assert_relative_eq!(f[3], 0.341_009_986_676_186_2, epsilon = 1e-13);
    }

    #[test]
    fn singularity_is_reported() {
        let err = drift(&State::new(0.0, -1.0, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Singularity { .. }));
        assert!(drift(&State::new(0.0, -1.0 + 1e-10, 0.0, 0.0)).is_err());
        assert!(drift(&State::new(0.0, -1.0 + 1e-8, 0.0, 0.0)).is_ok());
    }

    #[test]
    fn rhs_examples() {
        assert_eq!(rhs(&State::ORIGIN, 3.0, 0.0).unwrap(), [0.0; 4]);
        assert_eq!(rhs(&State::ORIGIN, 0.0, -3.0).unwrap(), [0.0; 4]);
        let x = State::new(0.0, -0.99, 0.0, 1.5);
        let f = drift(&x).unwrap();
        let g = rhs(&x, 2.04, 0.2).unwrap();
        assert_eq!(&g[..3], &f[..3]);
        assert_relative_eq!(g[3] - f[3], -1.84, epsilon = 1e-14);
    }

    #[test]
    fn rk4_on_linear_decay() {
        // Same integrator applied to x' = -x embedded in the first coordinate.
        let x = State::new(1.0, 0.0, 0.0, 0.0);
        let y = rk4_step(|_, s| Ok([-s.alpha, 0.0, 0.0, 0.0]), &x, 0.1).unwrap();
        assert_relative_eq!(y.alpha, 0.904_837_5, epsilon = 1e-7);
        assert!((y.alpha - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn fixed_point_is_preserved() {
        let y = step_held(&State::ORIGIN, 3.0, 0.0, 0.01).unwrap();
        assert_eq!(y, State::ORIGIN);
    }

    #[test]
    fn rk4_rejects_nonpositive_step() {
        assert!(step_held(&State::ORIGIN, 3.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn rk4_local_error_is_fifth_order() {
        let x = State::new(0.3, -0.5, 0.2, 0.4);
        let reference = |h: f64| {
            let mut s = x;
            for _ in 0..10 {
                s = step_held(&s, 0.0, 0.0, h / 10.0).unwrap();
            }
            s
        };
        let err = |h: f64| {
            let a = step_held(&x, 0.0, 0.0, h).unwrap().to_array();
            let b = reference(h).to_array();
            a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
        };
        let ratio = err(0.2) / err(0.1);
        assert!((24.0..40.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn sensitivity_matches_finite_differences() {
        let x = State::new(0.2, -0.6, -0.3, 0.5);
        let (u, d, dt) = (2.5, 0.15, 0.01);
        let (_, jac, sd) = step_held_with_sensitivity(&x, u, d, dt).unwrap();
        let h = 1e-6;
        for c in 0..4 {
            let mut xp = x.to_array();
            let mut xm = x.to_array();
            xp[c] += h;
            xm[c] -= h;
            let p = step_held(&xp.into(), u, d, dt).unwrap().to_array();
            let m = step_held(&xm.into(), u, d, dt).unwrap().to_array();
            for r in 0..4 {
                assert_relative_eq!(jac[r][c], (p[r] - m[r]) / (2.0 * h), epsilon = 1e-7);
            }
        }
        let p = step_held(&x, u, d + h, dt).unwrap().to_array();
        let m = step_held(&x, u, d - h, dt).unwrap().to_array();
        for r in 0..4 {
            assert_relative_eq!(sd[r], (p[r] - m[r]) / (2.0 * h), epsilon = 1e-9);
        }
    }

    #[test]
    fn conversion_examples() {
        let p = SystemParams::reference();
        assert_relative_eq!(p.equivalent_mass(), 10.0);
        let q = p
            .to_dimensionless(Dimensional {
                length: 10_000.0,
                length_rate: 0.5,
                time: 0.0,
                tension: 0.0,
            })
            .unwrap();
        assert_eq!(q.lam, 0.0);
        assert_relative_eq!(q.dlam, 0.5 / (0.0017 * 10_000.0), epsilon = 1e-15);
        assert!((q.dlam - 0.0294).abs() < 1e-4);
        let t = p
            .to_dimensional(Dimensionless {
                lam: 0.0,
                dlam: 0.0,
                tau: 0.0,
                u: 3.0,
            })
            .unwrap();
        assert_relative_eq!(t.tension, 3.0 * 0.0017 * 0.0017 * 10_000.0 * 10.0, epsilon = 1e-15);
        assert!((t.tension - 0.867).abs() < 1e-3);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(SystemParams::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(SystemParams::new(1.0, 1.0, -1.0, 1.0).is_err());
        let p = SystemParams::new(1.0, 1.0, 2.0, 3.0).unwrap();
        assert!(p.equivalent_mass() < 2.0);
    }

    #[test]
    fn collection_controller_examples() {
        assert_eq!(data_collection_controller(&State::ORIGIN), 3.0);
        assert_relative_eq!(
            data_collection_controller(&State::new(0.0, -0.99, 0.0, 1.5)),
            2.04,
            epsilon = 1e-12
        );
        assert_eq!(data_collection_controller(&State::new(0.0, -0.99, 0.0, -1.6)), 0.0);
    }
}
