//! Dense matrix functions: principal logarithm and zero-order-hold conversion.
//!
//! The exponential comes from nalgebra (scaling and squaring with Padé). The
//! logarithm is computed here by inverse scaling and squaring on the real
//! Schur form, which keeps the two directions of the ZOH conversion
//! independent of each other.

use nalgebra::{linalg::Schur, DMatrix};

use crate::error::{Error, Result};

/// Largest 1-norm of `T - I` handed to the Padé stage.
const LOG_PADE_RADIUS: f64 = 0.25;
const LOG_PADE_NODES: usize = 8;
const MAX_SQRTS: usize = 64;

pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().exp()
}

/// Principal matrix logarithm.
///
/// Fails when `a` has an eigenvalue on the closed negative real axis.
pub fn logm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::shape("logm", format!("{n}x{n}"), format!("{}x{}", n, a.ncols())));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::LogDomain("non-finite entries".into()));
    }
    let (q, mut t) = Schur::try_new(a.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::LogDomain("real Schur iteration did not converge".into()))?
        .unpack();
    let blocks = quasi_blocks(&t);
    for &(i, size) in &blocks {
        check_block_spectrum(&t, i, size)?;
    }

    let eye = DMatrix::<f64>::identity(n, n);
    let mut sqrts = 0;
    while one_norm(&(&t - &eye)) > LOG_PADE_RADIUS {
        if sqrts == MAX_SQRTS {
            return Err(Error::LogDomain("square-root iteration did not approach identity".into()));
        }
        t = quasi_sqrt(&t, &blocks)?;
        sqrts += 1;
    }
    let x = &t - &eye;
    let mut log = DMatrix::<f64>::zeros(n, n);
    for (node, weight) in gauss_legendre_unit(LOG_PADE_NODES) {
        let m = &eye + &x * node;
        let sol = m
            .lu()
            .solve(&x)
            .ok_or_else(|| Error::LogDomain("singular Padé denominator".into()))?;
        log += sol * weight;
    }
    log *= (1u64 << sqrts) as f64;
    Ok(&q * log * q.transpose())
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Diagonal blocks of a quasi-upper-triangular matrix as `(start, size)`.
fn quasi_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            out.push((i, 2));
            i += 2;
        } else {
            out.push((i, 1));
            i += 1;
        }
    }
    out
}

fn check_block_spectrum(t: &DMatrix<f64>, i: usize, size: usize) -> Result<()> {
    let bad = |lam: f64| Err(Error::LogDomain(format!("eigenvalue {lam} on the closed negative real axis")));
    if size == 1 {
        let lam = t[(i, i)];
        return if lam > 0.0 { Ok(()) } else { bad(lam) };
    }
    let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
    let half_tr = 0.5 * (a + d);
    let det = a * d - b * c;
    let disc = half_tr * half_tr - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        for lam in [half_tr - r, half_tr + r] {
            if lam <= 0.0 {
                return bad(lam);
            }
        }
    }
    Ok(())
}

/// Principal square root of a quasi-upper-triangular matrix, block by block.
fn quasi_sqrt(t: &DMatrix<f64>, blocks: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    let mut r = DMatrix::<f64>::zeros(n, n);
    for (jb, &(j, q)) in blocks.iter().enumerate() {
        let tjj = t.view((j, j), (q, q)).into_owned();
        let rjj = block_sqrt(&tjj)?;
        r.view_mut((j, j), (q, q)).copy_from(&rjj);
        for ib in (0..jb).rev() {
            let (i, p) = blocks[ib];
            let mut rhs = t.view((i, j), (p, q)).into_owned();
            for &(k, s) in &blocks[ib + 1..jb] {
                rhs -= r.view((i, k), (p, s)) * r.view((k, j), (s, q));
            }
            let rii = r.view((i, i), (p, p)).into_owned();
            let x = solve_sylvester_small(&rii, &rjj, &rhs)?;
            r.view_mut((i, j), (p, q)).copy_from(&x);
        }
    }
    Ok(r)
}

fn block_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 1 {
        return Ok(DMatrix::from_element(1, 1, m[(0, 0)].sqrt()));
    }
    // For a 2x2 block without eigenvalues on the closed negative axis,
    // sqrt(M) = (M + s I) / t with s = sqrt(det M), t = sqrt(tr M + 2 s).
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let s = det.sqrt();
    let t = (m[(0, 0)] + m[(1, 1)] + 2.0 * s).sqrt();
    if !(t > 0.0) || !s.is_finite() {
        return Err(Error::LogDomain("2x2 block has no principal square root".into()));
    }
    Ok((m + DMatrix::identity(2, 2) * s) / t)
}

/// Solves `A X + X B = C` for blocks of size at most 2.
fn solve_sylvester_small(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, q) = (a.nrows(), b.nrows());
    let k = DMatrix::<f64>::identity(q, q).kronecker(a) + b.transpose().kronecker(&DMatrix::identity(p, p));
    let vec = DMatrix::from_column_slice(p * q, 1, c.as_slice());
    let sol = k
        .lu()
        .solve(&vec)
        .ok_or_else(|| Error::LogDomain("singular Sylvester system in square root".into()))?;
    Ok(DMatrix::from_column_slice(p, q, sol.as_slice()))
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(m: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(m);
    for i in 1..=m {
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (m as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pm = if m == 1 { x } else { p1 };
            let pm1 = if m == 1 { 1.0 } else { p0 };
            dp = m as f64 * (x * pm - pm1) / (x * x - 1.0);
            let dx = pm / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (x + 1.0), 0.5 * w));
    }
    out.reverse();
    out
}

/// `(exp(A_c t_s), ∫_0^{t_s} exp(A_c s) ds B_c)` from one block exponential.
pub fn continuous_to_discrete(
    a_c: &DMatrix<f64>,
    b_c: &DMatrix<f64>,
    t_s: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a_c.nrows();
    let m = b_c.ncols();
    if a_c.ncols() != n || b_c.nrows() != n {
        return Err(Error::shape(
            "zoh discretization",
            format!("{n}x{n} and {n}xm"),
            format!("{}x{} and {}x{}", n, a_c.ncols(), b_c.nrows(), m),
        ));
    }
    let mut blk = DMatrix::<f64>::zeros(n + m, n + m);
    blk.view_mut((0, 0), (n, n)).copy_from(&(a_c * t_s));
    blk.view_mut((0, n), (n, m)).copy_from(&(b_c * t_s));
    let e = expm(&blk);
    Ok((e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned()))
}

/// Inverse of [`continuous_to_discrete`]: `A_c = log(A) / t_s` and `B_c`
/// solving `(∫_0^{t_s} exp(A_c s) ds) B_c = B`.
pub fn discrete_to_continuous(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t_s: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::shape(
            "zoh inversion",
            format!("{n}x{n} and {n}xm"),
            format!("{}x{} and {}x{}", n, a.ncols(), b.nrows(), b.ncols()),
        ));
    }
    if !(t_s > 0.0) {
        return Err(Error::Invalid(format!("sampling interval must be positive, got {t_s}")));
    }
    let a_c = logm(a)? / t_s;
    let mut blk = DMatrix::<f64>::zeros(2 * n, 2 * n);
    blk.view_mut((0, 0), (n, n)).copy_from(&(&a_c * t_s));
    blk.view_mut((0, n), (n, n)).copy_from(&(DMatrix::<f64>::identity(n, n) * t_s));
    let gamma = expm(&blk).view((0, n), (n, n)).into_owned();
    let b_c = gamma
        .lu()
        .solve(b)
        .ok_or_else(|| Error::LogDomain("hold integral is singular".into()))?;
    Ok((a_c, b_c))
}
