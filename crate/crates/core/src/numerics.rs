//! Scalar Gaussian machinery and the small dense complex linear algebra the
//! solvers share.
//!
//! Truncated-normal moments are computed in standardized units. Four regimes
//! are handled separately so that saturated cells deep in a tail and very
//! narrow cells both keep their moments finite and accurate:
//!
//! * the untruncated line, which is returned unchanged;
//! * narrow finite cells, integrated with Gauss-Legendre about the midpoint;
//! * cells lying entirely beyond 8 standard deviations on one side, expressed
//!   through the Mills-ratio continued fraction about the near endpoint;
//! * everything else, through `erfc` differences.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const TAIL_SWITCH: f64 = 8.0;
const CF_DEPTH: usize = 80;
const GL_POINTS: usize = 24;

/// A half-open interval `[lo, hi)` of the real line; either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussInterval {
    pub lo: f64,
    pub hi: f64,
}

impl GaussInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(invalid(format!("interval requires lo < hi, got [{lo}, {hi})")));
        }
        Ok(Self { lo, hi })
    }

    pub const fn real_line() -> Self {
        Self { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x < self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Mean and variance of a truncated normal together with the log of the
/// probability mass the untruncated normal assigns to the interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncMoments {
    pub mean: f64,
    pub var: f64,
    pub log_mass: f64,
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Standard normal CDF, accurate in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x)`.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// `n / (x + (n+1) / (x + (n+2) / (x + ...)))`, evaluated bottom-up.
///
/// With `n = 1` this is `1/R(x) - x` where `R` is the Mills ratio; with
/// `n = 2` it is the tail that gives `1 - x (1/R(x) - x)` without cancellation.
fn mills_tail(x: f64, n: usize) -> f64 {
    let mut acc = 0.0;
    for k in (n..n + CF_DEPTH).rev() {
        acc = k as f64 / (x + acc);
    }
    acc
}

/// `ln(1 - Φ(x))` for `x >= TAIL_SWITCH`.
fn log_sf_tail(x: f64, g: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI - (x + g).ln()
}

/// Standardized moments `(E[x], Var[x], ln mass)` on `[a, b)` with
/// `TAIL_SWITCH <= a < b <= +inf`.
fn upper_tail_moments(a: f64, b: f64) -> (f64, f64, f64) {
    let g_a = mills_tail(a, 1);
    let c_a = mills_tail(a, 2);
    let h_a = c_a / (a + c_a);
    let log_q_a = log_sf_tail(a, g_a);

    if b.is_infinite() {
        return (a + g_a, h_a - g_a * g_a, log_q_a);
    }

    let w = b - a;
    let g_b = mills_tail(b, 1);
    let delta = -0.5 * w * (a + b) - ((w + g_b - g_a) / (a + g_a)).ln_1p();
    let rho = delta.exp();
    let one_minus_rho = -delta.exp_m1();

    let ey = (g_a - (g_b + w) * rho) / one_minus_rho;
    let ey2 = (h_a - rho * (1.0 + w * w - (a - w) * g_b)) / one_minus_rho;
    (a + ey, ey2 - ey * ey, log_q_a + one_minus_rho.ln())
}

fn gauss_legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static NODES: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    NODES.get_or_init(|| {
        let n = GL_POINTS;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let wgt = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = wgt;
            weights[n - 1 - i] = wgt;
        }
        (nodes, weights)
    })
}

/// Standardized moments on a narrow finite cell, integrating
/// `exp(-(x² - c²)/2)` about the midpoint `c`.
fn narrow_moments(a: f64, b: f64) -> (f64, f64, f64) {
    let (nodes, weights) = gauss_legendre();
    let c = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
    for (&node, &wgt) in nodes.iter().zip(weights) {
        let t = half * node;
        let f = wgt * (-c * t - 0.5 * t * t).exp();
        z0 += f;
        z1 += f * t;
        z2 += f * t * t;
    }
    let et = z1 / z0;
    let var = z2 / z0 - et * et;
    let log_mass = (half * z0).ln() - 0.5 * c * c - LN_SQRT_2PI;
    (c + et, var, log_mass)
}

fn direct_moments(a: f64, b: f64) -> (f64, f64, f64) {
    let mass = if b <= 0.0 {
        norm_cdf(b) - norm_cdf(a)
    } else if a >= 0.0 {
        norm_sf(a) - norm_sf(b)
    } else {
        1.0 - norm_cdf(a) - norm_sf(b)
    };
    let (pa, pb) = (norm_pdf(a), norm_pdf(b));
    let apa = if a.is_infinite() { 0.0 } else { a * pa };
    let bpb = if b.is_infinite() { 0.0 } else { b * pb };
    let m1 = (pa - pb) / mass;
    let m2 = 1.0 + (apa - bpb) / mass;
    (m1, m2 - m1 * m1, mass.ln())
}

/// Moments of `N(mu, v)` truncated to `interval`.
///
/// Fails with [`Error::EmptyCell`] when the interval carries no representable
/// probability mass; callers clamp in that case.
pub fn trunc_gauss_moments(interval: GaussInterval, mu: f64, v: f64) -> Result<TruncMoments> {
    if !(v > 0.0) || !v.is_finite() || !mu.is_finite() {
        return Err(invalid(format!("trunc_gauss_moments needs finite mu and v > 0, got mu={mu}, v={v}")));
    }
    let GaussInterval { lo, hi } = interval;
    if !(lo < hi) {
        return Err(invalid(format!("interval requires lo < hi, got [{lo}, {hi})")));
    }
    if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
        return Ok(TruncMoments { mean: mu, var: v, log_mass: 0.0 });
    }

    let s = v.sqrt();
    let a = (lo - mu) / s;
    let b = (hi - mu) / s;
    let w = b - a;

    let (m, var, log_mass) = if w.is_finite() && w * (a.abs().max(b.abs()) + w) <= 1.0 {
        narrow_moments(a, b)
    } else if a >= TAIL_SWITCH {
        upper_tail_moments(a, b)
    } else if b <= -TAIL_SWITCH {
        let (m, var, lm) = upper_tail_moments(-b, -a);
        (-m, var, lm)
    } else {
        direct_moments(a, b)
    };

    if !log_mass.is_finite() || !m.is_finite() || !var.is_finite() {
        return Err(Error::EmptyCell { lo, hi, mu, var: v });
    }

    let mean = (mu + s * m).clamp(lo, hi);
    let var = (v * var).clamp(f64::MIN_POSITIVE, v);
    Ok(TruncMoments { mean, var, log_mass })
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted in
/// descending order. The input is symmetrized first.
pub fn hermitian_eig(m: &CMat) -> Result<(Vec<f64>, CMat)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch(format!("hermitian_eig needs a square matrix, got {}x{}", n, m.ncols())));
    }
    if n == 0 {
        return Ok((Vec::new(), CMat::zeros(0, 0)));
    }
    let sym = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Pseudo-inverse solution with rank information.
#[derive(Debug, Clone)]
pub struct LsSolution {
    pub x: CMat,
    /// Number of singular values kept above the cutoff.
    pub rank: usize,
    /// Ratio of the largest to the smallest kept singular value.
    pub condition: f64,
}

const LS_RCOND: f64 = 1e-10;

/// Minimum-norm least-squares solution of `A X ≈ B` for a matrix right-hand side.
pub fn least_squares_multi(a: &CMat, b: &CMat) -> Result<LsSolution> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!("least squares: A has {} rows, B has {}", a.nrows(), b.nrows())));
    }
    let q = a.ncols();
    if a.nrows() == 0 || q == 0 {
        return Ok(LsSolution { x: CMat::zeros(q, b.ncols()), rank: 0, condition: f64::INFINITY });
    }
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Ok(LsSolution { x: CMat::zeros(q, b.ncols()), rank: 0, condition: f64::INFINITY });
    }
    let cutoff = LS_RCOND * smax;
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");

    let mut utb = u.adjoint() * b;
    let mut rank = 0;
    let mut smin = smax;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            rank += 1;
            smin = smin.min(s);
            utb.row_mut(i).scale_mut(1.0 / s);
        } else {
            utb.row_mut(i).fill(Complex64::new(0.0, 0.0));
        }
    }
    let x = v_t.adjoint() * utb;
    Ok(LsSolution { x, rank, condition: smax / smin })
}

/// Minimum-norm least-squares solution of `A x ≈ b`.
pub fn least_squares(a: &CMat, b: &CVec) -> Result<CVec> {
    let rhs = CMat::from_column_slice(b.len(), 1, b.as_slice());
    let sol = least_squares_multi(a, &rhs)?;
    Ok(sol.x.column(0).into_owned())
}

/// Log of the probability `N(mu, v)` assigns to `interval`.
pub fn log_gauss_mass(interval: GaussInterval, mu: f64, v: f64) -> Result<f64> {
    Ok(trunc_gauss_moments(interval, mu, v)?.log_mass)
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let y = (x + PI).rem_euclid(two_pi) - PI;
    if y >= PI {
        y - two_pi
    } else {
        y
    }
}
