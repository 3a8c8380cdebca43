//! Variational sparse Bayesian matrix completion under known heteroscedastic
//! Gaussian noise.
//!
//! The unknown matrix is factored as `Z = U V^H` with `k` columns whose pairs
//! `(u_{·i}, v_{·i})` share an ARD precision `γ_i`. Rows of `U` and `V` get
//! complex Gaussian mean-field posteriors; `γ` is updated by EM. Row vectors
//! follow the row convention `u_{i·}` (1×k) with covariance
//! `Σ = E[(u - û)^H (u - û)]`.
//!
//! Run standalone on dequantized codewords this is the VSBL baseline; the
//! generalized solver in [`crate::grsbl`] drives single sweeps of it on a
//! pseudo linear model.

use nalgebra::{Cholesky, DMatrix};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::CMat;

/// Precisions are clamped here; a clamped column is treated as pruned.
pub const GAMMA_MAX: f64 = 1e12;
/// A column counts toward the rank when its mean energy
/// `‖û_{·i}‖² + ‖v̂_{·i}‖²` is at least this fraction of the largest one.
pub const ENERGY_PRUNE: f64 = 1e-6;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Sampling set `Ω` with per-row and per-column adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub m: usize,
    pub n: usize,
    pub omega: Vec<(usize, usize)>,
    /// For row `i`: `(j, entry index)` of every observed `(i, j)`.
    pub by_row: Vec<Vec<(usize, usize)>>,
    /// For column `j`: `(i, entry index)` of every observed `(i, j)`.
    pub by_col: Vec<Vec<(usize, usize)>>,
}

impl Pattern {
    pub fn new(m: usize, n: usize, omega: &[(usize, usize)]) -> Result<Self> {
        let mut by_row = vec![Vec::new(); m];
        let mut by_col = vec![Vec::new(); n];
        for (e, &(i, j)) in omega.iter().enumerate() {
            if i >= m || j >= n {
                return Err(invalid(format!("index ({i}, {j}) outside {m}x{n}")));
            }
            by_row[i].push((j, e));
            by_col[j].push((i, e));
        }
        Ok(Self { m, n, omega: omega.to_vec(), by_row, by_col })
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }
}

/// The pseudo linear model `Ỹ_ij = Z_ij + Ñ_ij`, `Ñ_ij ~ CN(0, 1/β_ij)`.
#[derive(Debug, Clone)]
pub struct HeteroObservations {
    pub pattern: Pattern,
    pub y: Vec<Complex64>,
    pub beta: Vec<f64>,
}

impl HeteroObservations {
    pub fn new(pattern: Pattern, y: Vec<Complex64>, beta: Vec<f64>) -> Result<Self> {
        if y.len() != pattern.len() || beta.len() != pattern.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} entries, {} values, {} precisions",
                pattern.len(),
                y.len(),
                beta.len()
            )));
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0) || !b.is_finite()) {
            return Err(invalid(format!("noise precisions must be positive and finite, got {b}")));
        }
        Ok(Self { pattern, y, beta })
    }

    /// Homoscedastic observations with noise variance `sigma2`.
    pub fn uniform(pattern: Pattern, y: Vec<Complex64>, sigma2: f64) -> Result<Self> {
        let beta = vec![1.0 / sigma2; pattern.len()];
        Self::new(pattern, y, beta)
    }
}

/// Posterior means and covariances of the factor rows plus ARD precisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorState {
    pub k: usize,
    pub u_mean: CMat,
    pub u_cov: Vec<CMat>,
    pub v_mean: CMat,
    pub v_cov: Vec<CMat>,
    pub gamma: Vec<f64>,
}

impl FactorState {
    /// Cold start: means i.i.d. `CN(0, 1/k)`, identity covariances, `γ = 1`.
    pub fn init<R: Rng + ?Sized>(m: usize, n: usize, k: usize, rng: &mut R) -> Self {
        let scale = (0.5 / k as f64).sqrt();
        let mut draw = |rows: usize| {
            let mut x = CMat::zeros(rows, k);
            // Row-major fill keeps the draw order independent of storage layout.
            for i in 0..rows {
                for c in 0..k {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    x[(i, c)] = Complex64::new(re, im) * scale;
                }
            }
            x
        };
        let u_mean = draw(m);
        let v_mean = draw(n);
        Self {
            k,
            u_mean,
            u_cov: vec![CMat::identity(k, k); m],
            v_mean,
            v_cov: vec![CMat::identity(k, k); n],
            gamma: vec![1.0; k],
        }
    }

    pub fn init_seeded(m: usize, n: usize, k: usize, seed: u64) -> Self {
        Self::init(m, n, k, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn m(&self) -> usize {
        self.u_mean.nrows()
    }

    pub fn n(&self) -> usize {
        self.v_mean.nrows()
    }

    /// `Û V̂^H`.
    pub fn mean_matrix(&self) -> CMat {
        &self.u_mean * self.v_mean.adjoint()
    }

    /// Columns counted toward the rank, ordered by increasing `γ`.
    pub fn active_columns(&self) -> Vec<usize> {
        active_columns(&self.gamma, &self.column_energies())
    }

    /// `E[u_{·i}^H u_{·i}] + E[v_{·i}^H v_{·i}]` for every column.
    pub fn column_second_moments(&self) -> Vec<f64> {
        (0..self.k)
            .map(|c| {
                let mean = self.u_mean.column(c).norm_squared() + self.v_mean.column(c).norm_squared();
                let cov: f64 = self.u_cov.iter().chain(&self.v_cov).map(|s| s[(c, c)].re).sum();
                mean + cov
            })
            .collect()
    }

    /// `û_{·i}^H û_{·i} + v̂_{·i}^H v̂_{·i}`, the energy of each column's means.
    pub fn column_energies(&self) -> Vec<f64> {
        (0..self.k).map(|c| self.u_mean.column(c).norm_squared() + self.v_mean.column(c).norm_squared()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        let ok = self.gamma.len() == k
            && self.u_mean.ncols() == k
            && self.v_mean.ncols() == k
            && self.u_cov.len() == self.u_mean.nrows()
            && self.v_cov.len() == self.v_mean.nrows()
            && self.u_cov.iter().chain(&self.v_cov).all(|s| s.shape() == (k, k));
        if !ok {
            return Err(Error::DimensionMismatch("inconsistent factor state".into()));
        }
        if self.gamma.iter().any(|&g| !(g > 0.0)) {
            return Err(invalid("precisions must be positive"));
        }
        Ok(())
    }
}

/// Unclamped columns whose energy is at least `ENERGY_PRUNE` times the
/// largest, sorted by increasing `γ`.
pub fn active_columns(gamma: &[f64], energy: &[f64]) -> Vec<usize> {
    assert_eq!(gamma.len(), energy.len(), "one energy per precision");
    let max = energy.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Vec::new();
    }
    let mut cols: Vec<usize> =
        (0..gamma.len()).filter(|&c| energy[c] >= ENERGY_PRUNE * max && gamma[c] < GAMMA_MAX).collect();
    cols.sort_by(|&a, &b| gamma[a].total_cmp(&gamma[b]));
    cols
}

/// Inverse of a Hermitian positive-definite matrix, returned exactly Hermitian.
fn hpd_inverse(p: CMat) -> CMat {
    let k = p.nrows();
    let inv = match Cholesky::new(p.clone()) {
        Some(ch) => ch.inverse(),
        None => {
            // Only reachable through rounding when γ is near its clamp.
            let jitter = 1e-12 * (0..k).map(|i| p[(i, i)].re).fold(0.0, f64::max);
            let mut q = p;
            for i in 0..k {
                q[(i, i)] += jitter;
            }
            Cholesky::new(q).expect("jittered precision matrix is positive definite").inverse()
        }
    };
    (&inv + inv.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Length of the packed form of a `k × k` Hermitian matrix.
fn packed_len(k: usize) -> usize {
    k * k
}

/// Real coordinates of a Hermitian matrix: the diagonal, then the real and
/// imaginary parts of the strict upper triangle, each scaled by `off`.
///
/// With `off = 2` on one side and `1` on the other, the dot product of two
/// packings is `tr(S T)`.
fn pack_hermitian(s: &CMat, off: f64, out: &mut [f64]) {
    let k = s.nrows();
    for a in 0..k {
        out[a] = s[(a, a)].re;
    }
    let mut p = k;
    for b in 1..k {
        for a in 0..b {
            out[p] = off * s[(a, b)].re;
            out[p + 1] = off * s[(a, b)].im;
            p += 2;
        }
    }
}

/// Packing of `x^H x` for a row vector `x`.
fn pack_outer(x: &[Complex64], off: f64, out: &mut [f64]) {
    let k = x.len();
    for a in 0..k {
        out[a] = x[a].norm_sqr();
    }
    let mut p = k;
    for b in 1..k {
        for a in 0..b {
            let e = x[a].conj() * x[b];
            out[p] = off * e.re;
            out[p + 1] = off * e.im;
            p += 2;
        }
    }
}

fn unpack_hermitian(p: &[f64], k: usize) -> CMat {
    let mut s = CMat::zeros(k, k);
    for a in 0..k {
        s[(a, a)] = Complex64::new(p[a], 0.0);
    }
    let mut i = k;
    for b in 1..k {
        for a in 0..b {
            let e = Complex64::new(p[i], p[i + 1]);
            s[(a, b)] = e;
            s[(b, a)] = e.conj();
            i += 2;
        }
    }
    s
}

fn row(x: &CMat, r: usize) -> Vec<Complex64> {
    (0..x.ncols()).map(|c| x[(r, c)]).collect()
}

/// Packed `E[x^H x] = x̂^H x̂ + Σ` for every row of a factor, `len` reals each.
fn packed_second_moments(mean: &CMat, cov: &[CMat]) -> Vec<f64> {
    let len = packed_len(mean.ncols());
    let mut out = vec![0.0; len * cov.len()];
    let mut outer = vec![0.0; len];
    for (r, s) in cov.iter().enumerate() {
        let dst = &mut out[r * len..(r + 1) * len];
        pack_hermitian(s, 1.0, dst);
        pack_outer(&row(mean, r), 1.0, &mut outer);
        for (d, o) in dst.iter_mut().zip(&outer) {
            *d += o;
        }
    }
    out
}

/// Shared row update: rows of the factor being updated, each coupled to the
/// rows of the other factor through `adjacency`.
fn update_side(
    other_mean: &CMat,
    other_cov: &[CMat],
    adjacency: &[Vec<(usize, usize)>],
    y: &[Complex64],
    beta: &[f64],
    conjugate: bool,
    gamma: &[f64],
) -> (CMat, Vec<CMat>) {
    let k = gamma.len();
    let len = packed_len(k);
    let moments = packed_second_moments(other_mean, other_cov);
    let mut means = CMat::zeros(adjacency.len(), k);
    let mut covs = Vec::with_capacity(adjacency.len());
    let mut rhs = vec![ZERO; k];
    let mut precision = vec![0.0; len];

    for (row, links) in adjacency.iter().enumerate() {
        precision.fill(0.0);
        precision[..k].copy_from_slice(gamma);
        rhs.fill(ZERO);
        for &(other, e) in links {
            let b = beta[e];
            for (dst, src) in precision.iter_mut().zip(&moments[other * len..(other + 1) * len]) {
                *dst += src * b;
            }
            let yv = if conjugate { y[e].conj() } else { y[e] } * b;
            for (c, r) in rhs.iter_mut().enumerate() {
                *r += yv * other_mean[(other, c)];
            }
        }
        let cov = hpd_inverse(unpack_hermitian(&precision, k));
        for c in 0..k {
            let mut acc = ZERO;
            for (a, r) in rhs.iter().enumerate() {
                acc += r * cov[(a, c)];
            }
            means[(row, c)] = acc;
        }
        covs.push(cov);
    }
    (means, covs)
}

/// Mean-field update of every row of `U`.
pub fn update_rows_u(state: &mut FactorState, obs: &HeteroObservations) {
    let (mean, cov) =
        update_side(&state.v_mean, &state.v_cov, &obs.pattern.by_row, &obs.y, &obs.beta, false, &state.gamma);
    state.u_mean = mean;
    state.u_cov = cov;
}

/// Mean-field update of every row of `V`; the data enter conjugated.
pub fn update_rows_v(state: &mut FactorState, obs: &HeteroObservations) {
    let (mean, cov) =
        update_side(&state.u_mean, &state.u_cov, &obs.pattern.by_col, &obs.y, &obs.beta, true, &state.gamma);
    state.v_mean = mean;
    state.v_cov = cov;
}

/// EM update of the ARD precisions, clamped at [`GAMMA_MAX`].
pub fn update_gamma(state: &FactorState) -> Vec<f64> {
    let dof = (state.m() + state.n()) as f64;
    state
        .column_second_moments()
        .into_iter()
        .map(|den| {
            let g = dof / den;
            if g.is_finite() {
                g.min(GAMMA_MAX)
            } else {
                GAMMA_MAX
            }
        })
        .collect()
}

/// `x S x^H` for a row vector `x` and Hermitian `S`.
fn quad_form(x: impl Fn(usize) -> Complex64, s: &CMat) -> f64 {
    let k = s.nrows();
    let mut acc = ZERO;
    for b in 0..k {
        let mut col = ZERO;
        for a in 0..k {
            col += x(a) * s[(a, b)];
        }
        acc += col * x(b).conj();
    }
    acc.re
}

/// `tr(S T)` for Hermitian `S`, `T`.
fn trace_product(s: &CMat, t: &CMat) -> f64 {
    s.as_slice().iter().zip(t.as_slice()).map(|(a, b)| (a * b.conj()).re).sum()
}

/// Posterior mean and variance of a single entry `Z_ij`.
pub fn entry_moments(state: &FactorState, i: usize, j: usize) -> (Complex64, f64) {
    let k = state.k;
    let u = |c: usize| state.u_mean[(i, c)];
    let v = |c: usize| state.v_mean[(j, c)];
    let mean = (0..k).map(|c| u(c) * v(c).conj()).sum();
    let var =
        quad_form(v, &state.u_cov[i]) + quad_form(u, &state.v_cov[j]) + trace_product(&state.u_cov[i], &state.v_cov[j]);
    (mean, var.max(0.0))
}

/// Posterior means and variances of every entry of `Z`.
pub fn posterior_moments_z(state: &FactorState) -> (CMat, DMatrix<f64>) {
    let (m, n) = (state.m(), state.n());
    let mut var = DMatrix::zeros(m, n);
    for j in 0..n {
        for i in 0..m {
            var[(i, j)] = entry_moments(state, i, j).1;
        }
    }
    (state.mean_matrix(), var)
}

/// Posterior means and variances on the sampling set only.
///
/// Uses `Var Z_ij = tr(Σ_i^u E[v_j^H v_j]) + tr(Σ_j^v û_i^H û_i)`, evaluated as
/// one dot product of packed Hermitian coordinates per entry.
pub fn posterior_moments_on(state: &FactorState, pattern: &Pattern) -> (Vec<Complex64>, Vec<f64>) {
    let k = state.k;
    let len = packed_len(k);
    let mut left = vec![0.0; 2 * len * state.m()];
    for i in 0..state.m() {
        let dst = &mut left[2 * len * i..2 * len * (i + 1)];
        pack_hermitian(&state.u_cov[i], 2.0, &mut dst[..len]);
        pack_outer(&row(&state.u_mean, i), 2.0, &mut dst[len..]);
    }
    let moments = packed_second_moments(&state.v_mean, &state.v_cov);
    let mut right = vec![0.0; 2 * len * state.n()];
    for j in 0..state.n() {
        let dst = &mut right[2 * len * j..2 * len * (j + 1)];
        dst[..len].copy_from_slice(&moments[len * j..len * (j + 1)]);
        pack_hermitian(&state.v_cov[j], 1.0, &mut dst[len..]);
    }
    let u_rows: Vec<Vec<Complex64>> = (0..state.m()).map(|i| row(&state.u_mean, i)).collect();
    let v_rows: Vec<Vec<Complex64>> = (0..state.n()).map(|j| row(&state.v_mean, j)).collect();
    pattern
        .omega
        .iter()
        .map(|&(i, j)| {
            let mean: Complex64 = u_rows[i].iter().zip(&v_rows[j]).map(|(u, v)| u * v.conj()).sum();
            let a = &left[2 * len * i..2 * len * (i + 1)];
            let b = &right[2 * len * j..2 * len * (j + 1)];
            let var: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (mean, var.max(0.0))
        })
        .unzip()
}

/// One sweep: rows of `U`, rows of `V`, then `γ`.
pub fn vb_sweep(state: &mut FactorState, obs: &HeteroObservations) {
    update_rows_u(state, obs);
    update_rows_v(state, obs);
    state.gamma = update_gamma(state);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VsblOptions {
    pub max_iters: usize,
    /// Stop once `‖Ẑ_t - Ẑ_{t-1}‖_F / ‖Ẑ_{t-1}‖_F < tol`.
    pub tol: f64,
    pub seed: u64,
    /// Re-estimate a homoscedastic noise variance after every sweep.
    pub learn_noise: bool,
}

impl Default for VsblOptions {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-4, seed: 0, learn_noise: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VsblResult {
    pub state: FactorState,
    pub iterations: usize,
    pub converged: bool,
    /// Final noise variance; only changes when `learn_noise` is set.
    pub sigma2: Option<f64>,
}

impl VsblResult {
    pub fn z_hat(&self) -> CMat {
        self.state.mean_matrix()
    }

    pub fn rank(&self) -> usize {
        self.state.active_columns().len()
    }
}

fn relative_change(new: &CMat, old: &CMat) -> f64 {
    let den = old.norm();
    if den == 0.0 {
        if new.norm() == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (new - old).norm() / den
    }
}

/// Noise-variance EM on a homoscedastic model: mean residual energy plus
/// posterior variance over `Ω`.
pub fn noise_variance_em(state: &FactorState, obs: &HeteroObservations) -> f64 {
    let (mean, var) = posterior_moments_on(state, &obs.pattern);
    let total: f64 = obs.y.iter().zip(&mean).zip(&var).map(|((y, z), v)| (y - z).norm_sqr() + v).sum();
    total / obs.pattern.len().max(1) as f64
}

/// Runs sweeps from a given state until the mean matrix stops moving.
pub fn vsbl_solve_from(mut state: FactorState, obs: &HeteroObservations, opts: &VsblOptions) -> Result<VsblResult> {
    state.validate()?;
    if state.m() != obs.pattern.m || state.n() != obs.pattern.n {
        return Err(Error::DimensionMismatch("state and observations disagree on shape".into()));
    }
    let mut obs = obs.clone();
    let mut sigma2 = None;
    let mut prev = state.mean_matrix();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        vb_sweep(&mut state, &obs);
        iterations += 1;
        if opts.learn_noise {
            let s2 = noise_variance_em(&state, &obs).max(1e-12);
            obs.beta.fill(1.0 / s2);
            sigma2 = Some(s2);
        }
        let cur = state.mean_matrix();
        let change = relative_change(&cur, &prev);
        prev = cur;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(VsblResult { state, iterations, converged, sigma2 })
}

/// Standalone VSBL from the seeded cold start.
pub fn vsbl_solve(obs: &HeteroObservations, k: usize, opts: &VsblOptions) -> Result<VsblResult> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let state = FactorState::init_seeded(obs.pattern.m, obs.pattern.n, k, opts.seed);
    vsbl_solve_from(state, obs, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::hermitian_eig;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn full_pattern(m: usize, n: usize) -> Pattern {
        let omega: Vec<_> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        Pattern::new(m, n, &omega).unwrap()
    }

    fn random_state(m: usize, n: usize, k: usize, seed: u64) -> FactorState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = FactorState::init(m, n, k, &mut rng);
        let spd = |rng: &mut ChaCha8Rng| {
            let a = CMat::from_fn(k, k, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            &a * a.adjoint() + CMat::identity(k, k) * c(0.1, 0.0)
        };
        s.u_cov = (0..m).map(|_| spd(&mut rng)).collect();
        s.v_cov = (0..n).map(|_| spd(&mut rng)).collect();
        s.gamma = (0..k).map(|_| rng.random_range(0.5..3.0)).collect();
        s
    }

    #[test]
    fn unobserved_row_gets_prior() {
        let pattern = Pattern::new(2, 2, &[(0, 0)]).unwrap();
        let obs = HeteroObservations::uniform(pattern, vec![c(1.0, 0.0)], 1.0).unwrap();
        let mut s = FactorState::init_seeded(2, 2, 2, 1);
        s.gamma = vec![2.0, 4.0];
        update_rows_u(&mut s, &obs);
        assert!(s.u_mean.row(1).iter().all(|z| z.norm() == 0.0));
        assert!((s.u_cov[1][(0, 0)].re - 0.5).abs() < 1e-15);
        assert!((s.u_cov[1][(1, 1)].re - 0.25).abs() < 1e-15);
        update_rows_v(&mut s, &obs);
        assert!(s.v_mean.row(1).iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn scalar_hand_computation() {
        let pattern = Pattern::new(1, 1, &[(0, 0)]).unwrap();
        let obs = HeteroObservations::uniform(pattern, vec![c(2.0, 0.0)], 1.0).unwrap();
        let mut s = FactorState::init_seeded(1, 1, 1, 0);
        s.v_mean[(0, 0)] = c(1.0, 0.0);
        s.v_cov[0][(0, 0)] = c(0.0, 0.0);
        s.gamma = vec![1.0];
        update_rows_u(&mut s, &obs);
        assert!((s.u_cov[0][(0, 0)].re - 0.5).abs() < 1e-15);
        assert!((s.u_mean[(0, 0)] - c(1.0, 0.0)).norm() < 1e-15);

        let mut s = FactorState::init_seeded(1, 1, 1, 0);
        s.u_mean[(0, 0)] = c(1.0, 0.0);
        s.u_cov[0][(0, 0)] = c(0.0, 0.0);
        update_rows_v(&mut s, &obs);
        assert!((s.v_cov[0][(0, 0)].re - 0.5).abs() < 1e-15);
        assert!((s.v_mean[(0, 0)] - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn complex_data_enter_conjugated_for_v() {
        let pattern = Pattern::new(1, 1, &[(0, 0)]).unwrap();
        let y = c(0.0, 2.0);
        let obs = HeteroObservations::uniform(pattern, vec![y], 1.0).unwrap();
        let mut s = FactorState::init_seeded(1, 1, 1, 0);
        s.u_mean[(0, 0)] = c(1.0, 0.0);
        s.u_cov[0][(0, 0)] = c(0.0, 0.0);
        update_rows_v(&mut s, &obs);
        // û v̂^* should move toward y.
        let z = s.u_mean[(0, 0)] * s.v_mean[(0, 0)].conj();
        assert!((z - y * 0.5).norm() < 1e-15);
    }

    #[test]
    fn symmetric_instance_mirrors() {
        let n = 4;
        let pattern = full_pattern(n, n);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = CMat::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let herm = &a + a.adjoint();
        let y: Vec<_> = pattern.omega.iter().map(|&(i, j)| herm[(i, j)]).collect();
        let obs = HeteroObservations::uniform(pattern, y, 0.5).unwrap();
        let mut s = FactorState::init_seeded(n, n, 2, 9);
        s.v_mean = s.u_mean.clone();
        s.v_cov = s.u_cov.clone();
        let mut su = s.clone();
        update_rows_u(&mut su, &obs);
        let mut sv = s.clone();
        update_rows_v(&mut sv, &obs);
        assert!((su.u_mean - sv.v_mean).norm() < 1e-12);
        for (p, q) in su.u_cov.iter().zip(&sv.v_cov) {
            assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn gamma_update_identities() {
        let mut s = FactorState::init_seeded(3, 2, 2, 0);
        s.u_mean.fill(c(0.0, 0.0));
        s.v_mean.fill(c(0.0, 0.0));
        for cov in s.u_cov.iter_mut().chain(s.v_cov.iter_mut()) {
            *cov = CMat::identity(2, 2) * c(0.25, 0.0);
        }
        let g = update_gamma(&s);
        assert!(g.iter().all(|&x| (x - 4.0).abs() < 1e-12));

        for cov in s.u_cov.iter_mut().chain(s.v_cov.iter_mut()) {
            *cov = CMat::identity(2, 2);
        }
        assert!(update_gamma(&s).iter().all(|&x| (x - 1.0).abs() < 1e-12));

        for cov in s.u_cov.iter_mut().chain(s.v_cov.iter_mut()) {
            *cov = CMat::zeros(2, 2);
        }
        assert!(update_gamma(&s).iter().all(|&x| x == GAMMA_MAX));
    }

    #[test]
    fn gamma_update_dual_path() {
        let s = random_state(4, 4, 2, 21);
        let g = update_gamma(&s);
        for c in 0..2 {
            let mut den = 0.0;
            for i in 0..4 {
                den += s.u_mean[(i, c)].norm_sqr() + s.u_cov[i][(c, c)].re;
                den += s.v_mean[(i, c)].norm_sqr() + s.v_cov[i][(c, c)].re;
            }
            assert!((g[c] - 8.0 / den).abs() < 1e-12 * g[c]);
        }
    }

    #[test]
    fn gamma_update_is_stationary_point_of_q() {
        let s = random_state(5, 3, 3, 8);
        let g = update_gamma(&s);
        let e = s.column_second_moments();
        let dof = 8.0;
        let q = |gam: &[f64]| -> f64 { -gam.iter().zip(&e).map(|(g, e)| g * e - dof * g.ln()).sum::<f64>() };
        for c in 0..3 {
            let h = 1e-6 * g[c];
            let mut plus = g.clone();
            plus[c] += h;
            let mut minus = g.clone();
            minus[c] -= h;
            let grad = (q(&plus) - q(&minus)) / (2.0 * h);
            assert!(grad.abs() < 1e-6, "dQ/dγ_{c} = {grad}");
        }
    }

    #[test]
    fn posterior_variance_special_cases() {
        let mut s = random_state(3, 3, 2, 2);
        for cov in s.u_cov.iter_mut().chain(s.v_cov.iter_mut()) {
            *cov = CMat::zeros(2, 2);
        }
        let (z, v) = posterior_moments_z(&s);
        assert!((z - s.mean_matrix()).norm() == 0.0);
        assert!(v.iter().all(|&x| x == 0.0));

        s.u_mean.fill(c(0.0, 0.0));
        s.v_mean.fill(c(0.0, 0.0));
        for cov in s.u_cov.iter_mut().chain(s.v_cov.iter_mut()) {
            *cov = CMat::identity(2, 2);
        }
        let (_, v) = posterior_moments_z(&s);
        assert!(v.iter().all(|&x| (x - 2.0).abs() < 1e-15));
    }

    #[test]
    fn packed_moments_match_direct_formula() {
        let s = random_state(5, 4, 3, 17);
        let omega: Vec<_> = (0..5).flat_map(|i| (0..4).map(move |j| (i, j))).filter(|&(i, j)| i != j).collect();
        let pattern = Pattern::new(5, 4, &omega).unwrap();
        let (mean, var) = posterior_moments_on(&s, &pattern);
        for (e, &(i, j)) in omega.iter().enumerate() {
            let (m, v) = entry_moments(&s, i, j);
            assert!((mean[e] - m).norm() < 1e-12);
            assert!((var[e] - v).abs() < 1e-10 * v.max(1.0));
        }
    }

    #[test]
    fn hermitian_packing_round_trip() {
        let s = random_state(1, 1, 4, 3);
        let cov = &s.u_cov[0];
        let mut packed = vec![0.0; packed_len(4)];
        pack_hermitian(cov, 1.0, &mut packed);
        assert!((unpack_hermitian(&packed, 4) - cov).norm() < 1e-12);
    }

    #[test]
    fn scalar_variance_matches_sampling() {
        let (mu, mv) = (c(0.8, -0.3), c(-0.2, 1.1));
        let (su, sv) = (0.4, 0.7);
        let mut s = FactorState::init_seeded(1, 1, 1, 0);
        s.u_mean[(0, 0)] = mu;
        s.v_mean[(0, 0)] = mv;
        s.u_cov[0][(0, 0)] = c(su, 0.0);
        s.v_cov[0][(0, 0)] = c(sv, 0.0);
        let (_, var) = entry_moments(&s, 0, 0);
        let closed = mv.norm_sqr() * su + mu.norm_sqr() * sv + su * sv;
        assert!((var - closed).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut cn = |var: f64| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            c(re, im) * (var / 2.0).sqrt()
        };
        let n = 1_000_000;
        let samples: Vec<Complex64> = (0..n).map(|_| (mu + cn(su)) * (mv + cn(sv)).conj()).collect();
        let mean: Complex64 = samples.iter().sum::<Complex64>() / n as f64;
        let emp = samples.iter().map(|z| (z - mean).norm_sqr()).sum::<f64>() / n as f64;
        assert!((emp - var).abs() / var < 1e-2, "empirical {emp} vs {var}");
    }

    #[test]
    fn covariances_stay_positive_definite() {
        let pattern = Pattern::new(5, 6, &[(0, 0), (1, 2), (2, 3), (3, 5), (4, 1), (0, 4), (2, 2)]).unwrap();
        let y = (0..pattern.len()).map(|e| c(e as f64 - 3.0, 0.5)).collect();
        let beta = (0..pattern.len()).map(|e| 0.5 + e as f64).collect();
        let obs = HeteroObservations::new(pattern, y, beta).unwrap();
        let mut s = FactorState::init_seeded(5, 6, 3, 4);
        for _ in 0..20 {
            vb_sweep(&mut s, &obs);
            for cov in s.u_cov.iter().chain(&s.v_cov) {
                let (l, _) = hermitian_eig(cov).unwrap();
                assert!(*l.last().unwrap() > 0.0);
                assert!((cov - cov.adjoint()).norm() == 0.0);
            }
        }
    }

    #[test]
    fn zero_data_gives_zero_estimate() {
        let pattern = full_pattern(5, 5);
        let obs = HeteroObservations::uniform(pattern, vec![c(0.0, 0.0); 25], 0.1).unwrap();
        let res = vsbl_solve(&obs, 3, &VsblOptions { max_iters: 200, ..Default::default() }).unwrap();
        assert!(res.z_hat().norm() < 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let pattern = full_pattern(1, 1);
        assert!(HeteroObservations::new(pattern.clone(), vec![c(0.0, 0.0)], vec![0.0]).is_err());
        assert!(HeteroObservations::new(pattern.clone(), vec![], vec![1.0]).is_err());
        assert!(Pattern::new(1, 1, &[(1, 0)]).is_err());
        let obs = HeteroObservations::uniform(pattern, vec![c(1.0, 0.0)], 1.0).unwrap();
        assert!(vsbl_solve(&obs, 0, &VsblOptions::default()).is_err());
    }

    #[test]
    fn active_columns_threshold() {
        assert_eq!(active_columns(&[1.0, 50.0, 60.0], &[4.0, 1e-40, 1e-90]), vec![0]);
        assert_eq!(active_columns(&[2.0, 2.0, 2.0], &[1.0; 3]).len(), 3);
        assert_eq!(active_columns(&[3.0, 1.0, 100.0], &[1.0, 2.0, 1e-5]), vec![1, 0, 2]);
        assert_eq!(active_columns(&[1.0, GAMMA_MAX], &[1.0, 1.0]), vec![0]);
        assert!(active_columns(&[1.0, 1.0], &[0.0, 0.0]).is_empty());
    }

    #[test]
    fn state_json_round_trip() {
        let s = random_state(2, 3, 2, 1);
        let text = serde_json::to_string(&s).unwrap();
        let back: FactorState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
