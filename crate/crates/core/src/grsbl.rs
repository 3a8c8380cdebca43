//! MC-Gr-SBL: expectation propagation between a componentwise MMSE module for
//! the quantized likelihood (module B) and single sweeps of the variational
//! matrix-completion solver on a pseudo linear model (module A).
//!
//! All messages live on the sampling set `Ω` and are complex Gaussians with a
//! scalar variance per entry.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::harness::nmse;
use crate::numerics::{trunc_gauss_moments, CMat, GaussInterval};
use crate::quantizer::{BitDepth, Measurements, ObservedMatrix};
use crate::vsbl::{active_columns, posterior_moments_on, vb_sweep, FactorState, HeteroObservations, Pattern};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrSblConfig {
    pub t_outer: usize,
    pub k: usize,
    /// `None` picks the default for the channel: off for one bit, on otherwise.
    pub learn_noise: Option<bool>,
    /// Starting noise variance; `None` uses half the initial extrinsic variance.
    pub sigma2_init: Option<f64>,
    pub var_floor: f64,
    pub var_ceiling: f64,
    /// Weight of the new message; `1.0` disables damping.
    pub damping: f64,
    /// VB sweeps per outer iteration.
    pub inner_sweeps: usize,
    pub seed: u64,
}

impl Default for GrSblConfig {
    fn default() -> Self {
        Self {
            t_outer: 100,
            k: 10,
            learn_noise: None,
            sigma2_init: None,
            var_floor: 1e-11,
            var_ceiling: 1e11,
            damping: 0.7,
            inner_sweeps: 1,
            seed: 0,
        }
    }
}

impl GrSblConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_outer == 0 {
            return Err(invalid("t_outer must be at least 1"));
        }
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if self.inner_sweeps == 0 {
            return Err(invalid("inner_sweeps must be at least 1"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(invalid(format!("damping must be in (0, 1], got {}", self.damping)));
        }
        if !(self.var_floor > 0.0 && self.var_floor < self.var_ceiling && self.var_ceiling.is_finite()) {
            return Err(invalid("variance bounds must satisfy 0 < floor < ceiling < inf"));
        }
        if let Some(s) = self.sigma2_init {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid(format!("sigma2_init must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn learns_noise(&self, bits: BitDepth) -> bool {
        self.learn_noise.unwrap_or(bits != BitDepth::Finite(1))
    }
}

/// Messages and beliefs on every observed entry, in `Ω` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicState {
    pub za_ext: Vec<Complex64>,
    pub va_ext: Vec<f64>,
    pub zb_ext: Vec<Complex64>,
    pub vb_ext: Vec<f64>,
    pub za_post: Vec<Complex64>,
    pub va_post: Vec<f64>,
    pub zb_post: Vec<Complex64>,
    pub vb_post: Vec<f64>,
    pub sigma2: f64,
}

impl ExtrinsicState {
    fn new(len: usize, prior_var: f64, sigma2: f64) -> Self {
        let zero = vec![Complex64::new(0.0, 0.0); len];
        Self {
            za_ext: zero.clone(),
            va_ext: vec![prior_var; len],
            zb_ext: zero.clone(),
            vb_ext: vec![prior_var; len],
            za_post: zero.clone(),
            va_post: vec![prior_var; len],
            zb_post: zero,
            vb_post: vec![prior_var; len],
            sigma2,
        }
    }

    pub fn len(&self) -> usize {
        self.za_ext.len()
    }

    pub fn is_empty(&self) -> bool {
        self.za_ext.is_empty()
    }
}

/// Posterior mean and variance of one real part `x ~ N(mu, v)` observed as
/// `x + e ∈ cell` with `e ~ N(0, s)`.
pub fn mmse_component(cell: GaussInterval, mu: f64, v: f64, s: f64) -> Result<(f64, f64)> {
    let total = v + s;
    let (mean_w, var_w) = match trunc_gauss_moments(cell, mu, total) {
        Ok(t) => (t.mean, t.var),
        Err(Error::EmptyCell { .. }) => {
            // All mass sits at the cell edge nearest to the prior.
            let edge = mu.clamp(cell.lo, cell.hi);
            (edge, (cell.width() * cell.width() / 12.0).min(total))
        }
        Err(e) => return Err(e),
    };
    let c = v / total;
    let mean = mu + c * (mean_w - mu);
    let var = (v - c * v + c * c * var_w).max(0.0);
    Ok((mean, var))
}

/// Componentwise MMSE of `Z` on `Ω` under the prior `CN(prior_mean, prior_var)`.
///
/// Quantized entries combine the two real parts, each with prior variance
/// `prior_var / 2` and noise variance `σ² / 2`; unquantized entries use the
/// Gaussian product with `CN(y, σ²)`.
pub fn mmse_refine(
    obs: &ObservedMatrix,
    prior_mean: &[Complex64],
    prior_var: &[f64],
    sigma2: f64,
) -> Result<(Vec<Complex64>, Vec<f64>)> {
    if prior_mean.len() != obs.len() || prior_var.len() != obs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} observations but {} prior means and {} variances",
            obs.len(),
            prior_mean.len(),
            prior_var.len()
        )));
    }
    if !(sigma2 > 0.0) {
        return Err(invalid(format!("noise variance must be positive, got {sigma2}")));
    }
    let len = obs.len();
    let mut mean = Vec::with_capacity(len);
    let mut var = Vec::with_capacity(len);
    match &obs.measurements {
        Measurements::Quantized { spec, bins } => {
            let s = 0.5 * sigma2;
            for ((&z, &vz), &[re, im]) in prior_mean.iter().zip(prior_var).zip(bins) {
                let v = 0.5 * vz;
                let (m_re, v_re) = mmse_component(spec.bin_interval(re)?, z.re, v, s)?;
                let (m_im, v_im) = mmse_component(spec.bin_interval(im)?, z.im, v, s)?;
                mean.push(Complex64::new(m_re, m_im));
                var.push(v_re + v_im);
            }
        }
        Measurements::Unquantized { values } => {
            for ((&z, &vz), &y) in prior_mean.iter().zip(prior_var).zip(values) {
                let post = 1.0 / (1.0 / vz + 1.0 / sigma2);
                mean.push(post * (z / vz + y / sigma2));
                var.push(post);
            }
        }
    }
    Ok((mean, var))
}

/// Divides the cavity `CN(cav_mean, cav_var)` out of the posterior.
///
/// The result's variance is clamped into `[floor, ceiling]`; whenever the
/// clamp fires the mean falls back to the posterior mean.
pub fn extrinsic(
    post_mean: Complex64,
    post_var: f64,
    cav_mean: Complex64,
    cav_var: f64,
    floor: f64,
    ceiling: f64,
) -> (Complex64, f64) {
    let precision = 1.0 / post_var - 1.0 / cav_var;
    if !(precision > 0.0) {
        return (post_mean, ceiling);
    }
    let var = 1.0 / precision;
    if var > ceiling {
        return (post_mean, ceiling);
    }
    if var < floor {
        return (post_mean, floor);
    }
    (var * (post_mean / post_var - cav_mean / cav_var), var)
}

/// Gaussian product of two complex Gaussian messages.
pub fn gaussian_product(a_mean: Complex64, a_var: f64, b_mean: Complex64, b_var: f64) -> (Complex64, f64) {
    let var = 1.0 / (1.0 / a_var + 1.0 / b_var);
    (var * (a_mean / a_var + b_mean / b_var), var)
}

/// EM estimate of the noise variance from the module-B extrinsic and the
/// module-A posterior.
pub fn update_noise_variance(state: &ExtrinsicState) -> Result<f64> {
    if state.is_empty() {
        return Err(invalid("noise variance needs at least one observation"));
    }
    let total: f64 = state
        .zb_ext
        .iter()
        .zip(&state.za_post)
        .zip(&state.va_post)
        .map(|((zb, za), va)| (zb - za).norm_sqr() + va)
        .sum();
    Ok(total / state.len() as f64)
}

/// Number of factor columns that survived pruning.
pub fn estimate_rank(gamma: &[f64], energy: &[f64]) -> usize {
    active_columns(gamma, energy).len()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrSblResult {
    pub state: FactorState,
    pub extrinsic: ExtrinsicState,
    pub rank: usize,
    pub sigma2: f64,
    pub iterations: usize,
    /// NMSE in dB of `Ẑ` after every outer iteration; empty without a reference.
    pub nmse_trace: Vec<f64>,
    /// Relative Frobenius change of `Ẑ` per outer iteration.
    pub change_trace: Vec<f64>,
    /// Set when an iteration clamped every extrinsic variance.
    pub stagnated: bool,
}

impl GrSblResult {
    pub fn z_hat(&self) -> CMat {
        self.state.mean_matrix()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.state.gamma
    }

    pub fn report(&self) -> SolverReport {
        SolverReport {
            z_hat: ComplexMatrixJson::from(&self.z_hat()),
            rank: self.rank,
            gamma: self.state.gamma.clone(),
            sigma2: self.sigma2,
            nmse_trace: self.nmse_trace.clone(),
        }
    }
}

/// Complex matrix as row-major real and imaginary parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexMatrixJson {
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl From<&CMat> for ComplexMatrixJson {
    fn from(z: &CMat) -> Self {
        let rows = |f: fn(&Complex64) -> f64| {
            (0..z.nrows()).map(|i| (0..z.ncols()).map(|j| f(&z[(i, j)])).collect()).collect()
        };
        Self { re: rows(|c| c.re), im: rows(|c| c.im) }
    }
}

impl ComplexMatrixJson {
    pub fn to_matrix(&self) -> Result<CMat> {
        let m = self.re.len();
        let n = self.re.first().map_or(0, Vec::len);
        if self.im.len() != m || self.re.iter().chain(&self.im).any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("ragged or mismatched re/im arrays".into()));
        }
        Ok(CMat::from_fn(m, n, |i, j| Complex64::new(self.re[i][j], self.im[i][j])))
    }
}

/// On-disk solver output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub z_hat: ComplexMatrixJson,
    pub rank: usize,
    pub gamma: Vec<f64>,
    pub sigma2: f64,
    pub nmse_trace: Vec<f64>,
}

fn damp(new: &mut [Complex64], new_var: &mut [f64], old: &[Complex64], old_var: &[f64], rho: f64) {
    if rho >= 1.0 {
        return;
    }
    for (((z, v), zo), vo) in new.iter_mut().zip(new_var.iter_mut()).zip(old).zip(old_var) {
        let precision = rho / *v + (1.0 - rho) / vo;
        *z = (*z * (rho / *v) + *zo * ((1.0 - rho) / vo)) / precision;
        *v = 1.0 / precision;
    }
}

/// Module-B extrinsic from the current posterior; returns how many entries
/// were clamped.
fn b_extrinsic(ext: &mut ExtrinsicState, cfg: &GrSblConfig) -> usize {
    let mut clamped = 0;
    for e in 0..ext.len() {
        let (z, v) =
            extrinsic(ext.zb_post[e], ext.vb_post[e], ext.za_ext[e], ext.va_ext[e], cfg.var_floor, cfg.var_ceiling);
        clamped += usize::from(v == cfg.var_floor || v == cfg.var_ceiling);
        ext.zb_ext[e] = z;
        ext.vb_ext[e] = v;
    }
    clamped
}

fn a_extrinsic(ext: &mut ExtrinsicState, cfg: &GrSblConfig) -> usize {
    let mut clamped = 0;
    for e in 0..ext.len() {
        let (z, v) =
            extrinsic(ext.za_post[e], ext.va_post[e], ext.zb_ext[e], ext.vb_ext[e], cfg.var_floor, cfg.var_ceiling);
        clamped += usize::from(v == cfg.var_floor || v == cfg.var_ceiling);
        ext.za_ext[e] = z;
        ext.va_ext[e] = v;
    }
    clamped
}

pub fn run_mc_grsbl(obs: &ObservedMatrix, cfg: &GrSblConfig) -> Result<GrSblResult> {
    run_mc_grsbl_traced(obs, cfg, None)
}

/// Runs the solver, recording the NMSE against `reference` after every outer
/// iteration when one is given.
pub fn run_mc_grsbl_traced(obs: &ObservedMatrix, cfg: &GrSblConfig, reference: Option<&CMat>) -> Result<GrSblResult> {
    cfg.validate()?;
    obs.validate()?;
    if obs.is_empty() {
        return Err(invalid("no observed entries"));
    }
    if let Some(z) = reference {
        if z.shape() != (obs.m, obs.n) {
            return Err(Error::DimensionMismatch("reference matrix shape differs from observations".into()));
        }
    }
    let state = FactorState::init_seeded(obs.m, obs.n, cfg.k, cfg.seed);
    run_from(state, obs, cfg, reference)
}

/// Runs the solver from a caller-supplied factor state.
pub fn run_from(
    mut state: FactorState,
    obs: &ObservedMatrix,
    cfg: &GrSblConfig,
    reference: Option<&CMat>,
) -> Result<GrSblResult> {
    state.validate()?;
    if state.m() != obs.m || state.n() != obs.n {
        return Err(Error::DimensionMismatch("state and observations disagree on shape".into()));
    }
    let pattern = Pattern::new(obs.m, obs.n, &obs.omega)?;
    let learn = cfg.learns_noise(obs.bit_depth());
    let prior_var = state.k as f64;
    let mut ext = ExtrinsicState::new(obs.len(), prior_var, cfg.sigma2_init.unwrap_or(prior_var / 2.0));

    let (zb, vb) = mmse_refine(obs, &ext.za_ext, &ext.va_ext, ext.sigma2)?;
    ext.zb_post = zb;
    ext.vb_post = vb;
    b_extrinsic(&mut ext, cfg);

    let mut pseudo =
        HeteroObservations { pattern, y: ext.zb_ext.clone(), beta: ext.vb_ext.iter().map(|v| 1.0 / v).collect() };
    let mut nmse_trace = Vec::new();
    let mut change_trace = Vec::with_capacity(cfg.t_outer);
    let mut prev = state.mean_matrix();
    let mut stagnated = false;

    for _ in 0..cfg.t_outer {
        pseudo.y.copy_from_slice(&ext.zb_ext);
        for (b, v) in pseudo.beta.iter_mut().zip(&ext.vb_ext) {
            *b = 1.0 / v;
        }
        for _ in 0..cfg.inner_sweeps {
            vb_sweep(&mut state, &pseudo);
        }

        let (za, va) = posterior_moments_on(&state, &pseudo.pattern);
        ext.za_post = za;
        ext.va_post = va;
        if learn {
            ext.sigma2 = update_noise_variance(&ext)?.max(cfg.var_floor);
        }

        let clamped_a = a_extrinsic(&mut ext, cfg);
        let (zb, vb) = mmse_refine(obs, &ext.za_ext, &ext.va_ext, ext.sigma2)?;
        ext.zb_post = zb;
        ext.vb_post = vb;

        let old_z = ext.zb_ext.clone();
        let old_v = ext.vb_ext.clone();
        let clamped_b = b_extrinsic(&mut ext, cfg);
        damp(&mut ext.zb_ext, &mut ext.vb_ext, &old_z, &old_v, cfg.damping);
        stagnated |= clamped_a == ext.len() && clamped_b == ext.len();
        let cur = state.mean_matrix();
        let den = prev.norm();
        change_trace.push(if den > 0.0 { (&cur - &prev).norm() / den } else { cur.norm() });
        if let Some(z) = reference {
            nmse_trace.push(nmse(&cur, z));
        }
        prev = cur;
    }

    Ok(GrSblResult {
        rank: estimate_rank(&state.gamma, &state.column_energies()),
        sigma2: ext.sigma2,
        iterations: cfg.t_outer,
        state,
        extrinsic: ext,
        nmse_trace,
        change_trace,
        stagnated,
    })
}
