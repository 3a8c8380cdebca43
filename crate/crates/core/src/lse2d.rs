//! Two-dimensional line spectral estimation on top of the factor estimates:
//! MUSIC on each factor's Gram matrix, least-squares powers, and resolution
//! of the unitary, phase, sign and permutation ambiguities between the two
//! factor sides.
//!
//! The model is `Z = A_m(θ) diag(g) A_n(φ)^H` with `a_m(θ)_l = e^{jlθ}`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grsbl::{run_mc_grsbl, GrSblConfig, GrSblResult};
use crate::numerics::{hermitian_eig, least_squares, least_squares_multi, wrap_angle, CMat, CVec};
use crate::quantizer::ObservedMatrix;

pub const DEFAULT_GRID: usize = 1 << 14;

/// Frequencies closer than this are treated as coincident.
const MIN_SEPARATION: f64 = 1e-6;

/// Condition number above which a least-squares fit is flagged.
const ILL_CONDITIONED: f64 = 1e8;

pub fn steering(m: usize, theta: f64) -> CVec {
    CVec::from_fn(m, |l, _| Complex64::from_polar(1.0, l as f64 * theta))
}

/// `[a_m(θ_1), …, a_m(θ_r)]`.
pub fn steering_matrix(m: usize, thetas: &[f64]) -> CMat {
    CMat::from_fn(m, thetas.len(), |l, c| Complex64::from_polar(1.0, l as f64 * thetas[c]))
}

/// Frequencies, amplitudes and order of a 2D line spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneFile", into = "SceneFile")]
pub struct LineSpectralScene {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub g: Vec<Complex64>,
}

impl LineSpectralScene {
    pub fn new(theta: Vec<f64>, phi: Vec<f64>, g: Vec<Complex64>) -> Result<Self> {
        if theta.len() != phi.len() || theta.len() != g.len() {
            return Err(Error::DimensionMismatch(format!(
                "scene has {} theta, {} phi and {} amplitudes",
                theta.len(),
                phi.len(),
                g.len()
            )));
        }
        if theta.iter().chain(&phi).any(|x| !x.is_finite()) {
            return Err(invalid("frequencies must be finite"));
        }
        Ok(Self { theta, phi, g })
    }

    pub fn empty() -> Self {
        Self { theta: Vec::new(), phi: Vec::new(), g: Vec::new() }
    }

    pub fn order(&self) -> usize {
        self.theta.len()
    }

    /// `A_m(θ) diag(g) A_n(φ)^H`.
    pub fn matrix(&self, m: usize, n: usize) -> CMat {
        let mut a = steering_matrix(m, &self.theta);
        for (c, g) in self.g.iter().enumerate() {
            let col = a.column(c) * *g;
            a.set_column(c, &col);
        }
        a * steering_matrix(n, &self.phi).adjoint()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    theta: Vec<f64>,
    phi: Vec<f64>,
    g_re: Vec<f64>,
    g_im: Vec<f64>,
    r: usize,
}

impl TryFrom<SceneFile> for LineSpectralScene {
    type Error = Error;

    fn try_from(f: SceneFile) -> Result<Self> {
        if f.g_re.len() != f.g_im.len() || f.r != f.theta.len() {
            return Err(Error::DimensionMismatch("scene fields disagree on the order r".into()));
        }
        let g = f.g_re.iter().zip(&f.g_im).map(|(&re, &im)| Complex64::new(re, im)).collect();
        Self::new(f.theta, f.phi, g)
    }
}

impl From<LineSpectralScene> for SceneFile {
    fn from(s: LineSpectralScene) -> Self {
        Self {
            r: s.order(),
            g_re: s.g.iter().map(|g| g.re).collect(),
            g_im: s.g.iter().map(|g| g.im).collect(),
            theta: s.theta,
            phi: s.phi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MusicEstimate {
    pub freqs: Vec<f64>,
    /// Fewer local maxima than requested were found.
    pub degraded: bool,
}

/// Squared norm of the projection of `a_m(ω)` onto the signal subspace.
fn signal_energy(es: &CMat, omega: f64) -> f64 {
    let m = es.nrows();
    let step = Complex64::from_polar(1.0, omega);
    let mut total = 0.0;
    for c in 0..es.ncols() {
        let mut phase = Complex64::new(1.0, 0.0);
        let mut acc = Complex64::new(0.0, 0.0);
        for l in 0..m {
            acc += es[(l, c)].conj() * phase;
            phase *= step;
        }
        total += acc.norm_sqr();
    }
    total
}

/// Maximizes `f` on `[a, b]` by golden-section search.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..80 {
        if b - a < 1e-13 {
            break;
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = f(x1);
        }
    }
    0.5 * (a + b)
}

/// MUSIC frequencies from the Gram matrix `F F^H` of a factor.
///
/// Peaks of `1 / ‖E_noise^H a_m(ω)‖²` are located on a uniform grid over
/// `[-π, π)` and refined within one grid step on either side.
pub fn music_1d(f: &CMat, r: usize, grid_size: usize) -> Result<MusicEstimate> {
    let m = f.nrows();
    if r == 0 {
        return Ok(MusicEstimate { freqs: Vec::new(), degraded: false });
    }
    if r >= m {
        return Err(Error::Precondition(format!("MUSIC needs r < m, got r = {r}, m = {m}")));
    }
    if grid_size < 3 {
        return Err(invalid("MUSIC grid needs at least three points"));
    }
    let gram = f * f.adjoint();
    let (_, vectors) = hermitian_eig(&gram)?;
    let es = vectors.columns(0, r).into_owned();

    let h = 2.0 * PI / grid_size as f64;
    let grid = |i: usize| -PI + i as f64 * h;
    // Noise-subspace energy m - ‖E_s^H a‖²; peaks of the pseudospectrum are its minima.
    let noise: Vec<f64> = (0..grid_size).map(|i| (m as f64 - signal_energy(&es, grid(i))).max(0.0)).collect();
    let mut peaks: Vec<usize> = (0..grid_size)
        .filter(|&i| {
            let prev = noise[(i + grid_size - 1) % grid_size];
            let next = noise[(i + 1) % grid_size];
            noise[i] < prev && noise[i] <= next
        })
        .collect();
    peaks.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]).then(a.cmp(&b)));
    let degraded = peaks.len() < r;
    peaks.truncate(r);

    let mut freqs: Vec<f64> =
        peaks.iter().map(|&i| wrap_angle(golden_max(|w| signal_energy(&es, w), grid(i) - h, grid(i) + h))).collect();
    freqs.sort_by(f64::total_cmp);
    Ok(MusicEstimate { freqs, degraded })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFit {
    pub powers: Vec<f64>,
    pub ill_conditioned: bool,
}

/// Least-squares fit of `F F^H ≈ Σ_i x_i a(ω_i) a(ω_i)^H`, real parts floored
/// at zero.
pub fn ls_powers(f: &CMat, freqs: &[f64]) -> Result<PowerFit> {
    check_distinct(freqs)?;
    let m = f.nrows();
    let gram = f * f.adjoint();
    let a = steering_matrix(m, freqs);
    // Column-major vec(a a^H) = conj(a) ⊗ a.
    let design = CMat::from_fn(m * m, freqs.len(), |idx, c| a[(idx % m, c)] * a[(idx / m, c)].conj());
    let rhs = CMat::from_column_slice(m * m, 1, gram.as_slice());
    let sol = least_squares_multi(&design, &rhs)?;
    Ok(PowerFit {
        powers: sol.x.iter().map(|x| x.re.max(0.0)).collect(),
        ill_conditioned: sol.rank < freqs.len() || sol.condition > ILL_CONDITIONED,
    })
}

fn check_distinct(freqs: &[f64]) -> Result<()> {
    for (i, a) in freqs.iter().enumerate() {
        for b in &freqs[i + 1..] {
            if wrap_angle(a - b).abs() <= MIN_SEPARATION {
                return Err(Error::Precondition(format!("frequencies {a} and {b} coincide")));
            }
        }
    }
    Ok(())
}

/// `Γ̂ = (A_m(θ̂) diag(f̂))^† Û`.
pub fn estimate_unitary(u: &CMat, thetas: &[f64], f: &[f64]) -> Result<CMat> {
    if thetas.len() != f.len() {
        return Err(Error::DimensionMismatch("one amplitude per frequency required".into()));
    }
    if f.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Precondition("amplitudes must be positive".into()));
    }
    check_distinct(thetas)?;
    let mut a = steering_matrix(u.nrows(), thetas);
    for (c, &x) in f.iter().enumerate() {
        a.column_mut(c).scale_mut(x);
    }
    Ok(least_squares_multi(&a, u)?.x)
}

/// Pairing between the `θ̂` columns and the `φ̂` estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingResult {
    /// `permutation[c]` is the index of the `φ̂` paired with `θ̂_c`.
    pub permutation: Vec<usize>,
    /// Sign of the phase square root for each `θ̂` column.
    pub signs: Vec<f64>,
    /// `∠ĥ` for each `θ̂` column, with `π` added where the sign is negative.
    pub phases: Vec<f64>,
    /// Rows index `φ̂`, columns index `θ̂`.
    pub j_pi: DMatrix<f64>,
}

/// Greedy projection onto generalized permutation matrices: take the
/// largest-magnitude remaining entry, fix its sign from the real part, and
/// delete its row and column.
pub fn binarize_generalized_permutation(x: &CMat) -> Result<DMatrix<f64>> {
    let r = x.nrows();
    if x.ncols() != r {
        return Err(Error::DimensionMismatch("generalized permutation must be square".into()));
    }
    let mut rows_left = vec![true; r];
    let mut cols_left = vec![true; r];
    let mut out = DMatrix::zeros(r, r);
    for _ in 0..r {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in (0..r).filter(|&i| rows_left[i]) {
            for j in (0..r).filter(|&j| cols_left[j]) {
                let mag = x[(i, j)].norm();
                if best.is_none_or(|(_, _, b)| mag > b) {
                    best = Some((i, j, mag));
                }
            }
        }
        let (i, j, _) = best.expect("rows and columns remain");
        out[(i, j)] = if x[(i, j)].re >= 0.0 { 1.0 } else { -1.0 };
        rows_left[i] = false;
        cols_left[j] = false;
    }
    Ok(out)
}

/// Resolves phases, signs and the pairing of `φ̂` to `θ̂` from `V̂` and `Γ̂`.
pub fn resolve_pairing(v: &CMat, gamma: &CMat, phis: &[f64], h_abs: &[f64]) -> Result<PairingResult> {
    let r = phis.len();
    let n = v.nrows();
    if gamma.shape() != (r, r) || v.ncols() != r || h_abs.len() != r {
        return Err(Error::DimensionMismatch(format!("pairing needs V: n x {r}, Gamma: {r} x {r} and {r} magnitudes")));
    }
    if h_abs.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Precondition("magnitudes must be positive".into()));
    }
    check_distinct(phis)?;
    let w = v * gamma.adjoint();

    // T = W W^T = Σ h_i² a(φ_i) a(φ_i)^T, blind to the pairing.
    let t = &w * w.transpose();
    let a = steering_matrix(n, phis);
    let design = CMat::from_fn(n * n, r, |idx, c| h_abs[c] * h_abs[c] * a[(idx % n, c)] * a[(idx / n, c)]);
    let e2 = least_squares(&design, &CVec::from_column_slice(t.as_slice()))?;
    let root: Vec<Complex64> =
        e2.iter().map(|z| if z.norm() > 0.0 { (z / z.norm()).sqrt() } else { Complex64::new(1.0, 0.0) }).collect();

    let mut basis = a;
    for c in 0..r {
        let col = basis.column(c) * (root[c] * h_abs[c]);
        basis.set_column(c, &col);
    }
    let j_raw = least_squares_multi(&basis, &w)?.x;
    let j_pi = binarize_generalized_permutation(&j_raw)?;

    let mut permutation = vec![0; r];
    let mut signs = vec![1.0; r];
    let mut phases = vec![0.0; r];
    for p in 0..r {
        for c in 0..r {
            if j_pi[(p, c)] != 0.0 {
                permutation[c] = p;
                signs[c] = j_pi[(p, c)];
                let shift = if j_pi[(p, c)] < 0.0 { PI } else { 0.0 };
                phases[c] = wrap_angle(root[p].arg() + shift);
            }
        }
    }
    Ok(PairingResult { permutation, signs, phases, j_pi })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lse2dConfig {
    pub solver: GrSblConfig,
    pub grid_size: usize,
}

impl Default for Lse2dConfig {
    fn default() -> Self {
        Self { solver: GrSblConfig::default(), grid_size: DEFAULT_GRID }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lse2dEstimate {
    pub scene: LineSpectralScene,
    pub z_hat: CMat,
    pub pairing: Option<PairingResult>,
    /// A MUSIC scan found too few peaks or a least-squares fit was
    /// ill-conditioned.
    pub degraded: bool,
}

#[derive(Debug, Clone)]
pub struct Lse2dResult {
    pub estimate: Lse2dEstimate,
    pub solver: GrSblResult,
}

/// Line-spectral estimate from factor means `Û`, `V̂` using the `rank`
/// columns with the smallest precisions.
pub fn lse2d_from_factors(u: &CMat, v: &CMat, gamma: &[f64], rank: usize, grid_size: usize) -> Result<Lse2dEstimate> {
    let (m, n) = (u.nrows(), v.nrows());
    if u.ncols() != gamma.len() || v.ncols() != gamma.len() {
        return Err(Error::DimensionMismatch("factor widths differ from the number of precisions".into()));
    }
    let empty = |degraded| Lse2dEstimate {
        scene: LineSpectralScene::empty(),
        z_hat: CMat::zeros(m, n),
        pairing: None,
        degraded,
    };
    if rank == 0 {
        return Ok(empty(false));
    }
    let mut keep: Vec<usize> = (0..gamma.len()).collect();
    keep.sort_by(|&a, &b| gamma[a].total_cmp(&gamma[b]));
    keep.truncate(rank);
    let u = u.select_columns(&keep);
    let v = v.select_columns(&keep);

    let mu = music_1d(&u, rank, grid_size)?;
    let mv = music_1d(&v, rank, grid_size)?;
    if mu.degraded || mv.degraded || check_distinct(&mu.freqs).is_err() || check_distinct(&mv.freqs).is_err() {
        return Ok(empty(true));
    }
    let pu = ls_powers(&u, &mu.freqs)?;
    let pv = ls_powers(&v, &mv.freqs)?;
    if pu.powers.iter().chain(&pv.powers).any(|&p| p <= 0.0) {
        return Ok(empty(true));
    }
    let f: Vec<f64> = pu.powers.iter().map(|p| p.sqrt()).collect();
    let h_abs: Vec<f64> = pv.powers.iter().map(|p| p.sqrt()).collect();

    let gamma_hat = estimate_unitary(&u, &mu.freqs, &f)?;
    let pairing = resolve_pairing(&v, &gamma_hat, &mv.freqs, &h_abs)?;

    let phi: Vec<f64> = pairing.permutation.iter().map(|&p| mv.freqs[p]).collect();
    let g: Vec<Complex64> =
        (0..rank).map(|c| Complex64::from_polar(f[c] * h_abs[pairing.permutation[c]], -pairing.phases[c])).collect();
    let scene = LineSpectralScene::new(mu.freqs, phi, g)?;
    let z_hat = scene.matrix(m, n);
    Ok(Lse2dEstimate { scene, z_hat, pairing: Some(pairing), degraded: pu.ill_conditioned || pv.ill_conditioned })
}

/// Runs MC-Gr-SBL and extracts the line spectrum from its factors.
pub fn run_lse2d(obs: &ObservedMatrix, cfg: &Lse2dConfig) -> Result<Lse2dResult> {
    let solver = run_mc_grsbl(obs, &cfg.solver)?;
    let rank = solver.rank.min(obs.m.min(obs.n).saturating_sub(1));
    let estimate =
        lse2d_from_factors(&solver.state.u_mean, &solver.state.v_mean, &solver.state.gamma, rank, cfg.grid_size)?;
    Ok(Lse2dResult { estimate, solver })
}
