//! Synthetic low-rank and line-spectral scenes, sampling sets and the noisy
//! quantized channel.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::lse2d::LineSpectralScene;
use crate::numerics::{wrap_angle, CMat};
use crate::quantizer::{
    build_uniform_quantizer, observe_unquantized, quantize_complex_matrix, BitDepth, ObservedMatrix,
};

/// Resampling budget for separated frequency draws.
const MAX_RESAMPLES: usize = 10_000;

/// Standard complex Gaussian `CN(0, 1)`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// `Z = U V^H` with i.i.d. `CN(0, 1)` factors; returns `Z` and `σ_z² = r`.
pub fn gen_random_lowrank<R: Rng + ?Sized>(m: usize, n: usize, r: usize, rng: &mut R) -> Result<(CMat, f64)> {
    if r == 0 || r > m.min(n) {
        return Err(invalid(format!("rank {r} must be in 1..={}", m.min(n))));
    }
    let u = CMat::from_fn(m, r, |_, _| complex_normal(rng));
    let v = CMat::from_fn(n, r, |_, _| complex_normal(rng));
    Ok((u * v.adjoint(), r as f64))
}

/// Default minimum wrapped separation `2 · 2π / max(m, n)`.
pub fn default_min_sep(m: usize, n: usize) -> f64 {
    4.0 * PI / m.max(n) as f64
}

fn separated_frequencies<R: Rng + ?Sized>(r: usize, min_sep: f64, rng: &mut R) -> Result<Vec<f64>> {
    for _ in 0..MAX_RESAMPLES {
        let f: Vec<f64> = (0..r).map(|_| rng.random_range(-PI..PI)).collect();
        let ok = f.iter().enumerate().all(|(i, a)| f[i + 1..].iter().all(|b| wrap_angle(a - b).abs() >= min_sep));
        if ok {
            return Ok(f);
        }
    }
    Err(Error::Precondition(format!("no {r} frequencies with separation {min_sep} after {MAX_RESAMPLES} draws")))
}

/// Line-spectral scene with separated frequencies in each coordinate,
/// magnitudes from `N(1, 0.2)` truncated to positive values and uniform
/// phases. Returns `Z`, the scene and `σ_z² = r`.
pub fn gen_line_spectral<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    r: usize,
    min_sep: f64,
    rng: &mut R,
) -> Result<(CMat, LineSpectralScene, f64)> {
    if r == 0 || r > m.min(n) {
        return Err(invalid(format!("order {r} must be in 1..={}", m.min(n))));
    }
    if !(min_sep >= 0.0) || r as f64 * min_sep >= 2.0 * PI {
        return Err(Error::Precondition(format!("{r} components cannot be {min_sep} apart on the circle")));
    }
    let theta = separated_frequencies(r, min_sep, rng)?;
    let phi = separated_frequencies(r, min_sep, rng)?;
    let magnitude = Normal::new(1.0, 0.2f64.sqrt()).expect("valid normal");
    let g = (0..r)
        .map(|_| {
            let mut a = magnitude.sample(rng);
            while a <= 0.0 {
                a = magnitude.sample(rng);
            }
            Complex64::from_polar(a, rng.random_range(-PI..PI))
        })
        .collect();
    let scene = LineSpectralScene::new(theta, phi, g)?;
    Ok((scene.matrix(m, n), scene, r as f64))
}

/// Uniform subset of `round(p·m·n)` entries, in row-major order.
pub fn sample_omega<R: Rng + ?Sized>(m: usize, n: usize, p: f64, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid(format!("sampling fraction must be in (0, 1], got {p}")));
    }
    let total = m * n;
    let count = ((p * total as f64).round() as usize).min(total);
    let mut picked = index::sample(rng, total, count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|e| (e / n, e % n)).collect())
}

/// Noise variance `σ² = σ_z² · 10^(-SNR/10)`; zero for infinite SNR.
pub fn noise_variance(sigma_z2: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        sigma_z2 * 10f64.powf(-snr_db / 10.0)
    }
}

/// Adds `CN(0, σ²)` noise on `Ω` and quantizes the real and imaginary parts.
/// Returns the observations and `σ²`.
pub fn add_noise_and_quantize<R: Rng + ?Sized>(
    z: &CMat,
    sigma_z2: f64,
    snr_db: f64,
    bits: BitDepth,
    omega: &[(usize, usize)],
    rng: &mut R,
) -> Result<(ObservedMatrix, f64)> {
    if !(sigma_z2 > 0.0) || snr_db.is_nan() {
        return Err(invalid("signal variance must be positive and the SNR a number"));
    }
    let sigma2 = noise_variance(sigma_z2, snr_db);
    let sd = sigma2.sqrt();
    let mut w = z.clone();
    for &(i, j) in omega {
        w[(i, j)] += complex_normal(rng) * sd;
    }
    let sigma_z = sigma_z2.sqrt();
    let obs = match bits {
        BitDepth::Finite(b) => quantize_complex_matrix(&w, omega, &build_uniform_quantizer(b, sigma_z)?),
        BitDepth::Unquantized => observe_unquantized(&w, omega, sigma_z),
    };
    Ok((obs, sigma2))
}
