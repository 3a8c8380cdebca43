//! Error metrics, all reported in dB with a finite floor.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::{wrap_angle, CMat};

/// Reported instead of `-inf` for exact matches.
pub const DB_FLOOR: f64 = -300.0;

fn db20(ratio: f64) -> f64 {
    if ratio > 0.0 {
        (20.0 * ratio.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

/// `20 log10(‖Ẑ - Z‖_F / ‖Z‖_F)`.
pub fn nmse(z_hat: &CMat, z: &CMat) -> f64 {
    db20((z_hat - z).norm() / z.norm())
}

/// NMSE of `c Ẑ` for the complex scale `c = ⟨Ẑ, Z⟩ / ‖Ẑ‖_F²` minimizing it.
pub fn debiased_nmse(z_hat: &CMat, z: &CMat) -> f64 {
    let energy = z_hat.norm_squared();
    let scale = if energy > 0.0 { z_hat.dotc(z) / energy } else { Complex64::new(0.0, 0.0) };
    db20((z_hat * scale - z).norm() / z.norm())
}

/// `10 log10 Σ_i wrap(est_{assign[i]} - truth_i)²`.
pub fn mse_freq(est: &[f64], truth: &[f64], assignment: &[usize]) -> Result<f64> {
    if assignment.len() != truth.len() || assignment.iter().any(|&a| a >= est.len()) {
        return Err(Error::DimensionMismatch("assignment does not index the estimates".into()));
    }
    let total: f64 = truth.iter().zip(assignment).map(|(t, &a)| wrap_angle(est[a] - t).powi(2)).sum();
    Ok(if total > 0.0 { (10.0 * total.log10()).max(DB_FLOOR) } else { DB_FLOOR })
}

/// Matches every true `(θ, φ)` pair to a distinct estimate, minimizing the
/// total wrapped `|Δθ| + |Δφ|`. Entry `i` of the result indexes the estimate
/// paired with truth `i`.
pub fn match_frequencies(est_theta: &[f64], est_phi: &[f64], theta: &[f64], phi: &[f64]) -> Result<Vec<usize>> {
    if est_theta.len() != est_phi.len() || theta.len() != phi.len() {
        return Err(Error::DimensionMismatch("theta and phi lengths differ".into()));
    }
    if est_theta.len() < theta.len() {
        return Err(Error::DimensionMismatch("fewer estimates than true components".into()));
    }
    let cost: Vec<Vec<f64>> = theta
        .iter()
        .zip(phi)
        .map(|(t, p)| {
            est_theta.iter().zip(est_phi).map(|(et, ep)| wrap_angle(et - t).abs() + wrap_angle(ep - p).abs()).collect()
        })
        .collect();
    Ok(min_cost_assignment(&cost))
}

/// Hungarian algorithm for a rows ≤ columns cost matrix; returns the column
/// assigned to each row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    assert!(rows <= cols, "more rows than columns");
    // Potentials and matching use 1-based indices with 0 as the virtual column.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; rows];
    for j in 1..=cols {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}
