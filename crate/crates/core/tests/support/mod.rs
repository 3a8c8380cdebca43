//! Property suites shared by the `properties` and `acceptance` targets.

use std::f64::consts::PI;

use mcq_core::grsbl::{extrinsic, gaussian_product};
use mcq_core::harness::{debiased_nmse, nmse, run_experiment, write_csv, ExperimentConfig, RunOptions, Scenario};
use mcq_core::lse2d::{binarize_generalized_permutation, music_1d, steering_matrix};
use mcq_core::numerics::CMat;
use mcq_core::quantizer::{build_uniform_quantizer, BitDepth};
use mcq_core::vsbl::{vb_sweep, FactorState, HeteroObservations, Pattern};
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

pub type Suite = (&'static str, fn() -> Result<(), String>);

pub const SUITES: &[Suite] = &[
    ("extrinsic round trip", extrinsic_round_trip),
    ("covariances stay positive definite", covariances_stay_pd),
    ("quantizer partition", quantizer_partition),
    ("quantizer monotonicity", quantizer_monotone),
    ("MUSIC unitary invariance", music_unitary_invariance),
    ("generalized permutation fixed point", permutation_fixed_point),
    ("debiased NMSE never exceeds NMSE", debiased_below_raw),
    ("harness determinism", harness_determinism),
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

fn complex() -> impl Strategy<Value = Complex64> {
    (-3.0f64..3.0, -3.0f64..3.0).prop_map(|(re, im)| Complex64::new(re, im))
}

fn complex_matrix(m: usize, n: usize) -> impl Strategy<Value = CMat> {
    proptest::collection::vec(complex(), m * n).prop_map(move |v| CMat::from_vec(m, n, v))
}

fn extrinsic_round_trip() -> Result<(), String> {
    let strategy = (complex(), 0.01f64..5.0, complex(), 0.01f64..5.0);
    runner(512)
        .run(&strategy, |(ext_mean, ext_var, cav_mean, cav_var)| {
            // Build a posterior from known messages, then strip the cavity again.
            let (post_mean, post_var) = gaussian_product(ext_mean, ext_var, cav_mean, cav_var);
            let (m, v) = extrinsic(post_mean, post_var, cav_mean, cav_var, 1e-11, 1e11);
            prop_assert!((v - ext_var).abs() < 1e-9 * ext_var);
            prop_assert!((m - ext_mean).norm() < 1e-8 * (1.0 + ext_mean.norm()));
            let (pm, pv) = gaussian_product(m, v, cav_mean, cav_var);
            prop_assert!((pv - post_var).abs() < 1e-9 * post_var);
            prop_assert!((pm - post_mean).norm() < 1e-8 * (1.0 + post_mean.norm()));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn is_hermitian_pd(s: &CMat) -> bool {
    let herm = (s - s.adjoint()).norm() <= 1e-10 * s.norm();
    herm && s.clone().cholesky().is_some()
}

fn covariances_stay_pd() -> Result<(), String> {
    let strategy =
        (2usize..6, 2usize..6, 1usize..4, any::<u64>(), proptest::collection::vec((complex(), 0.01f64..100.0), 36));
    runner(64)
        .run(&strategy, |(m, n, k, seed, draws)| {
            let omega: Vec<_> =
                (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| (i + j) % 3 != 1).collect();
            let pattern = Pattern::new(m, n, &omega).unwrap();
            let y = draws.iter().take(omega.len()).map(|d| d.0).collect();
            let beta = draws.iter().take(omega.len()).map(|d| d.1).collect();
            let obs = HeteroObservations::new(pattern, y, beta).unwrap();
            let mut state = FactorState::init_seeded(m, n, k, seed);
            for _ in 0..3 {
                vb_sweep(&mut state, &obs);
                prop_assert!(state.u_cov.iter().chain(&state.v_cov).all(is_hermitian_pd));
                prop_assert!(state.gamma.iter().all(|&g| g > 0.0));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn quantizer_partition() -> Result<(), String> {
    runner(1024)
        .run(&(1u32..=8, 0.1f64..10.0, -100.0f64..100.0), |(bits, sigma, a)| {
            let q = build_uniform_quantizer(bits, sigma).unwrap();
            let hits: Vec<u32> = (0..q.levels() as u32).filter(|&b| q.bin_interval(b).unwrap().contains(a)).collect();
            prop_assert_eq!(hits, vec![q.quantize_real(a)]);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn quantizer_monotone() -> Result<(), String> {
    runner(1024)
        .run(&(1u32..=8, 0.1f64..10.0, -50.0f64..50.0, 0.0f64..20.0), |(bits, sigma, a, d)| {
            let q = build_uniform_quantizer(bits, sigma).unwrap();
            prop_assert!(q.quantize_real(a) <= q.quantize_real(a + d));
            let c = q.codewords();
            prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Well separated frequencies: `r` evenly spaced points with a random offset
/// and jitter below a quarter of the spacing.
fn spread_frequencies(r: usize) -> impl Strategy<Value = Vec<f64>> {
    (-PI..PI, proptest::collection::vec(-0.25f64..0.25, r)).prop_map(move |(offset, jitter)| {
        let spacing = 2.0 * PI / r as f64;
        jitter
            .iter()
            .enumerate()
            .map(|(i, j)| mcq_core::numerics::wrap_angle(offset + (i as f64 + j) * spacing))
            .collect()
    })
}

fn music_unitary_invariance() -> Result<(), String> {
    let strategy = (1usize..4)
        .prop_flat_map(|r| (spread_frequencies(r), proptest::collection::vec(0.5f64..2.0, r), complex_matrix(r, r)));
    runner(48)
        .run(&strategy, |(freqs, amps, seed_matrix)| {
            let r = freqs.len();
            let mut f = steering_matrix(16, &freqs);
            for (c, a) in amps.iter().enumerate() {
                f.column_mut(c).scale_mut(*a);
            }
            let q = seed_matrix.qr().q();
            prop_assume!((q.adjoint() * &q - CMat::identity(r, r)).norm() < 1e-9);
            let plain = music_1d(&f, r, 4096).unwrap();
            let rotated = music_1d(&(&f * q), r, 4096).unwrap();
            prop_assert!(!plain.degraded && !rotated.degraded);
            for (a, b) in plain.freqs.iter().zip(&rotated.freqs) {
                prop_assert!(
                    mcq_core::numerics::wrap_angle(a - b).abs() < 1e-7,
                    "{:?} vs {:?}",
                    plain.freqs,
                    rotated.freqs
                );
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn permutation_fixed_point() -> Result<(), String> {
    let strategy = (1usize..7).prop_flat_map(|r| {
        (Just((0..r).collect::<Vec<usize>>()).prop_shuffle(), proptest::collection::vec(any::<bool>(), r))
    });
    runner(256)
        .run(&strategy, |(perm, signs)| {
            let r = perm.len();
            let j = DMatrix::from_fn(r, r, |i, c| {
                if perm[c] == i {
                    if signs[c] {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    0.0
                }
            });
            let x = j.map(|v| Complex64::new(v, 0.0));
            prop_assert_eq!(binarize_generalized_permutation(&x).unwrap(), j);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn debiased_below_raw() -> Result<(), String> {
    let strategy = (1usize..5, 1usize..5).prop_flat_map(|(m, n)| (complex_matrix(m, n), complex_matrix(m, n)));
    runner(512)
        .run(&strategy, |(z_hat, z)| {
            prop_assume!(z.norm() > 1e-6);
            prop_assert!(debiased_nmse(&z_hat, &z) <= nmse(&z_hat, &z) + 1e-9);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn harness_determinism() -> Result<(), String> {
    runner(6)
        .run(&(any::<u64>(), prop_oneof![Just(Scenario::RandomLowrank), Just(Scenario::Lse2d)]), |(seed, scenario)| {
            let cfg = ExperimentConfig {
                scenario,
                m: 8,
                n: 8,
                r: 1,
                k: Some(2),
                p: 0.8,
                snr_db: vec![10.0],
                bits: vec![BitDepth::Finite(2), BitDepth::Unquantized],
                trials: 2,
                seed,
                t_outer: 10,
                damping: 0.7,
                learn_noise: None,
                min_sep: None,
            };
            let csv = |workers| {
                let rows = run_experiment(&cfg, &RunOptions { workers: Some(workers), timing: false }).unwrap();
                let mut out = Vec::new();
                write_csv(&rows, &mut out).unwrap();
                out
            };
            let first = csv(1);
            prop_assert_eq!(&first, &csv(1));
            prop_assert_eq!(&first, &csv(2));
            Ok(())
        })
        .map_err(|e| e.to_string())
}
