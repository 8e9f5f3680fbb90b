// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pace_core::disentangle::{club_bound, fit_q_step, ClubEstimator, ClubTarget};
use pace_core::tensor::no_grad;
use pace_core::Tensor;

const RHO: f64 = 0.9;

fn correlated(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a: f64 = rng.sample(rand_distr::StandardNormal);
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            (a, RHO * a + (1.0 - RHO * RHO).sqrt() * e)
        })
        .unzip()
}

/// All-pairs bound with the exact conditional `N(ρx, 1 − ρ²)`, in plain f64.
fn exact_conditional_bound(x: &[f64], y: &[f64]) -> f64 {
    let var = 1.0 - RHO * RHO;
    let n = x.len() as f64;
    let positive = x.iter().zip(y).map(|(a, b)| -(b - RHO * a).powi(2)).sum::<f64>() / n;
    // Mean over all (i, j) of (y_j − ρx_i)², expanded into moments.
    let (sx, sxx) = (x.iter().sum::<f64>() / n, x.iter().map(|v| v * v).sum::<f64>() / n);
    let (sy, syy) = (y.iter().sum::<f64>() / n, y.iter().map(|v| v * v).sum::<f64>() / n);
    let negative = -(syy - 2.0 * RHO * sx * sy + RHO * RHO * sxx);
    (positive - negative) / (2.0 * var)
}

#[test]
fn exact_conditional_oracle_is_near_the_analytic_value() {
    let (x, y) = correlated(4096, 1);
    let b = exact_conditional_bound(&x, &y);
    assert!((b - RHO * RHO / (1.0 - RHO * RHO)).abs() < 0.3, "{b}");
}

#[test]
fn fitted_bound_tracks_the_exact_conditional_and_exceeds_true_mi() {
    let n = 2048;
    let (xv, yv) = correlated(n, 2);
    let oracle = exact_conditional_bound(&xv, &yv);
    let x = Tensor::new(xv, &[n, 1]).unwrap();
    let y = Tensor::new(yv, &[n, 1]).unwrap();
    let mut est = ClubEstimator::new(1, 1, 16, ClubTarget::F0, &mut ChaCha8Rng::seed_from_u64(3));
    for _ in 0..1500 {
        fit_q_step(&x, &y, &mut est, 1e-2).unwrap();
    }
    let fitted = no_grad(|| club_bound(&x, &y, &est)).unwrap().item();
    let true_mi = -0.5 * (1.0 - RHO * RHO).ln();
    assert!(fitted >= true_mi, "{fitted} < {true_mi}");
    assert!((fitted - oracle).abs() < 0.1 * oracle, "fitted {fitted}, oracle {oracle}");
}

#[test]
fn independent_variables_give_a_small_bound() {
    let n = 2048;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xv: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let yv: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let x = Tensor::new(xv, &[n, 1]).unwrap();
    let y = Tensor::new(yv, &[n, 1]).unwrap();
    let mut est = ClubEstimator::new(1, 1, 16, ClubTarget::Uv, &mut rng);
    for _ in 0..500 {
        fit_q_step(&x, &y, &mut est, 1e-2).unwrap();
    }
    let fitted = no_grad(|| club_bound(&x, &y, &est)).unwrap().item();
    assert!(fitted.abs() < 0.05, "{fitted}");
}
