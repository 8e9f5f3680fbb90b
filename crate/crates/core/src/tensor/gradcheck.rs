// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference checking of reverse-mode gradients.

use super::{no_grad, Tensor};
use crate::error::Result;

/// Outcome for one checked tensor.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, or 0 when both vanish.
    pub rel_error: f64,
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares the backward pass of `loss` against central differences with
/// step `h`, for every leaf in `wrt`.
///
/// `loss` is re-evaluated `2·n` times for `n` checked elements, so keep the
/// inputs small.
pub fn check<F>(wrt: &[Tensor], h: f64, loss: F) -> Result<Vec<GradReport>>
where
    F: Fn() -> Result<Tensor>,
{
    for t in wrt {
        t.zero_grad();
    }
    loss()?.backward()?;
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut reports = Vec::with_capacity(wrt.len());
    for (t, analytic) in wrt.iter().zip(analytic) {
        let mut numeric = vec![0.0; t.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let original = t.values()[i];
            t.update_values(|v| v[i] = original + h);
            let plus = no_grad(&loss)?.item();
            t.update_values(|v| v[i] = original - h);
            let minus = no_grad(&loss)?.item();
            t.update_values(|v| v[i] = original);
            *slot = (plus - minus) / (2.0 * h);
        }
        let rel_error = relative_error(&analytic, &numeric);
        reports.push(GradReport {
            analytic,
            numeric,
            rel_error,
        });
    }
    for t in wrt {
        t.zero_grad();
    }
    Ok(reports)
}

/// Largest relative error over all checked tensors.
pub fn max_rel_error<F>(wrt: &[Tensor], h: f64, loss: F) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    Ok(check(wrt, h, loss)?
        .iter()
        .map(|r| r.rel_error)
        .fold(0.0, f64::max))
}
