// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;

use crate::tensor::Tensor;

/// Adam with bias correction and optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    moments: HashMap<u64, (Vec<f64>, Vec<f64>, u64)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            moments: HashMap::new(),
        }
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    /// Updates every parameter that holds a gradient, then clears the
    /// gradients. Parameters without a gradient are left untouched.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, params: &[Tensor]) -> f64 {
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(Tensor::grad).collect();
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (p, g) in params.iter().zip(grads) {
            let Some(g) = g else { continue };
            let n = g.len();
            let (m, v, t) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n], 0));
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            p.update_values(|w| {
                for i in 0..n {
                    let gi = g[i] * factor;
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    w[i] -= lr * mh / (vh.sqrt() + eps);
                }
            });
            p.zero_grad();
        }
        norm
    }
}

pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let x = Tensor::param(vec![3.0, -2.0], &[2]).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            x.square().sum().backward().unwrap();
            opt.step(&[x.clone()]);
        }
        assert!(x.values().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let x = Tensor::param(vec![1.5], &[1]).unwrap();
        let mut opt = Adam::new(0.0);
        x.square().sum().backward().unwrap();
        opt.step(&[x.clone()]);
        assert_eq!(x.item(), 1.5);
        assert!(x.grad().is_none());
    }
}
