// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! Contrastive log-ratio upper bound (CLUB) on the mutual information
//! between frame embeddings and prosody embeddings, with a diagonal
//! Gaussian variational network `q(y | x)`.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{PaceError, Result};
use crate::optim::Adam;
use crate::tensor::{LayerKind, LayerParams, Tensor};

pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClubTarget {
    F0,
    Uv,
}

impl ClubTarget {
    pub fn name(self) -> &'static str {
        match self {
            ClubTarget::F0 => "f0",
            ClubTarget::Uv => "uv",
        }
    }
}

/// Two-layer perceptron `in → hidden → out` with an ELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: LayerParams,
    pub second: LayerParams,
}

impl Mlp {
    pub fn hidden(&self) -> usize {
        self.first.weight.dim(0)
    }

    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: LayerParams::linear(input, hidden, rng),
            second: LayerParams::linear(hidden, output, rng),
        }
    }

    fn forward(&self, x: &Tensor, constant: bool) -> Result<Tensor> {
        let apply = |l: &LayerParams, h: &Tensor| -> Result<Tensor> {
            if constant {
                crate::tensor::linear(h, &l.weight.detach(), l.bias.as_ref().map(Tensor::detach).as_ref())
            } else {
                l.forward(h)
            }
        };
        apply(&self.second, &apply(&self.first, x)?.elu())
    }

    fn parameters(&self) -> Vec<Tensor> {
        let mut v = self.first.parameters();
        v.extend(self.second.parameters());
        v
    }

    fn named_parameters(&self, name: &str) -> Vec<(String, Tensor)> {
        let mut v = self.first.named_parameters(&format!("{name}.0"));
        v.extend(self.second.named_parameters(&format!("{name}.1")));
        v
    }
}

/// Variational network `q(y | x) = N(μ(x), diag(exp s(x)))` with the
/// log-variance clamped to `[−10, 10]`.
#[derive(Clone, Debug)]
pub struct ClubEstimator {
    pub mean_net: Mlp,
    pub logvar_net: Mlp,
    pub target: ClubTarget,
    optimizer: Adam,
}

impl ClubEstimator {
    pub fn new(x_dim: usize, y_dim: usize, hidden: usize, target: ClubTarget, rng: &mut impl Rng) -> Self {
        Self {
            mean_net: Mlp::new(x_dim, hidden, y_dim, rng),
            logvar_net: Mlp::new(x_dim, hidden, y_dim, rng),
            target,
            optimizer: Adam::new(1e-4),
        }
    }

    /// An estimator whose output ignores `x`: all weights zero, output
    /// biases set to `mu` and `logvar`.
    pub fn constant(x_dim: usize, hidden: usize, mu: &[f64], logvar: &[f64], target: ClubTarget) -> Self {
        let net = |out_bias: &[f64]| {
            let y_dim = out_bias.len();
            let lin = |i: usize, o: usize, b: Vec<f64>| {
                LayerParams::from_tensors(
                    LayerKind::Linear,
                    Tensor::param(vec![0.0; i * o], &[o, i]).expect("shape"),
                    Some(Tensor::param(b, &[o]).expect("shape")),
                    1,
                    0,
                )
                .expect("valid layout")
            };
            Mlp {
                first: lin(x_dim, hidden, vec![0.0; hidden]),
                second: lin(hidden, y_dim, out_bias.to_vec()),
            }
        };
        Self {
            mean_net: net(mu),
            logvar_net: net(logvar),
            target,
            optimizer: Adam::new(1e-4),
        }
    }

    /// `(μ, s)` for each row of `x`. With `constant`, the estimator's
    /// parameters are cut from the graph.
    pub fn moments(&self, x: &Tensor, constant: bool) -> Result<(Tensor, Tensor)> {
        let mu = self.mean_net.forward(x, constant)?;
        let s = self.logvar_net.forward(x, constant)?.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
        Ok((mu, s))
    }

    /// Mean negative log-likelihood per dimension, `−(1/(N·D)) Σ log q(yᵢ|xᵢ)`.
    pub fn nll(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let (mu, s) = self.moments(x, false)?;
        let diff = y.detach().sub(&mu)?;
        let term = diff.square().mul(&s.neg().exp())?.add(&s)?;
        Ok(term.mean().scale(0.5).add_scalar(0.5 * (2.0 * PI).ln()))
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut v = self.mean_net.parameters();
        v.extend(self.logvar_net.parameters());
        v
    }

    pub fn named_parameters(&self, name: &str) -> Vec<(String, Tensor)> {
        let mut v = self.mean_net.named_parameters(&format!("{name}.mean"));
        v.extend(self.logvar_net.named_parameters(&format!("{name}.logvar")));
        v
    }
}

fn check_batch(x: &Tensor, y: &Tensor, group: usize) -> Result<(usize, usize)> {
    let (n, _) = x.as_matrix("club_bound")?;
    let (ny, d) = y.as_matrix("club_bound")?;
    if n != ny {
        return Err(PaceError::Dimension {
            op: "club_bound",
            axis: 0,
            expected: n,
            found: ny,
        });
    }
    if group < 2 {
        return Err(PaceError::contract("the contrastive term needs at least two samples per group"));
    }
    if n == 0 || n % group != 0 {
        return Err(PaceError::contract(format!(
            "batch of {n} rows does not split into groups of {group}"
        )));
    }
    Ok((n, d))
}

/// CLUB bound over all pairs within consecutive groups of `group` rows,
/// averaged over groups:
///
/// `(1/G²) Σᵢ Σⱼ [log q(yᵢ|xᵢ) − log q(yⱼ|xᵢ)]` per group.
///
/// The gradient reaches `x` only; `y` and the estimator are constants.
pub fn club_bound_grouped(x: &Tensor, y: &Tensor, est: &ClubEstimator, group: usize) -> Result<Tensor> {
    let (n, d) = check_batch(x, y, group)?;
    let (mu, s) = est.moments(x, true)?;
    let yv = y.to_vec();
    let groups = n / group;
    let value = {
        let (m, sv) = (mu.values(), s.values());
        let c: Vec<f64> = sv.iter().map(|s| 0.5 * (-s).exp()).collect();
        let mut total = 0.0;
        for g in 0..groups {
            let base = g * group;
            let mut acc = 0.0;
            for i in base..base + group {
                for j in i + 1..base + group {
                    for k in 0..d {
                        let (ik, jk) = (i * d + k, j * d + k);
                        let q_ij = (yv[jk] - m[ik]).powi(2);
                        let q_ii = (yv[ik] - m[ik]).powi(2);
                        let q_ji = (yv[ik] - m[jk]).powi(2);
                        let q_jj = (yv[jk] - m[jk]).powi(2);
                        acc += c[ik] * (q_ij - q_ii) + c[jk] * (q_ji - q_jj);
                    }
                }
            }
            total += acc / (group * group) as f64;
        }
        total / groups as f64
    };
    Ok(Tensor::from_op(vec![value], &[1], vec![mu, s], move |inputs, _, g| {
        let m = inputs[0].values();
        let sv = inputs[1].values();
        let scale = g[0] / groups as f64 / group as f64;
        let mut gm = vec![0.0; n * d];
        let mut gs = vec![0.0; n * d];
        for gi in 0..groups {
            let base = gi * group;
            for k in 0..d {
                let col = |i: usize| yv[i * d + k];
                let mean = (base..base + group).map(col).sum::<f64>() / group as f64;
                let var = (base..base + group).map(|i| (col(i) - mean).powi(2)).sum::<f64>() / group as f64;
                for i in base..base + group {
                    let ik = i * d + k;
                    let c = 0.5 * (-sv[ik]).exp();
                    gm[ik] = scale * 2.0 * c * (yv[ik] - mean);
                    let t = var + (mean - m[ik]).powi(2) - (yv[ik] - m[ik]).powi(2);
                    gs[ik] = -scale * c * t;
                }
            }
        }
        vec![Some(gm), Some(gs)]
    }))
}

/// CLUB bound with every pair in the batch as a negative.
pub fn club_bound(x: &Tensor, y: &Tensor, est: &ClubEstimator) -> Result<Tensor> {
    club_bound_grouped(x, y, est, x.dim(0))
}

/// One Adam step on the estimator, maximizing the paired log-likelihood.
/// Returns the per-dimension negative log-likelihood before the step.
pub fn fit_q_step(x: &Tensor, y: &Tensor, est: &mut ClubEstimator, lr: f64) -> Result<f64> {
    let nll = est.nll(&x.detach(), &y.detach())?;
    let value = nll.item();
    let params = est.parameters();
    for p in &params {
        p.zero_grad();
    }
    nll.backward()?;
    est.optimizer.lr = lr;
    est.optimizer.step(&params);
    Ok(value)
}

#[derive(Clone, Debug)]
pub struct MiTerms {
    pub f0: Tensor,
    pub uv: Tensor,
    pub total: Tensor,
}

/// `L_MI = bound(e^f, e^{f0}) + bound(e^f, e^{uv})`, pairs taken within
/// consecutive groups of `group` rows.
pub fn mi_loss_grouped(
    e_f: &Tensor,
    e_f0: &Tensor,
    e_uv: &Tensor,
    f0_est: &ClubEstimator,
    uv_est: &ClubEstimator,
    group: usize,
) -> Result<MiTerms> {
    let f0 = club_bound_grouped(e_f, e_f0, f0_est, group)?;
    let uv = club_bound_grouped(e_f, e_uv, uv_est, group)?;
    let total = f0.add(&uv)?;
    Ok(MiTerms { f0, uv, total })
}

pub fn mi_loss(
    e_f: &Tensor,
    e_f0: &Tensor,
    e_uv: &Tensor,
    f0_est: &ClubEstimator,
    uv_est: &ClubEstimator,
) -> Result<MiTerms> {
    mi_loss_grouped(e_f, e_f0, e_uv, f0_est, uv_est, e_f.dim(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new((0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(), &[rows, cols]).unwrap()
    }

    #[test]
    fn constant_estimator_gives_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let est = ClubEstimator::constant(3, 4, &[0.3, -0.1], &[0.5, -2.0], ClubTarget::F0);
        let x = random(&mut rng, 17, 3);
        let y = random(&mut rng, 17, 2);
        assert_eq!(club_bound(&x, &y, &est).unwrap().item(), 0.0);
    }

    #[test]
    fn identical_targets_give_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let est = ClubEstimator::new(3, 2, 8, ClubTarget::Uv, &mut rng);
        let x = random(&mut rng, 12, 3);
        let y = Tensor::new([0.4, -0.7].repeat(12), &[12, 2]).unwrap();
        assert_eq!(club_bound(&x, &y, &est).unwrap().item(), 0.0);
    }

    #[test]
    fn matches_direct_log_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let est = ClubEstimator::new(2, 3, 5, ClubTarget::F0, &mut rng);
        let x = random(&mut rng, 6, 2);
        let y = random(&mut rng, 6, 3);
        let (mu, s) = est.moments(&x, true).unwrap();
        let (m, sv, yv) = (mu.to_vec(), s.to_vec(), y.to_vec());
        let logq = |i: usize, j: usize| -> f64 {
            (0..3)
                .map(|k| {
                    let (mk, sk) = (m[i * 3 + k], sv[i * 3 + k]);
                    -0.5 * ((yv[j * 3 + k] - mk).powi(2) * (-sk).exp() + sk + (2.0 * PI).ln())
                })
                .sum()
        };
        let mut direct = 0.0;
        for i in 0..6 {
            let neg: f64 = (0..6).map(|j| logq(i, j)).sum::<f64>() / 6.0;
            direct += logq(i, i) - neg;
        }
        direct /= 6.0;
        let got = club_bound(&x, &y, &est).unwrap().item();
        assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");
    }

    #[test]
    fn bound_leaves_estimator_gradients_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let est = ClubEstimator::new(2, 2, 4, ClubTarget::F0, &mut rng);
        let x = Tensor::param(random(&mut rng, 8, 2).to_vec(), &[8, 2]).unwrap();
        let y = random(&mut rng, 8, 2);
        club_bound(&x, &y, &est).unwrap().backward().unwrap();
        assert!(x.grad().is_some());
        assert!(est.parameters().iter().all(|p| p.grad().is_none()));
    }

    #[test]
    fn fit_step_leaves_inputs_alone_and_zero_rate_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut est = ClubEstimator::new(2, 2, 4, ClubTarget::F0, &mut rng);
        let x = Tensor::param(random(&mut rng, 8, 2).to_vec(), &[8, 2]).unwrap();
        let y = random(&mut rng, 8, 2);
        let before: Vec<Vec<f64>> = est.parameters().iter().map(Tensor::to_vec).collect();
        let a = fit_q_step(&x, &y, &mut est, 0.0).unwrap();
        let after: Vec<Vec<f64>> = est.parameters().iter().map(Tensor::to_vec).collect();
        assert_eq!(before, after);
        assert_eq!(a, est.nll(&x, &y).unwrap().item());
        assert!(x.grad().is_none());
    }

    #[test]
    fn single_sample_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let est = ClubEstimator::new(2, 2, 4, ClubTarget::F0, &mut rng);
        let x = random(&mut rng, 1, 2);
        assert!(matches!(club_bound(&x, &x, &est), Err(PaceError::Contract(_))));
    }

    #[test]
    fn mi_loss_is_the_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let f = ClubEstimator::new(3, 2, 4, ClubTarget::F0, &mut rng);
        let u = ClubEstimator::new(3, 2, 4, ClubTarget::Uv, &mut rng);
        let x = random(&mut rng, 8, 3);
        let a = random(&mut rng, 8, 2);
        let b = random(&mut rng, 8, 2);
        let terms = mi_loss(&x, &a, &b, &f, &u).unwrap();
        assert_eq!(terms.total.item(), terms.f0.item() + terms.uv.item());
    }
}
