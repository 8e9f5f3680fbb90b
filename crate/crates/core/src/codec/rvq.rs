// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AudioCodes, CodecEmbedding, EmbeddingVariant};
use crate::error::{PaceError, Result};
use crate::tensor::{gemm, Tensor};

/// Codebook training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RvqSettings {
    pub decay: f64,
    /// Weight of the commitment term `‖x − sg(q)‖²`.
    pub commitment_weight: f64,
    /// Entries whose decayed usage count falls below this are reseeded.
    pub dead_threshold: f64,
    /// Usage count given to freshly initialized or reseeded entries.
    pub init_count: f64,
    pub kmeans_iterations: usize,
}

impl Default for RvqSettings {
    fn default() -> Self {
        Self {
            decay: 0.99,
            commitment_weight: 0.25,
            dead_threshold: 1.0,
            init_count: 2.0,
            kmeans_iterations: 8,
        }
    }
}

/// Residual vector quantizer with `stages` codebooks of `size × dim`.
///
/// Entry 0 of every codebook is held at the zero vector, so each stage can
/// always leave the residual unchanged and residual norms never grow.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualVq {
    pub dim: usize,
    pub size: usize,
    pub codebooks: Vec<Vec<f64>>,
    pub ema_counts: Vec<Vec<f64>>,
    pub ema_sums: Vec<Vec<f64>>,
    pub settings: RvqSettings,
    pub initialized: bool,
}

#[derive(Clone, Debug)]
pub struct RvqOutput {
    pub codes: AudioCodes,
    /// Sum of the chosen entries; its gradient passes straight through to
    /// the input embedding.
    pub quantized: CodecEmbedding,
    /// `mean((x − sg(q))²)`, unweighted.
    pub commitment: Tensor,
    /// Per stage, the residual that stage quantized (`frames × dim`).
    pub stage_inputs: Vec<Vec<f64>>,
    /// Per frame, residual norms before stage 0 and after each stage.
    pub residual_norms: Vec<Vec<f64>>,
}

/// Per-entry usage accumulated over a batch before an EMA update.
#[derive(Clone, Debug)]
pub struct RvqStats {
    counts: Vec<Vec<f64>>,
    sums: Vec<Vec<f64>>,
    pool: Vec<Vec<f64>>,
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl ResidualVq {
    /// Codebooks drawn from `N(0, scale²)` with entry 0 zeroed.
    pub fn new(stages: usize, size: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let codebooks = (0..stages)
            .map(|_| {
                let mut cb: Vec<f64> = (0..size * dim)
                    .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                cb[..dim].fill(0.0);
                cb
            })
            .collect();
        let mut vq = Self::from_codebooks(dim, codebooks).expect("consistent sizes");
        vq.initialized = false;
        vq
    }

    /// Wraps explicit codebooks (each `size × dim`, row-major). Entry 0 is
    /// used as given.
    pub fn from_codebooks(dim: usize, codebooks: Vec<Vec<f64>>) -> Result<Self> {
        let first = codebooks
            .first()
            .ok_or_else(|| PaceError::contract("a quantizer needs at least one codebook"))?;
        if dim == 0 || first.len() % dim != 0 || first.is_empty() {
            return Err(PaceError::contract(format!(
                "codebook of {} values does not split into rows of {dim}",
                first.len()
            )));
        }
        let size = first.len() / dim;
        for (i, cb) in codebooks.iter().enumerate() {
            if cb.len() != size * dim {
                return Err(PaceError::contract(format!(
                    "codebook {i} holds {} values, expected {}",
                    cb.len(),
                    size * dim
                )));
            }
        }
        let settings = RvqSettings::default();
        let ema_counts = vec![vec![settings.init_count; size]; codebooks.len()];
        let ema_sums = codebooks
            .iter()
            .map(|cb| cb.iter().map(|v| v * settings.init_count).collect())
            .collect();
        Ok(Self {
            dim,
            size,
            codebooks,
            ema_counts,
            ema_sums,
            settings,
            initialized: true,
        })
    }

    pub fn stages(&self) -> usize {
        self.codebooks.len()
    }

    pub fn entry(&self, stage: usize, index: usize) -> &[f64] {
        &self.codebooks[stage][index * self.dim..(index + 1) * self.dim]
    }

    fn zero_pinned(&self, stage: usize) -> bool {
        self.entry(stage, 0).iter().all(|&v| v == 0.0)
    }

    /// Nearest entry (squared Euclidean, lowest index on ties) for each row.
    pub fn nearest(&self, stage: usize, rows: &[f64]) -> Vec<usize> {
        let d = self.dim;
        let n = rows.len() / d;
        let cb = &self.codebooks[stage];
        let mut dots = vec![0.0; n * self.size];
        gemm(n, d, self.size, rows, false, cb, true, &mut dots, 0.0);
        let norms: Vec<f64> = cb.chunks(d).map(sq_norm).collect();
        let pinned = self.zero_pinned(stage);
        (0..n)
            .map(|i| {
                let row = &rows[i * d..(i + 1) * d];
                let mut best = 0;
                let mut best_score = f64::INFINITY;
                for (k, &nk) in norms.iter().enumerate() {
                    let score = nk - 2.0 * dots[i * self.size + k];
                    if score < best_score {
                        best_score = score;
                        best = k;
                    }
                }
                // Guard against rounding in the expanded distance: never
                // accept an entry that grows the residual when entry 0 is zero.
                if pinned && best != 0 && sq_dist(row, &cb[best * d..(best + 1) * d]) > sq_norm(row) {
                    best = 0;
                }
                best
            })
            .collect()
    }

    /// Greedy residual quantization of `frames × dim` rows.
    pub fn quantize_values(&self, x: &[f64]) -> (Vec<Vec<u16>>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let d = self.dim;
        let frames = x.len() / d;
        let mut residual = x.to_vec();
        let mut quantized = vec![0.0; x.len()];
        let mut codes = vec![Vec::with_capacity(self.stages()); frames];
        let mut norms: Vec<Vec<f64>> = residual.chunks(d).map(|r| vec![sq_norm(r).sqrt()]).collect();
        let mut stage_inputs = Vec::with_capacity(self.stages());
        for s in 0..self.stages() {
            stage_inputs.push(residual.clone());
            let picks = self.nearest(s, &residual);
            for (f, &k) in picks.iter().enumerate() {
                let e = self.entry(s, k);
                for j in 0..d {
                    residual[f * d + j] -= e[j];
                    quantized[f * d + j] += e[j];
                }
                codes[f].push(k as u16);
                norms[f].push(sq_norm(&residual[f * d..(f + 1) * d]).sqrt());
            }
        }
        (codes, quantized, stage_inputs, norms)
    }

    pub fn quantize(&self, emb: &CodecEmbedding) -> Result<RvqOutput> {
        if emb.dim() != self.dim {
            return Err(PaceError::Dimension {
                op: "rvq_quantize",
                axis: 1,
                expected: self.dim,
                found: emb.dim(),
            });
        }
        let x = emb.values.to_vec();
        let (codes, q, stage_inputs, residual_norms) = self.quantize_values(&x);
        let target = Tensor::new(q.clone(), emb.values.shape())?;
        let commitment = emb.values.sub(&target)?.square().mean();
        Ok(RvqOutput {
            codes: AudioCodes {
                stages: self.stages(),
                codes,
            },
            quantized: CodecEmbedding {
                values: emb.values.straight_through(&q)?,
                variant: EmbeddingVariant::Quantized,
            },
            commitment,
            stage_inputs,
            residual_norms,
        })
    }

    /// Sum of the addressed entries per frame.
    pub fn dequantize(&self, codes: &AudioCodes) -> Result<CodecEmbedding> {
        if codes.stages != self.stages() {
            return Err(PaceError::Dimension {
                op: "rvq_dequantize",
                axis: 1,
                expected: self.stages(),
                found: codes.stages,
            });
        }
        let d = self.dim;
        let mut out = vec![0.0; codes.frames() * d];
        for (f, row) in codes.codes.iter().enumerate() {
            if row.len() != self.stages() {
                return Err(PaceError::Dimension {
                    op: "rvq_dequantize",
                    axis: 1,
                    expected: self.stages(),
                    found: row.len(),
                });
            }
            for (s, &k) in row.iter().enumerate() {
                if k as usize >= self.size {
                    return Err(PaceError::Index {
                        op: "rvq_dequantize",
                        position: f * self.stages() + s,
                        value: k as usize,
                        bound: self.size,
                    });
                }
                for (o, e) in out[f * d..(f + 1) * d].iter_mut().zip(self.entry(s, k as usize)) {
                    *o += e;
                }
            }
        }
        Ok(CodecEmbedding {
            values: Tensor::new(out, &[codes.frames(), d])?,
            variant: EmbeddingVariant::Quantized,
        })
    }

    pub fn new_stats(&self) -> RvqStats {
        RvqStats {
            counts: vec![vec![0.0; self.size]; self.stages()],
            sums: vec![vec![0.0; self.size * self.dim]; self.stages()],
            pool: vec![Vec::new(); self.stages()],
        }
    }

    /// Adds one quantization pass to the batch statistics.
    pub fn accumulate(&self, stats: &mut RvqStats, out: &RvqOutput) {
        let d = self.dim;
        for s in 0..self.stages() {
            let inputs = &out.stage_inputs[s];
            for (f, row) in out.codes.codes.iter().enumerate() {
                let k = row[s] as usize;
                stats.counts[s][k] += 1.0;
                for j in 0..d {
                    stats.sums[s][k * d + j] += inputs[f * d + j];
                }
            }
            stats.pool[s].extend_from_slice(inputs);
        }
    }

    /// Exponential-moving-average codebook update with dead-entry reseeding
    /// from the batch residuals. Entry 0 stays at zero.
    pub fn apply_ema(&mut self, stats: &RvqStats, rng: &mut impl Rng) {
        let d = self.dim;
        let g = self.settings.decay;
        for s in 0..self.stages() {
            let pool_rows = stats.pool[s].len() / d;
            for k in 1..self.size {
                let count = g * self.ema_counts[s][k] + stats.counts[s][k];
                self.ema_counts[s][k] = count;
                for j in 0..d {
                    let sum = g * self.ema_sums[s][k * d + j] + stats.sums[s][k * d + j];
                    self.ema_sums[s][k * d + j] = sum;
                }
                if count < self.settings.dead_threshold && pool_rows > 0 {
                    let r = rng.random_range(0..pool_rows);
                    let src = &stats.pool[s][r * d..(r + 1) * d];
                    self.codebooks[s][k * d..(k + 1) * d].copy_from_slice(src);
                    self.ema_counts[s][k] = self.settings.init_count;
                    for j in 0..d {
                        self.ema_sums[s][k * d + j] = src[j] * self.settings.init_count;
                    }
                } else if count > 0.0 {
                    for j in 0..d {
                        self.codebooks[s][k * d + j] = self.ema_sums[s][k * d + j] / count;
                    }
                }
            }
        }
    }

    /// k-means++ seeding and Lloyd refinement on `vectors` (`n × dim`),
    /// stage by stage on the running residual. Entries beyond the number of
    /// distinct vectors are filled with jittered copies of random rows.
    pub fn init_kmeans(&mut self, vectors: &[f64], rng: &mut impl Rng) -> Result<()> {
        let d = self.dim;
        if vectors.is_empty() || vectors.len() % d != 0 {
            return Err(PaceError::contract("k-means initialization needs whole vectors"));
        }
        let n = vectors.len() / d;
        let spread = (sq_norm(vectors) / n as f64).sqrt().max(1e-6) / (d as f64).sqrt();
        let mut residual = vectors.to_vec();
        for s in 0..self.stages() {
            let mut cb = vec![0.0; self.size * d];
            let mut min_d: Vec<f64> = residual.chunks(d).map(sq_norm).collect();
            let mut filled = 1;
            while filled < self.size {
                let total: f64 = min_d.iter().sum();
                if !(total > 1e-300) {
                    break;
                }
                let mut u = rng.random_range(0.0..total);
                let mut pick = n - 1;
                for (i, &w) in min_d.iter().enumerate() {
                    if u < w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                let src = residual[pick * d..(pick + 1) * d].to_vec();
                cb[filled * d..(filled + 1) * d].copy_from_slice(&src);
                for (i, m) in min_d.iter_mut().enumerate() {
                    *m = m.min(sq_dist(&residual[i * d..(i + 1) * d], &src));
                }
                filled += 1;
            }
            let jitter = 0.01 * spread;
            for k in filled..self.size {
                let r = rng.random_range(0..n);
                for j in 0..d {
                    cb[k * d + j] = residual[r * d + j] + jitter * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
            }
            self.codebooks[s] = cb;

            for _ in 0..self.settings.kmeans_iterations {
                let picks = self.nearest(s, &residual);
                let mut sums = vec![0.0; self.size * d];
                let mut counts = vec![0usize; self.size];
                for (i, &k) in picks.iter().enumerate() {
                    counts[k] += 1;
                    for j in 0..d {
                        sums[k * d + j] += residual[i * d + j];
                    }
                }
                for k in 1..self.size {
                    if counts[k] > 0 {
                        for j in 0..d {
                            self.codebooks[s][k * d + j] = sums[k * d + j] / counts[k] as f64;
                        }
                    }
                }
            }

            let picks = self.nearest(s, &residual);
            let mut counts = vec![0.0_f64; self.size];
            for (i, &k) in picks.iter().enumerate() {
                counts[k] += 1.0;
                for j in 0..d {
                    residual[i * d + j] -= self.codebooks[s][k * d + j];
                }
            }
            for k in 0..self.size {
                let c = counts[k].max(self.settings.init_count);
                self.ema_counts[s][k] = c;
                for j in 0..d {
                    self.ema_sums[s][k * d + j] = self.codebooks[s][k * d + j] * c;
                }
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// Number of stages whose codebooks contain a non-finite value.
    pub fn non_finite_stages(&self) -> usize {
        self.codebooks.iter().filter(|cb| cb.iter().any(|v| !v.is_finite())).count()
    }

    /// State as named tensors for checkpointing.
    pub fn named_state(&self, name: &str) -> Vec<(String, Tensor)> {
        let mut v = Vec::with_capacity(3 * self.stages());
        for s in 0..self.stages() {
            let t = |data: &Vec<f64>, shape: &[usize]| Tensor::new(data.clone(), shape).expect("shape");
            v.push((format!("{name}.stage{s}.codebook"), t(&self.codebooks[s], &[self.size, self.dim])));
            v.push((format!("{name}.stage{s}.ema_count"), t(&self.ema_counts[s], &[self.size])));
            v.push((format!("{name}.stage{s}.ema_sum"), t(&self.ema_sums[s], &[self.size, self.dim])));
        }
        v
    }

    /// Restores state written by [`ResidualVq::named_state`].
    pub fn load_state(&mut self, name: &str, lookup: &dyn Fn(&str) -> Option<Vec<f64>>) -> Result<()> {
        for s in 0..self.stages() {
            let fetch = |suffix: &str, len: usize| -> Result<Vec<f64>> {
                let key = format!("{name}.stage{s}.{suffix}");
                let v = lookup(&key).ok_or_else(|| PaceError::Format(format!("checkpoint lacks {key}")))?;
                if v.len() != len {
                    return Err(PaceError::Format(format!(
                        "{key} holds {} values, expected {len}",
                        v.len()
                    )));
                }
                Ok(v)
            };
            self.codebooks[s] = fetch("codebook", self.size * self.dim)?;
            self.ema_counts[s] = fetch("ema_count", self.size)?;
            self.ema_sums[s] = fetch("ema_sum", self.size * self.dim)?;
        }
        self.initialized = true;
        Ok(())
    }
}
