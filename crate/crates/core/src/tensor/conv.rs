// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! Convolutions lowered to matrix products through im2col.

use super::linalg::gemm;
use super::Tensor;
use crate::error::{PaceError, Result};

#[derive(Clone, Copy, Debug)]
struct Geom1d {
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
}

impl Geom1d {
    fn rows(&self) -> usize {
        self.channels * self.kernel
    }

    /// Source position for column `t` and tap `k`, if it lies inside the signal.
    #[inline]
    fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k).checked_sub(self.pad)?;
        (pos < self.len).then_some(pos)
    }
}

fn im2col_1d(x: &[f64], g: Geom1d) -> Vec<f64> {
    let mut cols = vec![0.0; g.rows() * g.out_len];
    for c in 0..g.channels {
        let xc = &x[c * g.len..(c + 1) * g.len];
        for k in 0..g.kernel {
            let row = &mut cols[(c * g.kernel + k) * g.out_len..(c * g.kernel + k + 1) * g.out_len];
            for (t, slot) in row.iter_mut().enumerate() {
                if let Some(p) = g.source(t, k) {
                    *slot = xc[p];
                }
            }
        }
    }
    cols
}

fn col2im_1d(cols: &[f64], g: Geom1d) -> Vec<f64> {
    let mut x = vec![0.0; g.channels * g.len];
    for c in 0..g.channels {
        let xc = &mut x[c * g.len..(c + 1) * g.len];
        for k in 0..g.kernel {
            let row = &cols[(c * g.kernel + k) * g.out_len..(c * g.kernel + k + 1) * g.out_len];
            for (t, &v) in row.iter().enumerate() {
                if let Some(p) = g.source(t, k) {
                    xc[p] += v;
                }
            }
        }
    }
    x
}

fn check_bias(bias: Option<&Tensor>, channels: usize, op: &'static str) -> Result<()> {
    match bias {
        Some(b) if b.numel() != channels => Err(PaceError::Dimension {
            op,
            axis: 0,
            expected: channels,
            found: b.numel(),
        }),
        _ => Ok(()),
    }
}

fn add_channel_bias(out: &mut [f64], bias: Option<&Tensor>, per_channel: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(per_channel).zip(b.values().iter()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn channel_sums(g: &[f64], per_channel: usize) -> Vec<f64> {
    g.chunks(per_channel).map(|c| c.iter().sum()).collect()
}

fn inputs_with_bias(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Vec<Tensor> {
    let mut v = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        v.push(b.clone());
    }
    v
}

/// Cross-correlation of a `C_in × T` signal with `C_out × C_in × K` weights.
///
/// Output length is `floor((T + 2·padding − K) / stride) + 1`.
pub fn conv1d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [c_in, len] = *input.shape() else {
        return Err(PaceError::contract(format!(
            "conv1d expects a C×T input, got {:?}",
            input.shape()
        )));
    };
    let [c_out, w_in, kernel] = *weight.shape() else {
        return Err(PaceError::contract(format!(
            "conv1d expects C_out×C_in×K weights, got {:?}",
            weight.shape()
        )));
    };
    if w_in != c_in {
        return Err(PaceError::Dimension {
            op: "conv1d",
            axis: 0,
            expected: w_in,
            found: c_in,
        });
    }
    if stride == 0 || len + 2 * padding < kernel {
        return Err(PaceError::Dimension {
            op: "conv1d",
            axis: 1,
            expected: kernel.saturating_sub(2 * padding).max(1),
            found: len,
        });
    }
    check_bias(bias, c_out, "conv1d bias")?;
    let out_len = (len + 2 * padding - kernel) / stride + 1;
    let g = Geom1d {
        channels: c_in,
        len,
        kernel,
        stride,
        pad: padding,
        out_len,
    };

    let cols = im2col_1d(&input.values(), g);
    let mut out = vec![0.0; c_out * out_len];
    gemm(c_out, g.rows(), out_len, &weight.values(), false, &cols, false, &mut out, 0.0);
    drop(cols);
    add_channel_bias(&mut out, bias, out_len);

    Ok(Tensor::from_op(
        out,
        &[c_out, out_len],
        inputs_with_bias(input, weight, bias),
        move |inputs, _, grad| {
            let gx = inputs[0].requires_grad().then(|| {
                let mut dcols = vec![0.0; g.rows() * out_len];
                gemm(g.rows(), c_out, out_len, &inputs[1].values(), true, grad, false, &mut dcols, 0.0);
                col2im_1d(&dcols, g)
            });
            let gw = inputs[1].requires_grad().then(|| {
                let cols = im2col_1d(&inputs[0].values(), g);
                let mut gw = vec![0.0; c_out * g.rows()];
                gemm(c_out, out_len, g.rows(), grad, false, &cols, true, &mut gw, 0.0);
                gw
            });
            let mut grads = vec![gx, gw];
            if inputs.len() == 3 {
                grads.push(inputs[2].requires_grad().then(|| channel_sums(grad, out_len)));
            }
            grads
        },
    ))
}

/// Transposed convolution of a `C_in × T` signal with `C_in × C_out × K`
/// weights, producing exactly `C_out × (T·stride)`.
///
/// The untrimmed output would span `(T − 1)·stride + K` samples; `padding`
/// samples are dropped from the front and whatever remains past `T·stride`
/// from the tail. With the same weight tensor, stride and padding this is the
/// adjoint of [`conv1d`] whenever `K = stride + 2·padding`.
pub fn conv_transpose1d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [c_in, len] = *input.shape() else {
        return Err(PaceError::contract(format!(
            "conv_transpose1d expects a C×T input, got {:?}",
            input.shape()
        )));
    };
    let [w_in, c_out, kernel] = *weight.shape() else {
        return Err(PaceError::contract(format!(
            "conv_transpose1d expects C_in×C_out×K weights, got {:?}",
            weight.shape()
        )));
    };
    if w_in != c_in {
        return Err(PaceError::Dimension {
            op: "conv_transpose1d",
            axis: 0,
            expected: w_in,
            found: c_in,
        });
    }
    if stride == 0 || len == 0 {
        return Err(PaceError::Dimension {
            op: "conv_transpose1d",
            axis: 1,
            expected: 1,
            found: len,
        });
    }
    check_bias(bias, c_out, "conv_transpose1d bias")?;
    let out_len = len * stride;
    // The output plays the role of the conv1d input in this geometry.
    let g = Geom1d {
        channels: c_out,
        len: out_len,
        kernel,
        stride,
        pad: padding,
        out_len: len,
    };

    let mut cols = vec![0.0; g.rows() * len];
    gemm(g.rows(), c_in, len, &weight.values(), true, &input.values(), false, &mut cols, 0.0);
    let mut out = col2im_1d(&cols, g);
    drop(cols);
    add_channel_bias(&mut out, bias, out_len);

    Ok(Tensor::from_op(
        out,
        &[c_out, out_len],
        inputs_with_bias(input, weight, bias),
        move |inputs, _, grad| {
            let dcols = im2col_1d(grad, g);
            let gx = inputs[0].requires_grad().then(|| {
                let mut gx = vec![0.0; c_in * len];
                gemm(c_in, g.rows(), len, &inputs[1].values(), false, &dcols, false, &mut gx, 0.0);
                gx
            });
            let gw = inputs[1].requires_grad().then(|| {
                let mut gw = vec![0.0; c_in * g.rows()];
                gemm(c_in, len, g.rows(), &inputs[0].values(), false, &dcols, true, &mut gw, 0.0);
                gw
            });
            let mut grads = vec![gx, gw];
            if inputs.len() == 3 {
                grads.push(inputs[2].requires_grad().then(|| channel_sums(grad, out_len)));
            }
            grads
        },
    ))
}

/// Stride and zero padding of a 2-D convolution, per (height, width) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct Geom2d {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geom2d {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(column index, source index)` for every in-bounds tap.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for c in 0..self.channels {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    for oy in 0..self.oh {
                        let Some(y) = (oy * self.sh + i).checked_sub(self.ph).filter(|&y| y < self.h)
                        else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            let Some(x) =
                                (ox * self.sw + j).checked_sub(self.pw).filter(|&x| x < self.w)
                            else {
                                continue;
                            };
                            f(row * self.cols() + oy * self.ow + ox, (c * self.h + y) * self.w + x);
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a `C_in × H × W` input with `C_out × C_in × kh × kw` weights.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geometry: Conv2dGeometry,
) -> Result<Tensor> {
    let [c_in, h, w] = *input.shape() else {
        return Err(PaceError::contract(format!(
            "conv2d expects a C×H×W input, got {:?}",
            input.shape()
        )));
    };
    let [c_out, w_in, kh, kw] = *weight.shape() else {
        return Err(PaceError::contract(format!(
            "conv2d expects C_out×C_in×kh×kw weights, got {:?}",
            weight.shape()
        )));
    };
    if w_in != c_in {
        return Err(PaceError::Dimension {
            op: "conv2d",
            axis: 0,
            expected: w_in,
            found: c_in,
        });
    }
    let Conv2dGeometry {
        stride: (sh, sw),
        padding: (ph, pw),
    } = geometry;
    if sh == 0 || h + 2 * ph < kh {
        return Err(PaceError::Dimension {
            op: "conv2d",
            axis: 1,
            expected: kh,
            found: h,
        });
    }
    if sw == 0 || w + 2 * pw < kw {
        return Err(PaceError::Dimension {
            op: "conv2d",
            axis: 2,
            expected: kw,
            found: w,
        });
    }
    check_bias(bias, c_out, "conv2d bias")?;
    let g = Geom2d {
        channels: c_in,
        h,
        w,
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
        oh: (h + 2 * ph - kh) / sh + 1,
        ow: (w + 2 * pw - kw) / sw + 1,
    };

    let im2col = move |x: &[f64]| {
        let mut cols = vec![0.0; g.rows() * g.cols()];
        g.for_each(|dst, src| cols[dst] = x[src]);
        cols
    };
    let col2im = move |cols: &[f64]| {
        let mut x = vec![0.0; g.channels * g.h * g.w];
        g.for_each(|dst, src| x[src] += cols[dst]);
        x
    };

    let cols = im2col(&input.values());
    let mut out = vec![0.0; c_out * g.cols()];
    gemm(c_out, g.rows(), g.cols(), &weight.values(), false, &cols, false, &mut out, 0.0);
    drop(cols);
    add_channel_bias(&mut out, bias, g.cols());

    Ok(Tensor::from_op(
        out,
        &[c_out, g.oh, g.ow],
        inputs_with_bias(input, weight, bias),
        move |inputs, _, grad| {
            let gx = inputs[0].requires_grad().then(|| {
                let mut dcols = vec![0.0; g.rows() * g.cols()];
                gemm(g.rows(), c_out, g.cols(), &inputs[1].values(), true, grad, false, &mut dcols, 0.0);
                col2im(&dcols)
            });
            let gw = inputs[1].requires_grad().then(|| {
                let cols = im2col(&inputs[0].values());
                let mut gw = vec![0.0; c_out * g.rows()];
                gemm(c_out, g.cols(), g.rows(), grad, false, &cols, true, &mut gw, 0.0);
                gw
            });
            let mut grads = vec![gx, gw];
            if inputs.len() == 3 {
                grads.push(inputs[2].requires_grad().then(|| channel_sums(grad, g.cols())));
            }
            grads
        },
    ))
}
