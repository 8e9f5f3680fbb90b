// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use super::Tensor;
use crate::error::{PaceError, Result};

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. With `trans_a`, `a` is stored as `k × m`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
    assert_eq!(c.len(), m * n, "gemm: output buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee that every (row, col) index reachable
    // through these strides stays inside the three slices, and `c` is
    // uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `m × k` and `k × n` tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix("matmul")?;
    let (k2, n) = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(PaceError::Dimension {
            op: "matmul",
            axis: 0,
            expected: k,
            found: k2,
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.values(), false, &b.values(), false, &mut out, 0.0);
    Ok(Tensor::from_op(out, &[m, n], vec![a.clone(), b.clone()], move |inputs, _, g| {
        let av = inputs[0].values();
        let bv = inputs[1].values();
        let ga = inputs[0].requires_grad().then(|| {
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, g, false, &bv, true, &mut ga, 0.0);
            ga
        });
        let gb = inputs[1].requires_grad().then(|| {
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, &av, true, g, false, &mut gb, 0.0);
            gb
        });
        vec![ga, gb]
    }))
}

/// Affine map `x · Wᵀ + b` applied to each row of an `N × in` input.
/// A rank-1 input is treated as a single row and the output keeps rank 1.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (out_f, in_f) = weight.as_matrix("linear")?;
    let (rows, cols, rank1) = match x.shape() {
        [c] => (1, *c, true),
        [r, c] => (*r, *c, false),
        other => {
            return Err(PaceError::contract(format!(
                "linear expects rank 1 or 2 input, got {other:?}"
            )))
        }
    };
    if cols != in_f {
        return Err(PaceError::Dimension {
            op: "linear",
            axis: x.rank() - 1,
            expected: in_f,
            found: cols,
        });
    }
    if let Some(b) = bias {
        if b.numel() != out_f {
            return Err(PaceError::Dimension {
                op: "linear bias",
                axis: 0,
                expected: out_f,
                found: b.numel(),
            });
        }
    }
    let mut out = vec![0.0; rows * out_f];
    if let Some(b) = bias {
        let bv = b.values();
        for row in out.chunks_mut(out_f) {
            row.copy_from_slice(&bv);
        }
    }
    gemm(rows, in_f, out_f, &x.values(), false, &weight.values(), true, &mut out, 1.0);

    let shape: Vec<usize> = if rank1 { vec![out_f] } else { vec![rows, out_f] };
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(out, &shape, inputs, move |inputs, _, g| {
        let xv = inputs[0].values();
        let wv = inputs[1].values();
        let gx = inputs[0].requires_grad().then(|| {
            let mut gx = vec![0.0; rows * in_f];
            gemm(rows, out_f, in_f, g, false, &wv, false, &mut gx, 0.0);
            gx
        });
        let gw = inputs[1].requires_grad().then(|| {
            let mut gw = vec![0.0; out_f * in_f];
            gemm(out_f, rows, in_f, g, true, &xv, false, &mut gw, 0.0);
            gw
        });
        let mut grads = vec![gx, gw];
        if inputs.len() == 3 {
            let gb = inputs[2].requires_grad().then(|| {
                let mut gb = vec![0.0; out_f];
                for row in g.chunks(out_f) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                gb
            });
            grads.push(gb);
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn linear_matches_hand_computation() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let w = Tensor::new(vec![1.0, 0.0, 1.0, -1.0, 0.5, 0.5], &[3, 2]).unwrap();
        let b = Tensor::new(vec![0.0, 1.0, -1.0], &[3]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[3]);
        assert_eq!(y.to_vec(), vec![1.0, 0.0, 0.5]);
    }
}
