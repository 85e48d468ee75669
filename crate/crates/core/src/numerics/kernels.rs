//! Pure forward kernels. The autodiff graph calls these for its forward
//! values; they are also usable directly on plain tensors.

use super::Tensor;
use crate::error::{Error, Result};

/// Row-major GEMM into `out`: `out = op(a) · op(b) + beta · out`.
pub(crate) fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, out: &mut [f64], beta: f64) {
    let (m, k) = if ta {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let n = if tb { b.rows() } else { b.cols() };
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta {
        (1, a.cols() as isize)
    } else {
        (a.cols() as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols() as isize)
    } else {
        (b.cols() as isize, 1)
    };
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `out`,
    // whose lengths were validated against (m, k, n) by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn product_shape(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<(usize, usize)> {
    let (m, k1) = if ta {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (k2, n) = if tb {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    if k1 != k2 {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dimensions differ: {:?}{} x {:?}{}",
                a.shape(),
                if ta { "^T" } else { "" },
                b.shape(),
                if tb { "^T" } else { "" }
            ),
        ));
    }
    Ok((m, n))
}

/// Matrix product with optional transposition of either operand.
pub fn matmul_t(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let (m, n) = product_shape(a, ta, b, tb)?;
    let mut out = Tensor::zeros(m, n);
    gemm(a, ta, b, tb, out.data_mut(), 0.0);
    out.check_finite("matmul")
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, false, b, false)
}

/// Softmax along `axis` (0: each column sums to one, 1: each row sums to one).
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    match axis {
        1 => {
            if v.cols() == 0 {
                return Err(Error::invalid("softmax over an empty axis"));
            }
            let mut out = v.clone();
            for r in 0..out.rows() {
                softmax_in_place(out.row_slice_mut(r));
            }
            out.check_finite("softmax")
        }
        0 => Ok(softmax(&v.transpose(), 1)?.transpose()),
        _ => Err(Error::invalid(format!("softmax axis {axis} out of range"))),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Per-row layer normalisation statistics: `(mean, 1/sqrt(var + eps))`.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    check_affine(x, gain, bias)?;
    if eps <= 0.0 {
        return Err(Error::invalid("layernorm eps must be positive"));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let (mean, inv) = row_stats(x.row_slice(r), eps);
        for (c, v) in out.row_slice_mut(r).iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain.data()[c] + bias.data()[c];
        }
    }
    out.check_finite("layernorm")
}

pub(crate) fn check_affine(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<()> {
    if gain.shape() != [1, x.cols()] || bias.shape() != [1, x.cols()] {
        return Err(Error::shape(
            "layernorm",
            format!(
                "gain {:?} / bias {:?} for input {:?}",
                gain.shape(),
                bias.shape(),
                x.shape()
            ),
        ));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Scales each row to unit Euclidean norm. Zero rows are an error.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid(format!("cannot normalize zero-norm row {r}")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
