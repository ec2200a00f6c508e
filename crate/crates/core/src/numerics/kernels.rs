//! Row kernels shared by the tape and by the plain tensor functions.
//! Reductions accumulate in f64 and store back in the element type.

use super::{Scalar, Tensor};
use crate::{MtpError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn check_finite<T: Scalar>(op: &'static str, values: &[T]) -> Result<()> {
    // branch-free fold so the scan vectorizes
    let bad = values.iter().fold(false, |acc, v| acc | !v.is_finite());
    if !bad {
        Ok(())
    } else {
        Err(MtpError::NonFinite(op))
    }
}

/// Max-subtracted softmax of one row, computed in f64.
pub(crate) fn softmax_row_f64<T: Scalar>(row: &[T], out: &mut [f64]) {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
    let mut denom = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x.as_f64() - max).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![0.0; cols];
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        softmax_row_f64(row, &mut buf);
        for (d, &p) in dst.iter_mut().zip(&buf) {
            *d = T::from_f64(p);
        }
    }
    out
}

/// Layer norm over rows of length `cols`; returns (y, xhat, rstd).
pub(crate) fn layer_norm_rows<T: Scalar>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / cols as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = T::from_f64(rs);
        for c in 0..cols {
            let xh = (row[c].as_f64() - mean) * rs;
            xhat[r * cols + c] = T::from_f64(xh);
            y[r * cols + c] = T::from_f64(xh * gain[c].as_f64() + bias[c].as_f64());
        }
    }
    (y, xhat, rstd)
}

/// Per-row negative log-likelihoods of `targets` (0 where unmasked) and the
/// softmax probabilities used by the backward pass.
pub(crate) fn cross_entropy_rows<T: Scalar>(
    logits: &[T],
    cols: usize,
    targets: &[usize],
    mask: &[bool],
) -> (Vec<f64>, Vec<T>) {
    let mut losses = vec![0.0; targets.len()];
    let mut probs = vec![T::zero(); logits.len()];
    let mut buf = vec![0.0; cols];
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |a, &x| a.max(x.as_f64()));
        let mut denom = 0.0;
        for (b, &x) in buf.iter_mut().zip(row) {
            *b = (x.as_f64() - max).exp();
            denom += *b;
        }
        losses[r] = denom.ln() - (row[t].as_f64() - max);
        for (c, b) in buf.iter().enumerate() {
            probs[r * cols + c] = T::from_f64(b / denom);
        }
    }
    (losses, probs)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let (k, c, half, one) = gelu_consts::<T>();
    let inner = k * (x + c * x * x * x);
    half * x * (one + tanh(inner))
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let (k, c, half, one) = gelu_consts::<T>();
    let inner = k * (x + c * x * x * x);
    let t = tanh(inner);
    let d_inner = k * (one + T::from_f64(3.0) * c * x * x);
    half * (one + t) + half * x * (one - t * t) * d_inner
}

/// `tanh` through one `exp`, cheaper than the libm routine.
fn tanh<T: Scalar>(x: T) -> T {
    let e = (T::from_f64(-2.0) * x.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if x < T::zero() {
        -t
    } else {
        t
    }
}

fn gelu_consts<T: Scalar>() -> (T, T, T, T) {
    (T::from_f64(GELU_K), T::from_f64(0.044715), T::from_f64(0.5), T::one())
}

/// Softmax along `axis` of a tensor of any rank.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() {
        return Err(MtpError::OutOfRange {
            what: "softmax axis",
            detail: format!("axis {axis} for rank {}", shape.len()),
        });
    }
    check_finite("softmax input", x.data())?;
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let mut lane = vec![T::zero(); n];
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = src[at(j)];
            }
            softmax_row_f64(&lane, &mut buf);
            for (j, &p) in buf.iter().enumerate() {
                out[at(j)] = T::from_f64(p);
            }
        }
    }
    Tensor::new(shape, out)
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let cols = *x.shape().last().expect("tensor rank >= 1");
    if gain.numel() != cols || bias.numel() != cols {
        return Err(MtpError::shape(
            "layer_norm",
            format!(
                "gain/bias lengths {}/{} vs last extent {cols}",
                gain.numel(),
                bias.numel()
            ),
        ));
    }
    check_finite("layer_norm input", x.data())?;
    let (y, _, _) = layer_norm_rows(x.data(), cols, gain.data(), bias.data(), eps);
    check_finite("layer_norm", &y)?;
    Tensor::new(x.shape().to_vec(), y)
}

/// Mean token cross-entropy over masked positions of `[T, V]` logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (rows, cols) = match logits.shape() {
        [r, c] => (*r, *c),
        s => return Err(MtpError::shape("cross_entropy", format!("expected 2-D logits, got {s:?}"))),
    };
    if targets.len() != rows || mask.len() != rows {
        return Err(MtpError::shape(
            "cross_entropy",
            format!("{rows} rows vs {} targets / {} mask", targets.len(), mask.len()),
        ));
    }
    if let Some(&t) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= cols) {
        return Err(MtpError::OutOfRange {
            what: "target id",
            detail: format!("{t} >= {cols}"),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(MtpError::DegenerateBatch("mask selects no positions".into()));
    }
    check_finite("cross_entropy input", logits.data())?;
    let (losses, _) = cross_entropy_rows(logits.data(), cols, targets, mask);
    Ok(losses.iter().sum::<f64>() / count as f64)
}
