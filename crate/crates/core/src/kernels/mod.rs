//! Forward kernels and their hand-written adjoints.
//!
//! Everything here is a pure function over [`Tensor`]s; the autodiff graph
//! in [`crate::autodiff`] strings them together.

pub mod conv;
pub mod fft;
pub mod resample;

pub use conv::{conv2d, conv_out_extent, conv_transpose2d};
pub use fft::{irfft2, rfft2};
pub use resample::{downsample_mask_max, resample_bilinear, resample_nearest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

/// `y = x W^T + b` for `x (rows, in)`, `W (out, in)`, `b (out)`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, inp) = dims2(x)?;
    let (out, win) = dims2(w)?;
    if inp != win {
        return Err(Error::shape(format!(
            "linear: input width {inp} does not match weight in-dim {win}"
        )));
    }
    if let Some(b) = b {
        if b.shape() != [out] {
            return Err(Error::shape(format!(
                "linear: bias shape {:?} does not match out-dim {out}",
                b.shape()
            )));
        }
    }
    let mut y = Vec::with_capacity(rows * out);
    for r in x.data().chunks_exact(inp) {
        for (o, wr) in w.data().chunks_exact(inp).enumerate() {
            let base = b.map_or(T::zero(), |b| b.data()[o]);
            y.push(base + dot(wr, r));
        }
    }
    Tensor::new(&[rows, out], y)
}

pub(crate) fn dims2<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::shape(format!("expected a 2-d tensor, got shape {s:?}"))),
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] = acc[j] + x[j] * y[j];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu => {
                if v > T::zero() {
                    v
                } else {
                    v * lit(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn grad_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if y > T::zero() {
                    T::one()
                } else {
                    lit(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Which elements share normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per channel over batch and space.
    Batch,
    /// Per sample and channel over space.
    Instance,
}

pub const NORM_EPS: f64 = 1e-5;

/// Saved forward state of a training-mode normalization.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

fn norm_groups(kind: NormKind, n: usize, c: usize) -> usize {
    match kind {
        NormKind::Batch => c,
        NormKind::Instance => n * c,
    }
}

#[inline]
fn group_of(kind: NormKind, ni: usize, ci: usize, c: usize) -> usize {
    match kind {
        NormKind::Batch => ci,
        NormKind::Instance => ni * c + ci,
    }
}

/// Normalizes with batch statistics, then applies the per-channel affine map.
/// Also returns per-channel mean and biased variance for running estimates.
#[allow(clippy::type_complexity)]
pub fn normalize_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    kind: NormKind,
) -> Result<(Tensor<T>, NormCache<T>, Vec<T>, Vec<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "norm: affine parameters must have shape [{c}]"
        )));
    }
    let hw = h * w;
    let groups = norm_groups(kind, n, c);
    let count = lit::<T>((n * c * hw / groups) as f64);
    let mut mean = vec![T::zero(); groups];
    let mut var = vec![T::zero(); groups];
    for ni in 0..n {
        for ci in 0..c {
            let g = group_of(kind, ni, ci, c);
            let s: T = x.data()[(ni * c + ci) * hw..][..hw].iter().copied().sum();
            mean[g] = mean[g] + s;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    for ni in 0..n {
        for ci in 0..c {
            let g = group_of(kind, ni, ci, c);
            let m = mean[g];
            let s: T = x.data()[(ni * c + ci) * hw..][..hw]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum();
            var[g] = var[g] + s;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + lit(NORM_EPS)).sqrt())
        .collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for ni in 0..n {
        for ci in 0..c {
            let g = group_of(kind, ni, ci, c);
            let (gm, bt) = (gamma.data()[ci], beta.data()[ci]);
            for &v in &x.data()[(ni * c + ci) * hw..][..hw] {
                let xh = (v - mean[g]) * inv_std[g];
                xhat.push(xh);
                y.push(gm * xh + bt);
            }
        }
    }
    // Channel statistics for running estimates (averaged over instances).
    let (ch_mean, ch_var) = match kind {
        NormKind::Batch => (mean, var),
        NormKind::Instance => {
            let mut cm = vec![T::zero(); c];
            let mut cv = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    cm[ci] = cm[ci] + mean[ni * c + ci] / lit(n as f64);
                    cv[ci] = cv[ci] + var[ni * c + ci] / lit(n as f64);
                }
            }
            (cm, cv)
        }
    };
    Ok((
        Tensor::new(&[n, c, h, w], y)?,
        NormCache { xhat, inv_std },
        ch_mean,
        ch_var,
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn normalize_train_backward<T: Real>(
    grad: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    kind: NormKind,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad.dims4()?;
    let hw = h * w;
    let groups = norm_groups(kind, n, c);
    let m = lit::<T>((n * c * hw / groups) as f64);
    let gd = grad.data();
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    // Per-group sums of dxhat and dxhat * xhat.
    let mut s1 = vec![T::zero(); groups];
    let mut s2 = vec![T::zero(); groups];
    for ni in 0..n {
        for ci in 0..c {
            let g = group_of(kind, ni, ci, c);
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                let dy = gd[i];
                ggamma[ci] = ggamma[ci] + dy * cache.xhat[i];
                gbeta[ci] = gbeta[ci] + dy;
                let dxh = dy * gamma.data()[ci];
                s1[g] = s1[g] + dxh;
                s2[g] = s2[g] + dxh * cache.xhat[i];
            }
        }
    }
    let mut gx = Vec::with_capacity(grad.len());
    for ni in 0..n {
        for ci in 0..c {
            let g = group_of(kind, ni, ci, c);
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                let dxh = gd[i] * gamma.data()[ci];
                gx.push(cache.inv_std[g] / m * (m * dxh - s1[g] - cache.xhat[i] * s2[g]));
            }
        }
    }
    Ok((
        Tensor::new(&[n, c, h, w], gx)?,
        Tensor::new(&[c], ggamma)?,
        Tensor::new(&[c], gbeta)?,
    ))
}
