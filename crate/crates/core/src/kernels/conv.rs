//! Direct 2-d cross-correlation and its adjoints.
//!
//! The transposed convolution is the input-adjoint of `conv2d`, so the same
//! three kernels serve both layer types.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Spatial output extent of a convolution: `floor((n + 2p - k) / s) + 1`.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("convolution stride must be >= 1"));
    }
    if n + 2 * pad < k {
        return Err(Error::shape(format!(
            "kernel {k} larger than padded input {}",
            n + 2 * pad
        )));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// Output extent of a transposed convolution: `(n - 1) * s - 2p + k`.
pub fn conv_transpose_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || n == 0 {
        return Err(Error::shape("transposed convolution needs stride >= 1 and n >= 1"));
    }
    let full = (n - 1) * stride + k;
    if full <= 2 * pad {
        return Err(Error::shape("transposed convolution output would be empty"));
    }
    Ok(full - 2 * pad)
}

/// Range of output columns `o` for which `o * stride + k_off - pad` lands in `[0, in_len)`.
#[inline]
fn valid_cols(out_len: usize, in_len: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad <= k_off {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k_off) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

struct Geometry {
    n: usize,
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn geometry<T: Real>(
    x_shape: (usize, usize, usize, usize),
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    let (n, ic, h, w) = x_shape;
    let (oc, wic, kh, kw) = weight.dims4()?;
    if wic != ic {
        return Err(Error::shape(format!(
            "conv2d: input has {ic} channels but weights expect {wic}"
        )));
    }
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    Ok(Geometry {
        n,
        ic,
        h,
        w,
        oc,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Cross-correlation of `x (n, ic, h, w)` with `weight (oc, ic, kh, kw)`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x.dims4()?, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.oc] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} does not match {} output channels",
                b.shape(),
                g.oc
            )));
        }
    }
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); g.n * g.oc * g.oh * g.ow];
    out.par_chunks_mut(g.ow)
        .with_min_len(16)
        .enumerate()
        .for_each(|(row, dst)| {
            let oy = row % g.oh;
            let nc = row / g.oh;
            let (ni, o) = (nc / g.oc, nc % g.oc);
            if let Some(b) = bias {
                dst.fill(b.data()[o]);
            }
            for c in 0..g.ic {
                let plane = &xd[(ni * g.ic + c) * g.h * g.w..][..g.h * g.w];
                let wbase = (o * g.ic + c) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    for kx in 0..g.kw {
                        let wv = wd[wbase + ky * g.kw + kx];
                        let (lo, hi) = valid_cols(g.ow, g.w, kx, stride, pad);
                        if stride == 1 {
                            let off = lo + kx - pad;
                            for (d, &s) in dst[lo..hi].iter_mut().zip(&src[off..off + hi - lo]) {
                                *d = *d + wv * s;
                            }
                        } else {
                            for ox in lo..hi {
                                dst[ox] = dst[ox] + wv * src[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(&[g.n, g.oc, g.oh, g.ow], out)
}

/// Gradient of `conv2d` with respect to its input, shaped like `x_shape`.
///
/// This is also the forward pass of a transposed convolution whose weight is
/// `(in, out, kh, kw)` in transposed-convolution terms.
pub fn conv2d_backward_input<T: Real>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    x_shape: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x_shape, weight, stride, pad)?;
    if grad_out.shape() != [g.n, g.oc, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv2d backward: gradient shape {:?} does not match output ({}, {}, {}, {})",
            grad_out.shape(),
            g.n,
            g.oc,
            g.oh,
            g.ow
        )));
    }
    let gd = grad_out.data();
    let wd = weight.data();
    let mut gx = vec![T::zero(); g.n * g.ic * g.h * g.w];
    gx.par_chunks_mut(g.w)
        .with_min_len(16)
        .enumerate()
        .for_each(|(row, dst)| {
            let iy = row % g.h;
            let nc = row / g.h;
            let (ni, c) = (nc / g.ic, nc % g.ic);
            for o in 0..g.oc {
                let gplane = &gd[(ni * g.oc + o) * g.oh * g.ow..][..g.oh * g.ow];
                let wbase = (o * g.ic + c) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let t = iy + pad;
                    if t < ky || (t - ky) % stride != 0 {
                        continue;
                    }
                    let oy = (t - ky) / stride;
                    if oy >= g.oh {
                        continue;
                    }
                    let grow = &gplane[oy * g.ow..][..g.ow];
                    for kx in 0..g.kw {
                        let wv = wd[wbase + ky * g.kw + kx];
                        let (lo, hi) = valid_cols(g.ow, g.w, kx, stride, pad);
                        if stride == 1 {
                            let off = lo + kx - pad;
                            for (d, &s) in dst[off..off + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                                *d = *d + wv * s;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * stride + kx - pad;
                                dst[ix] = dst[ix] + wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(&[g.n, g.ic, g.h, g.w], gx)
}

/// Gradient of `conv2d` with respect to its weight.
pub fn conv2d_backward_weight<T: Real>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight_shape: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (oc, ic, kh, kw) = weight_shape;
    let probe = Tensor::<T>::zeros(&[oc, ic, kh, kw]);
    let g = geometry(x.dims4()?, &probe, stride, pad)?;
    if grad_out.shape() != [g.n, g.oc, g.oh, g.ow] {
        return Err(Error::shape("conv2d weight backward: gradient shape mismatch"));
    }
    let gd = grad_out.data();
    let xd = x.data();
    let mut gw = vec![T::zero(); oc * ic * kh * kw];
    gw.par_chunks_mut(kh * kw)
        .enumerate()
        .for_each(|(pair, dst)| {
            let (o, c) = (pair / ic, pair % ic);
            for ni in 0..g.n {
                let gplane = &gd[(ni * g.oc + o) * g.oh * g.ow..][..g.oh * g.ow];
                let plane = &xd[(ni * g.ic + c) * g.h * g.w..][..g.h * g.w];
                for ky in 0..kh {
                    for oy in 0..g.oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let grow = &gplane[oy * g.ow..][..g.ow];
                        for kx in 0..kw {
                            let (lo, hi) = valid_cols(g.ow, g.w, kx, stride, pad);
                            let mut acc = T::zero();
                            for ox in lo..hi {
                                acc = acc + grow[ox] * src[ox * stride + kx - pad];
                            }
                            dst[ky * kw + kx] = dst[ky * kw + kx] + acc;
                        }
                    }
                }
            }
        });
    Tensor::new(&[oc, ic, kh, kw], gw)
}

/// Sum of `grad_out` over batch and space, i.e. the bias gradient.
pub fn conv2d_backward_bias<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = grad_out.dims4()?;
    let gd = grad_out.data();
    let mut gb = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, acc) in gb.iter_mut().enumerate() {
            let s: T = gd[(ni * c + ci) * h * w..][..h * w].iter().copied().sum();
            *acc = *acc + s;
        }
    }
    Tensor::new(&[c], gb)
}

/// Transposed convolution; `weight` is `(in_ch, out_ch, kh, kw)`.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, ic, h, w) = x.dims4()?;
    let (wic, oc, kh, kw) = weight.dims4()?;
    if wic != ic {
        return Err(Error::shape(format!(
            "conv_transpose2d: input has {ic} channels but weights expect {wic}"
        )));
    }
    let oh = conv_transpose_out_extent(h, kh, stride, pad)?;
    let ow = conv_transpose_out_extent(w, kw, stride, pad)?;
    let mut out = conv2d_backward_input(x, weight, (n, oc, oh, ow), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [oc] {
            return Err(Error::shape("conv_transpose2d: bias shape mismatch"));
        }
        let plane = oh * ow;
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = b.data()[i % oc];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Quadruple-loop cross-correlation.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Tensor<f64> {
        let (n, ic, h, wd) = x.dims4().unwrap();
        let (oc, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[n, oc, oh, ow]);
        for ni in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for c in 0..ic {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * ic + c) * kh + ky) * kw + kx]
                                        * x.data()[((ni * ic + c) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((ni * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_sum_to_nine() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::<f32>::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn centered_delta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 1, 5, 6]);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_quadruple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..20 {
            let (s, p, k) = [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 1)][case % 5];
            let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bt = Tensor::new(&[3], b.clone()).unwrap();
            let got = conv2d(&x, &w, Some(&bt), s, p).unwrap();
            let want = conv_oracle(&x, &w, &b, s, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) <= 1e-12, "case {case}");
        }
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_out_extent(64, 3, 2, 1).unwrap(), 32);
        assert_eq!(conv_out_extent(5, 3, 1, 0).unwrap(), 3);
        assert_eq!(conv_out_extent(7, 4, 2, 1).unwrap(), 3);
        assert!(conv_out_extent(2, 5, 1, 1).is_err());
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn adjoint_identity_holds() {
        // <conv(x), y> == <x, conv^T(y)> and likewise for the weight.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(s, p, k) in &[(1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 2)] {
            let x = rand_tensor(&mut rng, &[2, 3, 6, 7]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let y = conv2d(&x, &w, None, s, p).unwrap();
            let gy = rand_tensor(&mut rng, y.shape());
            let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
            let gx = conv2d_backward_input(&gy, &w, x.dims4().unwrap(), s, p).unwrap();
            let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
            let gw = conv2d_backward_weight(&gy, &x, w.dims4().unwrap(), s, p).unwrap();
            let rhs_w: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-10);
        }
    }

    #[test]
    fn transposed_conv_doubles_extent() {
        let x = Tensor::<f32>::full(&[1, 2, 4, 4], 1.0);
        let w = Tensor::<f32>::full(&[2, 3, 4, 4], 0.5);
        let y = conv_transpose2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 8]);
    }
}
