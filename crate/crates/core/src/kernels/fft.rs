//! Real 2-d FFT over the trailing two axes.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the `1 / (h * w)` factor. Spectra keep the non-negative frequencies of the
//! last axis only, `w / 2 + 1` bins.
//!
//! The inverse is defined for any half spectrum as
//! `x = Re(sum_k sum_l c_l X[k, l] e^{+i theta}) / (h w)` with `c_l = 1` on the
//! DC column (and the Nyquist column for even `w`) and `2` elsewhere. For a
//! spectrum produced by [`rfft2`] this is the exact inverse; for arbitrary
//! spectra it is a fixed real-linear map, which is what the adjoints below
//! differentiate.

use num_traits::Zero;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{lit, ComplexSpectrum, Real, Tensor};

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Weight of column `l` when folding a half spectrum back to a real signal.
#[inline]
fn fold_weight(l: usize, w: usize) -> usize {
    if l == 0 || (w % 2 == 0 && l == w / 2) {
        1
    } else {
        2
    }
}

struct Plan2<T: Real> {
    h: usize,
    w: usize,
    rows: Arc<dyn Fft<T>>,
    cols: Arc<dyn Fft<T>>,
}

impl<T: Real> Plan2<T> {
    fn new(h: usize, w: usize, inverse: bool) -> Self {
        let mut planner = FftPlanner::<T>::new();
        let (rows, cols) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        Self { h, w, rows, cols }
    }

    /// Full complex 2-d transform of one `h x w` plane in place.
    fn run(&self, buf: &mut [Complex<T>], col: &mut Vec<Complex<T>>) {
        for row in buf.chunks_exact_mut(self.w) {
            self.rows.process(row);
        }
        col.resize(self.h, Complex::zero());
        for x in 0..self.w {
            for y in 0..self.h {
                col[y] = buf[y * self.w + x];
            }
            self.cols.process(col);
            for y in 0..self.h {
                buf[y * self.w + x] = col[y];
            }
        }
    }
}

fn planes<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("FFT needs spatial extents >= 1"));
    }
    Ok((n, c, h, w))
}

/// Forward real FFT of every `(n, c)` plane.
pub fn rfft2<T: Real>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (n, c, h, w) = planes(x)?;
    let wh = half_width(w);
    let plan = Plan2::<T>::new(h, w, false);
    let mut re = Vec::with_capacity(n * c * h * wh);
    let mut im = Vec::with_capacity(n * c * h * wh);
    let mut buf = vec![Complex::zero(); h * w];
    let mut col = Vec::new();
    for plane in x.data().chunks_exact(h * w) {
        for (b, &v) in buf.iter_mut().zip(plane) {
            *b = Complex::new(v, T::zero());
        }
        plan.run(&mut buf, &mut col);
        for y in 0..h {
            for l in 0..wh {
                let z = buf[y * w + l];
                re.push(z.re);
                im.push(z.im);
            }
        }
    }
    Ok(ComplexSpectrum {
        shape: [n, c, h, wh],
        signal_width: w,
        re,
        im,
    })
}

/// Inverse of [`rfft2`]; `spec.signal_width` selects the output width.
pub fn irfft2<T: Real>(spec: &ComplexSpectrum<T>) -> Result<Tensor<T>> {
    let [n, c, h, wh] = spec.shape;
    let w = spec.signal_width;
    if w == 0 || h == 0 || half_width(w) != wh {
        return Err(Error::shape(format!(
            "irfft2: {wh} frequency bins cannot come from a signal of width {w}"
        )));
    }
    if spec.re.len() != n * c * h * wh || spec.im.len() != spec.re.len() {
        return Err(Error::shape("irfft2: spectrum buffers do not match shape"));
    }
    let plan = Plan2::<T>::new(h, w, true);
    let scale = T::one() / lit::<T>((h * w) as f64);
    let mut out = Vec::with_capacity(n * c * h * w);
    let mut buf = vec![Complex::zero(); h * w];
    let mut col = Vec::new();
    for p in 0..n * c {
        buf.fill(Complex::zero());
        for y in 0..h {
            for l in 0..wh {
                let i = (p * h + y) * wh + l;
                let k = lit::<T>(fold_weight(l, w) as f64);
                buf[y * w + l] = Complex::new(spec.re[i] * k, spec.im[i] * k);
            }
        }
        plan.run(&mut buf, &mut col);
        out.extend(buf.iter().map(|z| z.re * scale));
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Adjoint of [`rfft2`]: maps a gradient on the half spectrum back to the signal.
pub fn rfft2_adjoint<T: Real>(grad: &ComplexSpectrum<T>) -> Result<Tensor<T>> {
    let [n, c, h, wh] = grad.shape;
    let w = grad.signal_width;
    let plan = Plan2::<T>::new(h, w, true);
    let mut out = Vec::with_capacity(n * c * h * w);
    let mut buf = vec![Complex::zero(); h * w];
    let mut col = Vec::new();
    for p in 0..n * c {
        buf.fill(Complex::zero());
        for y in 0..h {
            for l in 0..wh {
                let i = (p * h + y) * wh + l;
                buf[y * w + l] = Complex::new(grad.re[i], grad.im[i]);
            }
        }
        plan.run(&mut buf, &mut col);
        out.extend(buf.iter().map(|z| z.re));
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Adjoint of [`irfft2`]: maps a signal gradient onto the half spectrum.
pub fn irfft2_adjoint<T: Real>(grad: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (_, _, h, w) = planes(grad)?;
    let mut spec = rfft2(grad)?;
    let wh = half_width(w);
    let scale = T::one() / lit::<T>((h * w) as f64);
    for (i, (re, im)) in spec.re.iter_mut().zip(spec.im.iter_mut()).enumerate() {
        let k = lit::<T>(fold_weight(i % wh, w) as f64) * scale;
        *re = *re * k;
        *im = *im * k;
    }
    Ok(spec)
}

/// Spectrum as a real tensor `(n, 2c, h, w/2+1)` with channels interleaved
/// `[re_0, im_0, re_1, im_1, ...]`.
pub fn spectrum_to_stacked<T: Real>(spec: &ComplexSpectrum<T>) -> Tensor<T> {
    let [n, c, h, wh] = spec.shape;
    let plane = h * wh;
    let mut data = Vec::with_capacity(2 * spec.re.len());
    for p in 0..n * c {
        data.extend_from_slice(&spec.re[p * plane..(p + 1) * plane]);
        data.extend_from_slice(&spec.im[p * plane..(p + 1) * plane]);
    }
    Tensor::new(&[n, 2 * c, h, wh], data).expect("stacked spectrum shape")
}

pub fn stacked_to_spectrum<T: Real>(x: &Tensor<T>, signal_width: usize) -> Result<ComplexSpectrum<T>> {
    let (n, c2, h, wh) = x.dims4()?;
    if c2 % 2 != 0 {
        return Err(Error::shape(format!(
            "stacked spectrum needs an even channel count, got {c2}"
        )));
    }
    if half_width(signal_width) != wh {
        return Err(Error::shape(format!(
            "stacked spectrum width {wh} does not match signal width {signal_width}"
        )));
    }
    let c = c2 / 2;
    let plane = h * wh;
    let mut re = Vec::with_capacity(n * c * plane);
    let mut im = Vec::with_capacity(n * c * plane);
    for p in 0..n * c {
        re.extend_from_slice(&x.data()[(2 * p) * plane..(2 * p + 1) * plane]);
        im.extend_from_slice(&x.data()[(2 * p + 1) * plane..(2 * p + 2) * plane]);
    }
    Ok(ComplexSpectrum {
        shape: [n, c, h, wh],
        signal_width,
        re,
        im,
    })
}
