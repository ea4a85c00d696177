use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

/// Source index of output cell `o` under floor mapping `o * src / dst`.
#[inline]
pub fn nearest_index(o: usize, src: usize, dst: usize) -> usize {
    o * src / dst
}

/// Nearest-neighbour resampling of `(n, c, h, w)` to `(n, c, out_h, out_w)`.
pub fn resample_nearest<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resample target extents must be >= 1"));
    }
    let cols: Vec<usize> = (0..out_w).map(|ox| nearest_index(ox, w, out_w)).collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..out_h {
            let row = &plane[nearest_index(oy, h, out_h) * w..][..w];
            out.extend(cols.iter().map(|&sx| row[sx]));
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

/// Adjoint of [`resample_nearest`]: sums output gradients into their source cells.
pub fn resample_nearest_backward<T: Real>(
    grad: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad.dims4()?;
    let mut out = vec![T::zero(); n * c * in_h * in_w];
    for (p, plane) in grad.data().chunks_exact(oh * ow).enumerate() {
        let dst = &mut out[p * in_h * in_w..][..in_h * in_w];
        for oy in 0..oh {
            let sy = nearest_index(oy, in_h, oh);
            for ox in 0..ow {
                let i = sy * in_w + nearest_index(ox, in_w, ow);
                dst[i] = dst[i] + plane[oy * ow + ox];
            }
        }
    }
    Tensor::new(&[n, c, in_h, in_w], out)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
///
/// No antialiasing prefilter: cost depends only on the output size.
pub fn resample_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resample target extents must be >= 1"));
    }
    let taps = |o: usize, src: usize, dst: usize| -> (usize, usize, T) {
        let pos = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, lit(pos - i0 as f64))
    };
    let ys: Vec<_> = (0..out_h).map(|o| taps(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| taps(o, w, out_w)).collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let a = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let b = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(a * (T::one() - fy) + b * fy);
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

/// Conservative (max) downsampling of a binary mask: an output cell is set
/// when any source pixel it overlaps is set. Works for up- and down-scaling.
pub fn downsample_mask_max<T: Real>(mask: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = mask.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("mask target extents must be >= 1"));
    }
    let span = |o: usize, src: usize, dst: usize| {
        let lo = o * src / dst;
        let hi = ((o + 1) * src).div_ceil(dst).clamp(lo + 1, src);
        (lo, hi)
    };
    let ys: Vec<_> = (0..out_h).map(|o| span(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| span(o, w, out_w)).collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in mask.data().chunks_exact(h * w) {
        // Column-reduce each source row once, then combine rows per output row.
        let mut row_hits = vec![false; h * out_w];
        for y in 0..h {
            let row = &plane[y * w..][..w];
            for (ox, &(lo, hi)) in xs.iter().enumerate() {
                row_hits[y * out_w + ox] = row[lo..hi].iter().any(|&v| v > T::zero());
            }
        }
        for &(lo, hi) in &ys {
            for ox in 0..out_w {
                let hit = (lo..hi).any(|y| row_hits[y * out_w + ox]);
                out.push(if hit { T::one() } else { T::zero() });
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}
