//! PSNR and SSIM for images with values in `[0, 1]`.
//!
//! Inputs are tensors of identical shape whose last two axes are the image
//! plane; every leading index is treated as a separate channel.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value written to CSV for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn cap_psnr(v: f64) -> f64 {
    v.min(PSNR_CAP)
}

fn planes(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    a.expect_same_shape(b, "metric")?;
    let s = a.shape();
    if s.len() < 2 {
        return Err(Error::shape(format!("metric inputs need an image plane, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((a.len() / (h * w).max(1), h, w))
}

fn mask_plane<'a>(mask: &'a Tensor, h: usize, w: usize) -> Result<&'a [f32]> {
    if mask.len() != h * w {
        return Err(Error::shape(format!("mask {:?} does not match a {h}x{w} plane", mask.shape())));
    }
    Ok(mask.data())
}

/// `10 log10(1 / MSE)`; `+inf` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    planes(a, b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(psnr_from_mse(se / a.len() as f64))
}

/// PSNR with the MSE averaged over hole pixels (mask > 0.5) only.
pub fn psnr_masked(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<f64> {
    let (c, h, w) = planes(a, b)?;
    let m = mask_plane(mask, h, w)?;
    let (mut se, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for (p, &mv) in m.iter().enumerate() {
            if mv > 0.5 {
                let i = ch * h * w + p;
                se += (a.data()[i] as f64 - b.data()[i] as f64).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("masked PSNR of an empty mask".into()));
    }
    Ok(psnr_from_mse(se / n as f64))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Gaussian-weighted local mean; windows are truncated at the border and
/// renormalized.
fn blur(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let pass = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &kv) in k.iter().enumerate() {
                    let d = t as i64 - r;
                    let (sy, sx) = if along_rows { (y as i64, xx as i64 + d) } else { (y as i64 + d, xx as i64) };
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        acc += kv * src[sy as usize * w + sx as usize];
                        norm += kv;
                    }
                }
                out[y * w + xx] = acc / norm;
            }
        }
        out
    };
    pass(&pass(x, true), false)
}

/// Per-pixel SSIM map of one plane.
fn ssim_map(a: &[f32], b: &[f32], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, my) = (blur(&x, h, w, &k), blur(&y, h, w, &k));
    let (sxx, syy, sxy) = (blur(&xx, h, w, &k), blur(&yy, h, w, &k), blur(&xy, h, w, &k));
    (0..h * w)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2))
        })
        .collect()
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5), averaged over
/// pixels and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a == b {
        return Ok(1.0);
    }
    let (c, h, w) = planes(a, b)?;
    let plane = h * w;
    let total: f64 = (0..c)
        .map(|ch| {
            let m = ssim_map(&a.data()[ch * plane..][..plane], &b.data()[ch * plane..][..plane], h, w);
            m.iter().sum::<f64>() / plane as f64
        })
        .sum();
    Ok(total / c as f64)
}

/// SSIM map averaged over hole pixels only.
pub fn ssim_masked(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<f64> {
    let (c, h, w) = planes(a, b)?;
    let m = mask_plane(mask, h, w)?;
    let holes = m.iter().filter(|&&v| v > 0.5).count();
    if holes == 0 {
        return Err(Error::InvalidArgument("masked SSIM of an empty mask".into()));
    }
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let map = ssim_map(&a.data()[ch * plane..][..plane], &b.data()[ch * plane..][..plane], h, w);
        total += map.iter().zip(m).filter(|(_, &mv)| mv > 0.5).map(|(v, _)| v).sum::<f64>() / holes as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_masked: f64,
    pub ssim_masked: f64,
}

impl MetricReport {
    pub fn compute(out: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Self> {
        Ok(Self {
            psnr: psnr(out, gt)?,
            ssim: ssim(out, gt)?,
            psnr_masked: psnr_masked(out, gt, mask)?,
            ssim_masked: ssim_masked(out, gt, mask)?,
        })
    }
}
