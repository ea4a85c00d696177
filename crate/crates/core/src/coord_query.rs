//! Pixel-wise querying network.
//!
//! Every output pixel is decoded by a small MLP whose weights come from the
//! parameter vector of the patch that contains it. The MLP input is a
//! sinusoidal encoding of the pixel position, periodic with the patch size,
//! so a patch's MLP sees the same inputs at every resolution. Only hole
//! pixels need to be decoded.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{dot, Activation};
use crate::param_gen::{generate_parameters, Generator, MaskedImage, ParamMap, UpsampledParams};
use crate::params::ParamStore;
use crate::tensor::{lit, Real, Tensor};

/// Layer sizes and activations of the per-patch MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Frequencies per axis in the positional encoding.
    pub n_freq: usize,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            layer_sizes: vec![4, 32, 32, 32, 3],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Sigmoid,
            n_freq: 1,
        }
    }
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Self {
        let n_freq = layer_sizes.first().map_or(1, |&i| (i / 4).max(1));
        Self {
            layer_sizes,
            n_freq,
            ..Self::default()
        }
    }

    fn check_layout(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::config(format!(
                "MLP needs at least two nonzero layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    /// Full check for use as a pixel decoder.
    pub fn validate(&self) -> Result<()> {
        self.check_layout()?;
        if self.n_freq == 0 || self.layer_sizes[0] != 4 * self.n_freq {
            return Err(Error::config(format!(
                "MLP input width {} must be 4 * n_freq = {}",
                self.layer_sizes[0],
                4 * self.n_freq
            )));
        }
        if *self.layer_sizes.last().unwrap() != 3 {
            return Err(Error::config("MLP output width must be 3"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Scalar multiplications per decoded pixel.
    pub fn mults_per_pixel(&self) -> u64 {
        self.layer_sizes.windows(2).map(|p| (p[0] * p[1]) as u64).sum()
    }

    fn max_width(&self) -> usize {
        self.layer_sizes.iter().copied().max().unwrap_or(0)
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 2 == self.layer_sizes.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// `frac(p / e)`, the position within one period.
#[inline]
fn phase(p: f64, e: f64) -> f64 {
    let t = p / e;
    t - t.floor()
}

#[inline]
fn encode_into<T: Real>(px: f64, py: f64, ex: f64, ey: f64, n_freq: usize, out: &mut [T]) {
    let (tx, ty) = (phase(px, ex), phase(py, ey));
    let mut scale = std::f64::consts::TAU;
    for k in 0..n_freq {
        let (sx, cx) = (scale * tx).sin_cos();
        let (sy, cy) = (scale * ty).sin_cos();
        out[4 * k] = lit(sx);
        out[4 * k + 1] = lit(cx);
        out[4 * k + 2] = lit(sy);
        out[4 * k + 3] = lit(cy);
        scale *= 2.0;
    }
}

/// Sinusoidal encoding of `(p_x, p_y)` with periods `(e_x, e_y)`:
/// `[sin x, cos x, sin y, cos y]` per frequency, the angle doubling each time.
pub fn encode_position(p_x: f64, p_y: f64, e_x: f64, e_y: f64, n_freq: usize) -> Result<Vec<f64>> {
    if !(e_x > 0.0 && e_y > 0.0) {
        return Err(Error::InvalidArgument(format!("intervals must be positive, got ({e_x}, {e_y})")));
    }
    let mut out = vec![0.0; 4 * n_freq];
    encode_into(p_x, p_y, e_x, e_y, n_freq, &mut out);
    Ok(out)
}

/// One unpacked MLP layer: `weight (out, in)` and `bias (out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayer<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Splits a packed parameter vector: per layer, the row-major weight then the bias.
pub fn unpack_mlp<T: Real>(params: &[T], spec: &MlpSpec) -> Result<Vec<MlpLayer<T>>> {
    spec.check_layout()?;
    let expected = spec.num_params();
    if params.len() != expected {
        return Err(Error::ParamLength {
            expected,
            actual: params.len(),
        });
    }
    let mut rest = params;
    let mut layers = Vec::with_capacity(spec.layer_sizes.len() - 1);
    for p in spec.layer_sizes.windows(2) {
        let (w, tail) = rest.split_at(p[0] * p[1]);
        let (b, tail) = tail.split_at(p[1]);
        rest = tail;
        layers.push(MlpLayer {
            weight: Tensor::new(&[p[1], p[0]], w.to_vec())?,
            bias: Tensor::new(&[p[1]], b.to_vec())?,
        });
    }
    Ok(layers)
}

pub fn repack_mlp<T: Real>(layers: &[MlpLayer<T>]) -> Vec<T> {
    layers
        .iter()
        .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
        .collect()
}

/// Reusable buffers for [`eval_mlp`].
struct Scratch<T> {
    enc: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Real> Scratch<T> {
    fn new(spec: &MlpSpec) -> Self {
        let m = spec.max_width();
        Self {
            enc: vec![T::zero(); spec.layer_sizes[0]],
            a: vec![T::zero(); m],
            b: vec![T::zero(); m],
        }
    }
}

/// Evaluates the packed MLP on `input`; returns the multiply count.
#[inline]
fn eval_mlp<T: Real>(spec: &MlpSpec, params: &[T], input: &[T], a: &mut [T], b: &mut [T], out: &mut [T]) -> u64 {
    let n = spec.layer_sizes.len();
    let mut off = 0;
    let mut mults = 0u64;
    a[..input.len()].copy_from_slice(input);
    let (mut cur, mut nxt) = (a, b);
    for l in 0..n - 1 {
        let (ni, no) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let w = &params[off..off + ni * no];
        let bias = &params[off + ni * no..off + ni * no + no];
        off += ni * no + no;
        let act = spec.activation(l);
        let x = &cur[..ni];
        for (j, row) in w.chunks_exact(ni).enumerate() {
            nxt[j] = act.apply(bias[j] + dot(row, x));
        }
        mults += (ni * no) as u64;
        std::mem::swap(&mut cur, &mut nxt);
    }
    out.copy_from_slice(&cur[..out.len()]);
    mults
}

/// Runs the MLP stored in `params` on one input vector.
pub fn mlp_forward<T: Real>(spec: &MlpSpec, params: &[T], input: &[T]) -> Result<Vec<T>> {
    spec.check_layout()?;
    if params.len() != spec.num_params() {
        return Err(Error::ParamLength {
            expected: spec.num_params(),
            actual: params.len(),
        });
    }
    if input.len() != spec.layer_sizes[0] {
        return Err(Error::shape(format!(
            "MLP input has {} values, expected {}",
            input.len(),
            spec.layer_sizes[0]
        )));
    }
    let m = spec.max_width();
    let (mut a, mut b) = (vec![T::zero(); m], vec![T::zero(); m]);
    let mut out = vec![T::zero(); *spec.layer_sizes.last().unwrap()];
    eval_mlp(spec, params, input, &mut a, &mut b, &mut out);
    Ok(out)
}

/// A query position in output pixel units; `x` is the column, `y` the row.
/// Fractional values address sub-pixel positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coord {
    pub y: f64,
    pub x: f64,
}

impl Coord {
    pub fn new(y: f64, x: f64) -> Self {
        Self { y, x }
    }

    pub fn pixel(y: usize, x: usize) -> Self {
        Self {
            y: y as f64,
            x: x as f64,
        }
    }
}

/// Decoded colours plus the number of scalar multiplies spent.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutput {
    pub rgb: Vec<[f32; 3]>,
    pub mults: u64,
}

struct Geometry {
    h: usize,
    w: usize,
    height: f64,
    width: f64,
    ex: f64,
    ey: f64,
}

impl Geometry {
    fn new(h: usize, w: usize, height: usize, width: usize) -> Self {
        Self {
            h,
            w,
            height: height as f64,
            width: width as f64,
            ex: width as f64 / w as f64,
            ey: height as f64 / h as f64,
        }
    }

    #[inline]
    fn patch(&self, c: Coord) -> (usize, usize) {
        let iy = ((c.y * self.h as f64) / self.height).floor() as usize;
        let ix = ((c.x * self.w as f64) / self.width).floor() as usize;
        (iy.min(self.h - 1), ix.min(self.w - 1))
    }
}

#[inline]
fn query_one<T: Real>(
    map: &ParamMap<T>,
    geo: &Geometry,
    spec: &MlpSpec,
    c: Coord,
    s: &mut Scratch<T>,
    out: &mut [T],
) -> u64 {
    let (iy, ix) = geo.patch(c);
    encode_into(c.x, c.y, geo.ex, geo.ey, spec.n_freq, &mut s.enc);
    eval_mlp(spec, map.patch(iy, ix), &s.enc, &mut s.a, &mut s.b, out)
}

/// Decodes the given coordinates. Coordinates are split into `workers`
/// contiguous chunks processed in parallel; the result does not depend on
/// the split.
pub fn query_pixels(view: &UpsampledParams<'_>, coords: &[Coord], spec: &MlpSpec, workers: usize) -> Result<QueryOutput> {
    spec.validate()?;
    if view.map.param_len() != spec.num_params() {
        return Err(Error::ParamLength {
            expected: spec.num_params(),
            actual: view.map.param_len(),
        });
    }
    let (hh, ww) = (view.height as f64, view.width as f64);
    if let Some(c) = coords
        .iter()
        .find(|c| !(c.y >= 0.0 && c.y < hh && c.x >= 0.0 && c.x < ww))
    {
        return Err(Error::CoordOutOfRange {
            y: c.y,
            x: c.x,
            h: view.height,
            w: view.width,
        });
    }
    let geo = Geometry::new(view.map.grid_h(), view.map.grid_w(), view.height, view.width);
    let chunk = coords.len().div_ceil(workers.max(1)).max(1);
    let parts: Vec<(Vec<[f32; 3]>, u64)> = coords
        .par_chunks(chunk)
        .map(|part| {
            let mut s = Scratch::new(spec);
            let mut mults = 0;
            let mut rgb = Vec::with_capacity(part.len());
            let mut px = [0.0f32; 3];
            for &c in part {
                mults += query_one(view.map, &geo, spec, c, &mut s, &mut px);
                rgb.push(px);
            }
            (rgb, mults)
        })
        .collect();
    let mut out = QueryOutput {
        rgb: Vec::with_capacity(coords.len()),
        mults: 0,
    };
    for (rgb, m) in parts {
        out.rgb.extend(rgb);
        out.mults += m;
    }
    Ok(out)
}

/// Decodes every pixel of the view into a `(3, H, W)` image.
pub fn decode_full(view: &UpsampledParams<'_>, spec: &MlpSpec) -> Result<(Tensor, u64)> {
    spec.validate()?;
    let (height, width) = (view.height, view.width);
    let geo = Geometry::new(view.map.grid_h(), view.map.grid_w(), height, width);
    let rows: Vec<(Vec<[f32; 3]>, u64)> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut s = Scratch::new(spec);
            let mut px = [0.0f32; 3];
            let mut mults = 0;
            let row = (0..width)
                .map(|x| {
                    mults += query_one(view.map, &geo, spec, Coord::pixel(y, x), &mut s, &mut px);
                    px
                })
                .collect();
            (row, mults)
        })
        .collect();
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * plane];
    let mut mults = 0;
    for (y, (row, m)) in rows.into_iter().enumerate() {
        mults += m;
        for (x, rgb) in row.into_iter().enumerate() {
            for c in 0..3 {
                data[c * plane + y * width + x] = rgb[c];
            }
        }
    }
    Ok((Tensor::new(&[3, height, width], data)?, mults))
}

/// Decodes a frozen parameter map at an arbitrary resolution.
pub fn decode_at_resolution(map: &ParamMap, height: usize, width: usize, spec: &MlpSpec) -> Result<Tensor> {
    Ok(decode_full(&map.upsampled(height, width)?, spec)?.0)
}

/// Row-major coordinates of every hole pixel in a `(1, H, W)` mask.
pub fn hole_coords(mask: &Tensor) -> Result<Vec<Coord>> {
    let (_, h, w) = mask.dims3()?;
    let mut out = Vec::new();
    for y in 0..h {
        for (x, &v) in mask.data()[y * w..][..w].iter().enumerate() {
            if v > 0.5 {
                out.push(Coord::pixel(y, x));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimings {
    pub paramgen: Duration,
    pub query: Duration,
    pub total: Duration,
}

#[derive(Clone, Debug)]
pub struct InpaintResult {
    /// `(3, H, W)` composite: input outside the hole, decoded inside.
    pub image: Tensor,
    pub decoded_pixels: usize,
    pub mults: u64,
    pub timings: PhaseTimings,
}

/// Full pipeline: generate parameters once, decode only hole pixels, paste back.
pub fn inpaint(gen: &Generator, store: &ParamStore, input: &MaskedImage, workers: usize) -> Result<InpaintResult> {
    let start = Instant::now();
    let coords = hole_coords(&input.mask)?;
    if coords.is_empty() {
        return Ok(InpaintResult {
            image: input.image.clone(),
            decoded_pixels: 0,
            mults: 0,
            timings: PhaseTimings {
                total: start.elapsed(),
                ..PhaseTimings::default()
            },
        });
    }
    let map = generate_parameters(gen, store, input)?;
    let t_gen = start.elapsed();
    let (h, w) = (input.height(), input.width());
    let q = query_pixels(&map.upsampled(h, w)?, &coords, &gen.config.mlp, workers)?;
    let mut image = input.image.clone();
    paste(&mut image, &coords, &q.rgb);
    let total = start.elapsed();
    Ok(InpaintResult {
        image,
        decoded_pixels: coords.len(),
        mults: q.mults,
        timings: PhaseTimings {
            paramgen: t_gen,
            query: total - t_gen,
            total,
        },
    })
}

/// Writes decoded colours into a `(3, H, W)` image at integer coordinates.
pub fn paste(image: &mut Tensor, coords: &[Coord], rgb: &[[f32; 3]]) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let data = image.data_mut();
    for (c, px) in coords.iter().zip(rgb) {
        let i = c.y as usize * w + c.x as usize;
        for (ch, &v) in px.iter().enumerate() {
            data[ch * h * w + i] = v;
        }
    }
}

/// Decodes the whole image at `out_h x out_w` from parameters generated for
/// `input`, keeping known pixels (nearest-resampled) outside the hole.
pub fn inpaint_at_resolution(
    gen: &Generator,
    store: &ParamStore,
    input: &MaskedImage,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let map = generate_parameters(gen, store, input)?;
    let mut out = decode_at_resolution(&map, out_h, out_w, &gen.config.mlp)?;
    let (h, w) = (input.height(), input.width());
    let plane = out_h * out_w;
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            let sx = x * w / out_w;
            if input.mask.data()[sy * w + sx] < 0.5 {
                for c in 0..3 {
                    out.data_mut()[c * plane + y * out_w + x] = input.image.data()[(c * h + sy) * w + sx];
                }
            }
        }
    }
    Ok(out)
}

/// Differentiable full decode: `(n, P, h, w)` parameters to `(n, 3, H, W)`.
#[derive(Clone, Debug)]
pub struct QueryDecodeOp {
    pub spec: MlpSpec,
    pub height: usize,
    pub width: usize,
}

impl QueryDecodeOp {
    /// Pixel rows (or columns) owned by each patch index.
    fn spans(cells: usize, extent: usize) -> Vec<std::ops::Range<usize>> {
        let mut spans = vec![0..0; cells];
        for p in 0..extent {
            let c = p * cells / extent;
            if spans[c].is_empty() {
                spans[c] = p..p + 1;
            } else {
                spans[c].end = p + 1;
            }
        }
        spans
    }

    fn check<T: Real>(&self, phi: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let (n, p, h, w) = phi.dims4()?;
        if p != self.spec.num_params() {
            return Err(Error::ParamLength {
                expected: self.spec.num_params(),
                actual: p,
            });
        }
        if self.height < h || self.width < w {
            return Err(Error::InvalidArgument(format!(
                "output {}x{} is smaller than the {h}x{w} grid",
                self.height, self.width
            )));
        }
        Ok((n, p, h, w))
    }

    fn patch_params<T: Real>(phi: &Tensor<T>, b: usize, cell: usize, p: usize, plane: usize) -> Vec<T> {
        let base = b * p * plane;
        (0..p).map(|k| phi.data()[base + k * plane + cell]).collect()
    }
}

impl<T: Real> CustomOp<T> for QueryDecodeOp {
    fn name(&self) -> &'static str {
        "query_decode"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let phi = inputs[0];
        let (n, p, h, w) = self.check(phi)?;
        let spec = &self.spec;
        let (hh, ww) = (self.height, self.width);
        let geo = Geometry::new(h, w, hh, ww);
        let (ys, xs) = (Self::spans(h, hh), Self::spans(w, ww));
        let plane = hh * ww;
        let cells: Vec<(usize, usize, usize)> =
            (0..n).flat_map(|b| (0..h).flat_map(move |iy| (0..w).map(move |ix| (b, iy, ix)))).collect();
        let results: Vec<Vec<(usize, [T; 3])>> = cells
            .par_iter()
            .map(|&(b, iy, ix)| {
                let params = Self::patch_params(phi, b, iy * w + ix, p, h * w);
                let mut s = Scratch::new(spec);
                let mut px = [T::zero(); 3];
                let mut out = Vec::with_capacity(ys[iy].len() * xs[ix].len());
                for y in ys[iy].clone() {
                    for x in xs[ix].clone() {
                        encode_into(x as f64, y as f64, geo.ex, geo.ey, spec.n_freq, &mut s.enc);
                        eval_mlp(spec, &params, &s.enc, &mut s.a, &mut s.b, &mut px);
                        out.push((b * 3 * plane + y * ww + x, px));
                    }
                }
                out
            })
            .collect();
        let mut data = vec![T::zero(); n * 3 * plane];
        for (i, px) in results.into_iter().flatten() {
            for c in 0..3 {
                data[i + c * plane] = px[c];
            }
        }
        Tensor::new(&[n, 3, hh, ww], data)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let phi = inputs[0];
        let (n, p, h, w) = self.check(phi)?;
        let spec = &self.spec;
        let sizes = &spec.layer_sizes;
        let nl = sizes.len() - 1;
        let (hh, ww) = (self.height, self.width);
        let geo = Geometry::new(h, w, hh, ww);
        let (ys, xs) = (Self::spans(h, hh), Self::spans(w, ww));
        let plane = hh * ww;
        let offsets: Vec<usize> = sizes
            .windows(2)
            .scan(0, |o, q| {
                let cur = *o;
                *o += q[0] * q[1] + q[1];
                Some(cur)
            })
            .collect();
        let cells: Vec<(usize, usize, usize)> =
            (0..n).flat_map(|b| (0..h).flat_map(move |iy| (0..w).map(move |ix| (b, iy, ix)))).collect();
        let grads: Vec<Vec<T>> = cells
            .par_iter()
            .map(|&(b, iy, ix)| {
                let params = Self::patch_params(phi, b, iy * w + ix, p, h * w);
                let mut gp = vec![T::zero(); p];
                // acts[l] is the input of layer l; acts[nl] is the output.
                let mut acts: Vec<Vec<T>> = sizes.iter().map(|&s| vec![T::zero(); s]).collect();
                let mut delta: Vec<T> = Vec::new();
                for y in ys[iy].clone() {
                    for x in xs[ix].clone() {
                        encode_into(x as f64, y as f64, geo.ex, geo.ey, spec.n_freq, &mut acts[0]);
                        for l in 0..nl {
                            let (ni, no) = (sizes[l], sizes[l + 1]);
                            let wt = &params[offsets[l]..offsets[l] + ni * no];
                            let bias = &params[offsets[l] + ni * no..offsets[l] + ni * no + no];
                            let act = spec.activation(l);
                            let (lo, hi) = acts.split_at_mut(l + 1);
                            for (j, row) in wt.chunks_exact(ni).enumerate() {
                                hi[0][j] = act.apply(bias[j] + dot(row, &lo[l]));
                            }
                        }
                        let gi = b * 3 * plane + y * ww + x;
                        delta.clear();
                        delta.extend((0..3).map(|c| grad.data()[gi + c * plane]));
                        for l in (0..nl).rev() {
                            let (ni, no) = (sizes[l], sizes[l + 1]);
                            let act = spec.activation(l);
                            for (d, &yv) in delta.iter_mut().zip(&acts[l + 1]) {
                                *d = *d * act.grad_from_output(yv);
                            }
                            let wo = offsets[l];
                            let bo = wo + ni * no;
                            for j in 0..no {
                                let dj = delta[j];
                                gp[bo + j] = gp[bo + j] + dj;
                                if dj != T::zero() {
                                    let row = &mut gp[wo + j * ni..wo + (j + 1) * ni];
                                    for (g, &xi) in row.iter_mut().zip(&acts[l]) {
                                        *g = *g + dj * xi;
                                    }
                                }
                            }
                            if l > 0 {
                                let wt = &params[wo..wo + ni * no];
                                let mut next = vec![T::zero(); ni];
                                for (j, row) in wt.chunks_exact(ni).enumerate() {
                                    let dj = delta[j];
                                    if dj != T::zero() {
                                        for (nx, &wv) in next.iter_mut().zip(row) {
                                            *nx = *nx + dj * wv;
                                        }
                                    }
                                }
                                delta = next;
                            }
                        }
                    }
                }
                gp
            })
            .collect();
        let mut out = vec![T::zero(); n * p * h * w];
        for (&(b, iy, ix), gp) in cells.iter().zip(grads) {
            let cell = iy * w + ix;
            for (k, v) in gp.into_iter().enumerate() {
                out[(b * p + k) * h * w + cell] = v;
            }
        }
        Ok(vec![Some(Tensor::new(&[n, p, h, w], out)?)])
    }
}

/// Adds a differentiable full decode of `phi` at `height x width` to the graph.
pub fn query_decode<T: Real>(g: &mut Graph<T>, phi: Var, spec: &MlpSpec, height: usize, width: usize) -> Result<Var> {
    spec.validate()?;
    g.custom(
        Arc::new(QueryDecodeOp {
            spec: spec.clone(),
            height,
            width,
        }),
        &[phi],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn encoding_closed_forms() {
        assert!(close(&encode_position(0.0, 0.0, 8.0, 5.0, 1).unwrap(), &[0.0, 1.0, 0.0, 1.0], 0.0));
        assert!(close(&encode_position(2.0, 0.0, 8.0, 8.0, 1).unwrap(), &[1.0, 0.0, 0.0, 1.0], 1e-15));
        let a = encode_position(3.3, 7.1, 8.0, 5.0, 2).unwrap();
        let b = encode_position(3.3 + 8.0, 7.1 + 5.0, 8.0, 5.0, 2).unwrap();
        assert!(close(&a, &b, 1e-6));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(encode_position(1.0, 1.0, 0.0, 1.0, 1).is_err());
        assert!(encode_position(1.0, 1.0, 1.0, -2.0, 1).is_err());
    }

    #[test]
    fn higher_frequencies_double_the_angle() {
        let e = encode_position(1.0, 0.5, 8.0, 8.0, 3).unwrap();
        for k in 0..3 {
            let ang = std::f64::consts::TAU * 2f64.powi(k as i32) / 8.0;
            assert!((e[4 * k] - ang.sin()).abs() < 1e-12);
            assert!((e[4 * k + 3] - (ang / 2.0).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn unpack_layout_and_roundtrip() {
        let spec = MlpSpec::new(vec![2, 2, 3]);
        assert_eq!(spec.num_params(), 15);
        let v: Vec<f32> = (0..15).map(|i| i as f32).collect();
        let layers = unpack_mlp(&v, &spec).unwrap();
        assert_eq!(layers[0].weight.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(layers[0].bias.data(), &[4.0, 5.0]);
        assert_eq!(layers[1].weight.shape(), &[3, 2]);
        assert_eq!(layers[1].bias.data(), &[12.0, 13.0, 14.0]);
        assert_eq!(repack_mlp(&layers), v);
        assert!(matches!(
            unpack_mlp(&v[..14], &spec),
            Err(Error::ParamLength {
                expected: 15,
                actual: 14
            })
        ));
    }

    #[test]
    fn packed_mlp_matches_reference_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec::default();
        let v: Vec<f64> = (0..spec.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = mlp_forward(&spec, &v, &input).unwrap();

        // Independent forward: explicit loops over unpacked matrices.
        let layers = unpack_mlp(&v, &spec).unwrap();
        let mut x = input.clone();
        for (l, layer) in layers.iter().enumerate() {
            let (o, i) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let mut y = vec![0.0; o];
            for (j, yj) in y.iter_mut().enumerate() {
                let mut acc = layer.bias.data()[j];
                for k in 0..i {
                    acc += layer.weight.data()[j * i + k] * x[k];
                }
                *yj = if l + 1 == layers.len() { 1.0 / (1.0 + (-acc).exp()) } else { acc.max(0.0) };
            }
            x = y;
        }
        assert!(close(&got, &x, 1e-12));
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ParamMap {
        let p = MlpSpec::default().num_params();
        ParamMap::from_grid(&Tensor::from_fn(&[p, h, w], |_| rng.gen_range(-0.5..0.5)), h, w).unwrap()
    }

    #[test]
    fn selective_query_equals_full_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MlpSpec::default();
        let map = random_map(&mut rng, 4, 4);
        let view = map.upsampled(24, 20).unwrap();
        let (full, full_mults) = decode_full(&view, &spec).unwrap();
        assert_eq!(full_mults, 24 * 20 * spec.mults_per_pixel());
        let coords: Vec<Coord> = (0..60)
            .map(|_| Coord::pixel(rng.gen_range(0..24), rng.gen_range(0..20)))
            .collect();
        let q = query_pixels(&view, &coords, &spec, 3).unwrap();
        assert_eq!(q.mults, 60 * spec.mults_per_pixel());
        for (c, px) in coords.iter().zip(&q.rgb) {
            for ch in 0..3 {
                assert_eq!(px[ch], full.data()[(ch * 24 + c.y as usize) * 20 + c.x as usize]);
            }
        }
        assert!(query_pixels(&view, &[], &spec, 2).unwrap().rgb.is_empty());
    }

    #[test]
    fn result_is_independent_of_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = MlpSpec::default();
        let map = random_map(&mut rng, 2, 3);
        let view = map.upsampled(16, 16).unwrap();
        let coords: Vec<Coord> = (0..97).map(|_| Coord::new(rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0))).collect();
        let one = query_pixels(&view, &coords, &spec, 1).unwrap();
        for k in [2, 3, 7, 200] {
            assert_eq!(query_pixels(&view, &coords, &spec, k).unwrap(), one);
        }
    }

    #[test]
    fn same_offset_in_one_patch_gives_same_colour() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::default();
        let map = random_map(&mut rng, 2, 2);
        // One patch spans 16 pixels; offsets repeat after the period.
        let view = map.upsampled(32, 32).unwrap();
        let q = query_pixels(&view, &[Coord::pixel(3, 5), Coord::new(3.0, 5.0)], &spec, 1).unwrap();
        assert_eq!(q.rgb[0], q.rgb[1]);
    }

    #[test]
    fn out_of_range_coordinate_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = random_map(&mut rng, 2, 2);
        let view = map.upsampled(8, 8).unwrap();
        let err = query_pixels(&view, &[Coord::pixel(8, 0)], &MlpSpec::default(), 1);
        assert!(matches!(err, Err(Error::CoordOutOfRange { .. })));
    }

    #[test]
    fn decode_is_consistent_across_resolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::default();
        let map = random_map(&mut rng, 4, 4);
        let one = decode_at_resolution(&map, 12, 20, &spec).unwrap();
        let two = decode_at_resolution(&map, 24, 40, &spec).unwrap();
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..20 {
                    let a = one.data()[(c * 12 + y) * 20 + x];
                    let b = two.data()[(c * 24 + 2 * y) * 40 + 2 * x];
                    assert!((a - b).abs() <= 1e-6);
                }
            }
        }
        // One pixel per patch: every pixel is its patch's MLP at offset zero.
        let grid = decode_at_resolution(&map, 4, 4, &spec).unwrap();
        for iy in 0..4 {
            for ix in 0..4 {
                let want = mlp_forward(&spec, map.patch(iy, ix), &[0.0, 1.0, 0.0, 1.0]).unwrap();
                for c in 0..3 {
                    assert_eq!(grid.data()[(c * 4 + iy) * 4 + ix], want[c]);
                }
            }
        }
        assert!(decode_at_resolution(&map, 3, 8, &spec).is_err());
    }

    #[test]
    fn graph_decode_matches_inference_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = MlpSpec::default();
        let map = random_map(&mut rng, 2, 3);
        let (full, _) = decode_full(&map.upsampled(10, 9).unwrap(), &spec).unwrap();
        let mut g = Graph::<f32>::new(crate::autodiff::Mode::Eval);
        let phi = g.constant(map.grid().unsqueeze0()).unwrap();
        let y = query_decode(&mut g, phi, &spec, 10, 9).unwrap();
        assert_eq!(g.value(y).data(), full.data());
    }
}
