//! Free-form hole masks: thick random-walk strokes plus rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mask generator settings. Sizes are fractions of the shorter image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub max_hole_ratio: f64,
    /// Inclusive range of stroke counts.
    pub strokes: (usize, usize),
    pub stroke_width: (f64, f64),
    /// Inclusive range of polyline vertices per stroke.
    pub stroke_vertices: (usize, usize),
    pub stroke_step: (f64, f64),
    pub rects: (usize, usize),
    pub rect_size: (f64, f64),
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            max_hole_ratio: 0.25,
            strokes: (1, 4),
            stroke_width: (0.04, 0.1),
            stroke_vertices: (3, 8),
            stroke_step: (0.08, 0.25),
            rects: (0, 2),
            rect_size: (0.1, 0.3),
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_hole_ratio) {
            return Err(Error::config(format!("max_hole_ratio {} outside [0, 1]", self.max_hole_ratio)));
        }
        for (name, (lo, hi)) in [("strokes", self.strokes), ("stroke_vertices", self.stroke_vertices), ("rects", self.rects)] {
            if lo > hi {
                return Err(Error::config(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        for (name, (lo, hi)) in [
            ("stroke_width", self.stroke_width),
            ("stroke_step", self.stroke_step),
            ("rect_size", self.rect_size),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        if self.max_hole_ratio == 0.0 && (self.strokes.0 > 0 || self.rects.0 > 0) {
            return Err(Error::config("max_hole_ratio 0 leaves no room for mandatory strokes or rectangles"));
        }
        Ok(())
    }
}

struct Canvas {
    h: usize,
    w: usize,
    bits: Vec<bool>,
    count: usize,
    /// Pixels set since the last checkpoint, in order.
    added: Vec<usize>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
            count: 0,
            added: Vec::new(),
        }
    }

    fn set(&mut self, y: i64, x: i64) {
        if y < 0 || x < 0 || y >= self.h as i64 || x >= self.w as i64 {
            return;
        }
        let i = y as usize * self.w + x as usize;
        if !self.bits[i] {
            self.bits[i] = true;
            self.count += 1;
            self.added.push(i);
        }
    }

    fn disc(&mut self, cy: f64, cx: f64, r: f64) {
        let ri = r.ceil() as i64;
        let (y0, x0) = (cy.round() as i64, cx.round() as i64);
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let (py, px) = ((y0 + dy) as f64, (x0 + dx) as f64);
                if (py - cy).powi(2) + (px - cx).powi(2) <= r * r {
                    self.set(y0 + dy, x0 + dx);
                }
            }
        }
    }

    fn rollback(&mut self) {
        for i in self.added.drain(..) {
            self.bits[i] = false;
        }
        self.count = self.bits.iter().filter(|&&b| b).count();
    }

    fn commit(&mut self) {
        self.added.clear();
    }

    fn into_tensor(self) -> Tensor {
        let data = self.bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[1, self.h, self.w], data).expect("mask shape")
    }
}

fn stroke(c: &mut Canvas, rng: &mut impl Rng, spec: &MaskSpec, scale: f64) {
    let side = c.h.min(c.w) as f64;
    let r = (rng.gen_range(spec.stroke_width.0..=spec.stroke_width.1) * side * scale / 2.0).max(0.5);
    let n = rng.gen_range(spec.stroke_vertices.0..=spec.stroke_vertices.1).max(1);
    let (mut y, mut x) = (rng.gen_range(0.0..c.h as f64), rng.gen_range(0.0..c.w as f64));
    c.disc(y, x, r);
    for _ in 1..n {
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let len = rng.gen_range(spec.stroke_step.0..=spec.stroke_step.1) * side * scale;
        let ny = (y + len * ang.sin()).clamp(0.0, c.h as f64 - 1.0);
        let nx = (x + len * ang.cos()).clamp(0.0, c.w as f64 - 1.0);
        let steps = ((ny - y).abs().max((nx - x).abs()).ceil() as usize).max(1);
        for s in 1..=steps {
            let t = s as f64 / steps as f64;
            c.disc(y + (ny - y) * t, x + (nx - x) * t, r);
        }
        (y, x) = (ny, nx);
    }
}

fn rect(c: &mut Canvas, rng: &mut impl Rng, spec: &MaskSpec, scale: f64) {
    let rh = ((rng.gen_range(spec.rect_size.0..=spec.rect_size.1) * c.h as f64 * scale).round() as usize).clamp(1, c.h);
    let rw = ((rng.gen_range(spec.rect_size.0..=spec.rect_size.1) * c.w as f64 * scale).round() as usize).clamp(1, c.w);
    let y0 = rng.gen_range(0..=c.h - rh);
    let x0 = rng.gen_range(0..=c.w - rw);
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            c.set(y as i64, x as i64);
        }
    }
}

/// Shapes that would push the hole ratio past the limit are redrawn smaller
/// a few times and then dropped.
const SHRINK_TRIES: usize = 6;

/// A `(1, H, W)` binary mask, deterministic in `spec.seed`.
pub fn generate_mask(spec: &MaskSpec, h: usize, w: usize) -> Result<Tensor> {
    spec.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("mask extents must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let limit = (spec.max_hole_ratio * (h * w) as f64).floor() as usize;
    let n_strokes = rng.gen_range(spec.strokes.0..=spec.strokes.1);
    let n_rects = rng.gen_range(spec.rects.0..=spec.rects.1);
    let mut c = Canvas::new(h, w);
    for k in 0..n_strokes + n_rects {
        let mut scale = 1.0;
        for _ in 0..SHRINK_TRIES {
            if k < n_strokes {
                stroke(&mut c, &mut rng, spec, scale);
            } else {
                rect(&mut c, &mut rng, spec, scale);
            }
            if c.count <= limit {
                c.commit();
                break;
            }
            c.rollback();
            scale *= 0.6;
        }
    }
    Ok(c.into_tensor())
}

/// A `(1, H, W)` mask with exactly `round(ratio * H * W)` holes, built from
/// strokes and trimmed to the target count.
pub fn mask_with_ratio(h: usize, w: usize, ratio: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let target = (ratio * (h * w) as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MaskSpec::default();
    let mut c = Canvas::new(h, w);
    while c.count < target {
        stroke(&mut c, &mut rng, &spec, 1.0);
    }
    // Undo the most recent pixels beyond the target.
    while c.count > target {
        let i = c.added.pop().expect("tracked pixel");
        c.bits[i] = false;
        c.count -= 1;
    }
    Ok(c.into_tensor())
}

pub fn hole_ratio(mask: &Tensor) -> f64 {
    mask.data().iter().filter(|&&v| v > 0.5).count() as f64 / mask.len().max(1) as f64
}
