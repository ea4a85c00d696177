//! Procedural RGB images: smooth gradients, a periodic texture and a few
//! flat rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::tensor::Tensor;

fn one_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (ang.sin(), ang.cos());
    let amp = rng.gen_range(0.05..0.2);
    let period = rng.gen_range(4.0..12.0);
    let tex_ang = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ty, tx) = (tex_ang.sin() / period, tex_ang.cos() / period);
    let tex_phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let n_rects = rng.gen_range(1..=3);
    let rects: Vec<_> = (0..n_rects)
        .map(|_| {
            let rh = rng.gen_range(h / 6..=h / 2).max(1);
            let rw = rng.gen_range(w / 6..=w / 2).max(1);
            let y0 = rng.gen_range(0..=h - rh);
            let x0 = rng.gen_range(0..=w - rw);
            let col: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let alpha = rng.gen_range(0.5..1.0);
            (y0, x0, rh, rw, col, alpha)
        })
        .collect();

    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    let (hf, wf) = (h.max(2) as f64 - 1.0, w.max(2) as f64 - 1.0);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (y as f64 / hf, x as f64 / wf);
            // Projection onto the gradient direction, rescaled to [0, 1].
            let t = ((u - 0.5) * gy + (v - 0.5) * gx) / (gy.abs() + gx.abs()) + 0.5;
            let mut px: [f64; 3] = std::array::from_fn(|c| {
                let base = c0[c] + (c1[c] - c0[c]) * t;
                base + amp * (std::f64::consts::TAU * (y as f64 * ty + x as f64 * tx) + tex_phase[c]).sin()
            });
            for &(y0, x0, rh, rw, col, alpha) in &rects {
                if (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x) {
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - alpha) + col[c] * alpha;
                    }
                }
            }
            for c in 0..3 {
                data[c * plane + y * w + x] = px[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("image shape")
}

/// `n` images of shape `(3, H, W)` with values in `[0, 1]`. Image `i`
/// depends only on `(seed, i)`.
pub fn synth_dataset(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    (0..n)
        .into_par_iter()
        .map(|i| one_image(h, w, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)))
        .collect()
}
