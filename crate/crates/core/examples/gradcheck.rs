//! Checks reverse-mode gradients of a few composed ops against central
//! differences in f64.
//!
//! `cargo run --release --example gradcheck`

use coordfill::coord_query::{query_decode, MlpSpec};
use coordfill::gradcheck::check;
use coordfill::kernels::{Activation, NormKind};
use coordfill::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> coordfill::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-1.0..1.0));

    let (x, w, b) = (rand(&[2, 3, 6, 6]), rand(&[4, 3, 3, 3]), rand(&[4]));
    let r = check(&[x.clone(), w, b], 1e-6, 1e-8, 50, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        let y = g.activation(y, Activation::Tanh)?;
        g.sum(y)
    })?;
    println!("conv2d -> tanh -> sum         max rel {:.2e} ({} entries)", r.max_rel_error, r.checked);

    let r = check(&[x.clone()], 1e-6, 1e-8, 50, |g, v| {
        let s = g.rfft2(v[0])?;
        let s = g.activation(s, Activation::Sigmoid)?;
        let y = g.irfft2(s, 6)?;
        let y = g.mul(y, y)?;
        g.sum(y)
    })?;
    println!("rfft2 -> sigmoid -> irfft2     max rel {:.2e} ({} entries)", r.max_rel_error, r.checked);

    let (gamma, beta) = (rand(&[3]), rand(&[3]));
    let r = check(&[x, gamma, beta], 1e-6, 1e-8, 50, |g, v| {
        let (y, _, _) = g.norm_train(v[0], v[1], v[2], NormKind::Batch)?;
        let y = g.mul(y, v[0])?;
        let y = g.activation(y, Activation::Sigmoid)?;
        g.sum(y)
    })?;
    println!("batch norm -> (* x) -> sigm   max rel {:.2e} ({} entries)", r.max_rel_error, r.checked);

    let spec = MlpSpec::new(vec![4, 6, 3]);
    let phi = rand(&[1, spec.num_params(), 2, 2]);
    let r = check(&[phi], 1e-6, 1e-8, 80, |g, v| {
        let y = query_decode(g, v[0], &spec, 6, 8)?;
        g.mean_abs(y)
    })?;
    println!("per-patch MLP decode          max rel {:.2e} ({} entries)", r.max_rel_error, r.checked);
    Ok(())
}
