//! Gradient checks shared by the gradient and acceptance targets.

use coordfill::autodiff::{Graph, Mode, Var};
use coordfill::coord_query::{query_decode, MlpSpec};
use coordfill::gradcheck::{check, GradReport};
use coordfill::kernels::{Activation, NormKind};
use coordfill::losses::{self, Discriminator, DiscriminatorConfig, FeatureExtractor, LossWeights};
use coordfill::model::{Model, ModelConfig};
use coordfill::param_gen::GeneratorConfig;
use coordfill::params::ParamStore;
use coordfill::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const FLOOR: f64 = 1e-8;
pub const TOL: f64 = 1e-5;
// Whole-model losses have large third derivatives (small-batch norms,
// sigmoids) and O(10) magnitude, so the store check uses the five-point
// central stencil, which cancels the h^2 truncation term.
const STORE_H: f64 = 1e-4;
const STORE_FLOOR: f64 = 1e-5;

pub fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `sum(y * w)` with fixed random `w`, so every output entry matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}


pub fn conv2d_grads() -> Vec<(String, GradReport)> {
    let mut reps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let x = rand_t(&mut rng, &[2, 3, 7, 6], -1.0, 1.0);
        let w = rand_t(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let b = rand_t(&mut rng, &[4], -0.5, 0.5);
        let r = check(&[x, w, b], H, FLOOR, 40, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(g, y, 9)
        })
        .unwrap();
        reps.push((format!("conv2d s{stride} p{pad}"), r));
    }
    reps
}

pub fn conv_transpose2d_grads() -> Vec<(String, GradReport)> {
    let mut reps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_t(&mut rng, &[2, 3, 4, 3], -1.0, 1.0);
    let w = rand_t(&mut rng, &[3, 2, 4, 4], -0.5, 0.5);
    let b = rand_t(&mut rng, &[2], -0.5, 0.5);
    let r = check(&[x, w, b], H, FLOOR, 40, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
        project(g, y, 3)
    })
    .unwrap();
    reps.push(("conv_transpose2d".to_string(), r));
    reps
}

pub fn linear_and_elementwise_grads() -> Vec<(String, GradReport)> {
    let mut reps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_t(&mut rng, &[5, 4], -1.0, 1.0);
    let w = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[3], -1.0, 1.0);
    let r = check(&[x, w, b], H, FLOOR, 40, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        project(g, y, 4)
    })
    .unwrap();
    reps.push(("linear".to_string(), r));

    let a = rand_t(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let c = rand_t(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let r = check(&[a, c], H, FLOOR, 40, |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let d = g.sub(d, v[1])?;
        let m = g.mul(d, v[0])?;
        let k = g.scale(m, -1.7)?;
        project(g, k, 5)
    })
    .unwrap();
    reps.push(("add/sub/mul/scale".to_string(), r));
    reps
}

pub fn activation_grads() -> Vec<(String, GradReport)> {
    let mut reps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Keep inputs away from the kinks at zero.
    let x = Tensor::from_fn(&[2, 2, 4, 4], |_| {
        let v: f64 = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    for act in [
        Activation::Identity,
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::Tanh,
    ] {
        let r = check(&[x.clone()], H, FLOOR, 64, |g, v| {
            let y = g.activation(v[0], act)?;
            project(g, y, 6)
        })
        .unwrap();
        reps.push((format!("{act:?}"), r));
    }
    reps
}

pub fn concat_narrow_resample_grads() -> Vec<(String, GradReport)> {
    let mut reps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_t(&mut rng, &[2, 2, 3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    let r = check(&[a, b], H, FLOOR, 40, |g, v| {
        let c = g.concat(&[v[0], v[1]])?;
        let n = g.narrow_channels(c, 1, 3)?;
        let u = g.resample_nearest(n, 7, 5)?;
        project(g, u, 7)
    })
    .unwrap();
    reps.push(("concat/narrow/resample_nearest".to_string(), r));
    reps
}

pub fn fft_grads() -> Vec<(String, GradReport)> {
    let mut reps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (h, w) in [(4, 4), (5, 6), (6, 5)] {
        let x = rand_t(&mut rng, &[1, 2, h, w], -1.0, 1.0);
        let r = check(&[x.clone()], H, FLOOR, 60, |g, v| {
            let s = g.rfft2(v[0])?;
            project(g, s, 8)
        })
        .unwrap();
        reps.push((format!("rfft2 {h}x{w}"), r));
        let r = check(&[x], H, FLOOR, 60, |g, v| {
            let s = g.rfft2(v[0])?;
            let s = g.activation(s, Activation::Tanh)?;
            let y = g.irfft2(s, w)?;
            project(g, y, 9)
        })
        .unwrap();
        reps.push((format!("rfft2/tanh/irfft2 {h}x{w}"), r));
    }
    reps
}

pub fn norm_grads() -> Vec<(String, GradReport)> {
    let mut reps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_t(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
    let gamma = rand_t(&mut rng, &[2], 0.5, 1.5);
    let beta = rand_t(&mut rng, &[2], -0.5, 0.5);
    for kind in [NormKind::Batch, NormKind::Instance] {
        let r = check(&[x.clone(), gamma.clone(), beta.clone()], H, FLOOR, 40, |g, v| {
            let (y, _, _) = g.norm_train(v[0], v[1], v[2], kind)?;
            project(g, y, 10)
        })
        .unwrap();
        reps.push((format!("norm_train {kind:?}"), r));
    }
    let r = check(&[x, gamma, beta], H, FLOOR, 40, |g, v| {
        let y = g.norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.8, 1.3])?;
        project(g, y, 11)
    })
    .unwrap();
    reps.push(("norm_eval".to_string(), r));
    reps
}

pub fn reduction_and_loss_grads() -> Vec<(String, GradReport)> {
    let mut reps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[2, 1, 3, 3], |_| {
        let v: f64 = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let r = check(&[x.clone()], H, FLOOR, 40, |g, v| g.mean_abs(v[0])).unwrap();
    reps.push(("mean_abs".to_string(), r));
    for target in [true, false] {
        let r = check(&[x.clone()], H, FLOOR, 40, |g, v| g.bce_with_logits(v[0], target)).unwrap();
        reps.push((format!("bce target={target}"), r));
    }
    reps
}

pub fn query_decode_grads() -> Vec<(String, GradReport)> {
    let mut reps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = MlpSpec::new(vec![4, 5, 3]);
    let p = spec.num_params();
    for (h, w, oh, ow) in [(2, 2, 5, 6), (3, 2, 6, 4)] {
        let phi = rand_t(&mut rng, &[1, p, h, w], -1.0, 1.0);
        let r = check(&[phi], H, FLOOR, 200, |g, v| {
            let y = query_decode(g, v[0], &spec, oh, ow)?;
            project(g, y, 12)
        })
        .unwrap();
        reps.push((format!("query_decode {h}x{w}->{oh}x{ow}"), r));
    }
    reps
}

fn tiny_model(decoder: coordfill::decoders::DecoderKind) -> ModelConfig {
    ModelConfig {
        generator: GeneratorConfig {
            fixed_input_res: 8,
            base_channels: 2,
            n_downsamples: 2,
            n_blocks: 1,
            mlp: MlpSpec::new(vec![4, 4, 3]),
            ..GeneratorConfig::default()
        },
        decoder,
        max_output_res: 8,
    }
}

/// Analytic vs numeric gradient of a scalar built from a model store.
fn check_store<F>(store: &ParamStore<f64>, max_per_entry: usize, f: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new(Mode::Train);
    g.train_store(store);
    let out = f(&mut g, store).unwrap();
    let grads = g.backward(out).unwrap();
    let sg = g.store_grads(&grads, store);
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new(Mode::Train);
        let out = f(&mut g, s).unwrap();
        g.value(out).item()
    };
    let mut work = store.clone();
    let mut rep = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).len();
        let stride = n.div_ceil(max_per_entry).max(1);
        for i in (0..n).step_by(stride) {
            let orig = work.get(id).data()[i];
            let mut at = |d: f64| {
                work.get_mut(id).data_mut()[i] = orig + d;
                let v = eval(&work);
                work.get_mut(id).data_mut()[i] = orig;
                v
            };
            let (p1, m1, p2, m2) = (at(STORE_H), at(-STORE_H), at(2.0 * STORE_H), at(-2.0 * STORE_H));
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * STORE_H);
            let a = sg[k].as_ref().map(|t| t.data()[i]).unwrap_or(0.0);
            let abs = (a - numeric).abs();
            rep.max_abs_error = rep.max_abs_error.max(abs);
            rep.max_rel_error = rep.max_rel_error.max(abs / a.abs().max(numeric.abs()).max(STORE_FLOOR));
            rep.checked += 1;
        }
    }
    rep
}

/// Fills norm affines and zero-initialized tensors so no path is trivially flat.
fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.is_trainable(id) {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
}

pub fn end_to_end_generator_query_loss() -> Vec<(String, GradReport)> {
    let mut reps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, tiny_model(coordfill::decoders::DecoderKind::PixelQuery), &mut rng).unwrap();
    perturb(&mut store, &mut rng);
    let images = rand_t(&mut rng, &[2, 3, 6, 6], 0.0, 1.0);
    let masks = Tensor::from_fn(&[2, 1, 6, 6], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let ext = FeatureExtractor::<f64>::pixels();
    let r = check_store(&store, 6, |g, s| {
        let out = model.forward(g, s, &images, &masks)?;
        let comp = Model::composite(g, out, &images, &masks)?;
        let gt = g.constant(images.clone())?;
        let per = losses::perceptual_loss(g, &ext, comp, gt)?;
        // Smooth surrogate for the adversarial and matching terms.
        let adv = project(g, comp, 13)?;
        let adv = g.scale(adv, 1e-2)?;
        let fm = g.mul(per, per)?;
        losses::total_loss_var(g, per, adv, fm, &LossWeights::default())
    });
    reps.push(("generator -> query -> total loss".to_string(), r));

    let r = check_store(&store, 6, |g, s| {
        let out = model.forward(g, s, &images, &masks)?;
        let comp = Model::composite(g, out, &images, &masks)?;
        project(g, comp, 14)
    });
    reps.push(("generator -> query -> composite".to_string(), r));
    reps
}

pub fn end_to_end_discriminator_losses() -> Vec<(String, GradReport)> {
    let mut reps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let d = Discriminator::new(
        &mut store,
        &DiscriminatorConfig {
            base_channels: 2,
            layers: 2,
        },
        &mut rng,
    )
    .unwrap();
    let real = rand_t(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let fake = rand_t(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let r = check_store(&store, 8, |g, s| {
        let rv = g.constant(real.clone())?;
        let fv = g.constant(fake.clone())?;
        let (rl, _) = d.forward(g, s, rv)?;
        let (fl, _) = d.forward(g, s, fv)?;
        losses::d_loss(g, rl, fl)
    });
    reps.push(("discriminator d_loss".to_string(), r));
    let r = check(&[fake], H, FLOOR, 40, |g, v| {
        let (fl, _) = d.forward(g, &store, v[0])?;
        losses::g_loss(g, fl)
    })
    .unwrap();
    reps.push(("g_loss wrt fake image".to_string(), r));
    reps
}

