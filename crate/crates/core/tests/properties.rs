//! Randomized invariants across the crate.

use coordfill::autodiff::{Graph, Mode};
use coordfill::coord_query::{decode_full, encode_position, hole_coords, query_pixels, MlpSpec};
use coordfill::data::{generate_mask, synth_dataset, MaskSpec};
use coordfill::ffc::{global_channels, AttFfcBlock, FfcBlock, FfcConfig};
use coordfill::image_io::{read_image, write_image};
use coordfill::kernels::{self, Activation, NormKind};
use coordfill::losses::{self, Discriminator, DiscriminatorConfig, FeatureExtractor};
use coordfill::metrics::{psnr, ssim};
use coordfill::model::Model;
use coordfill::param_gen::{generate_parameters, Generator, GeneratorConfig, MaskedImage};
use coordfill::params::ParamStore;
use coordfill::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn small_generator(seed: u64, injection: bool) -> (Generator, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = GeneratorConfig {
        fixed_input_res: 16,
        base_channels: 4,
        n_downsamples: 2,
        n_blocks: 1,
        mlp: MlpSpec::new(vec![4, 8, 3]),
        resolution_injection: injection,
        ..GeneratorConfig::default()
    };
    let gen = Generator::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (gen, store)
}

fn random_mask(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.gen_range(0.0..0.6);
    Tensor::from_fn(&[1, h, w], |_| rng.gen_bool(p) as u8 as f32)
}

fn nearest_upscale(x: &Tensor, k: usize) -> Tensor {
    let (c, h, w) = x.dims3().unwrap();
    Tensor::from_fn(&[c, h * k, w * k], |i| {
        let (ch, rest) = (i / (h * k * w * k), i % (h * k * w * k));
        let (y, xx) = (rest / (w * k), rest % (w * k));
        x.data()[(ch * h + y / k) * w + xx / k]
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn shape_product_matches_length(dims in prop::collection::vec(1usize..5, 1..5), extra in 1usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::new(&dims, vec![0.0f32; n]).is_ok());
        prop_assert!(Tensor::new(&dims, vec![0.0f32; n + extra]).is_err());
    }

    #[test]
    fn fft_roundtrip_any_size(h in 1usize..=16, w in 1usize..=16, seed in any::<u64>()) {
        let x = rand_tensor(seed, &[1, 2, h, w]);
        let back = kernels::fft::irfft2(&kernels::fft::rfft2(&x).unwrap()).unwrap();
        let scale = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(back.max_abs_diff(&x) <= 1e-5 * scale);
    }

    #[test]
    fn conv_extent_and_delta(h in 3usize..12, w in 3usize..12, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>()) {
        let x = rand_tensor(seed, &[1, 2, h, w]);
        let wt = rand_tensor(seed ^ 1, &[3, 2, k, k]);
        let y = kernels::conv::conv2d(&x, &wt, None, stride, pad).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1][..]);
        prop_assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn activations_are_monotone(a in -20.0f64..20.0, d in 1e-3f64..5.0) {
        for act in [Activation::Relu, Activation::LeakyRelu, Activation::Sigmoid, Activation::Tanh] {
            prop_assert!(act.apply(a + d) >= act.apply(a));
        }
        let s: f64 = Activation::Sigmoid.apply(a);
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn ffc_split_and_shapes(ch in 2usize..12, out in 2usize..12, alpha in 0.0f64..=1.0, h in 3usize..9, seed in any::<u64>()) {
        let g_ch = global_channels(alpha, ch);
        prop_assert_eq!(g_ch, ((alpha * ch as f64).round() as usize).min(ch));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let cfg = FfcConfig { alpha, ..FfcConfig::new(ch, out) };
        let b = FfcBlock::new(&mut store, "f", cfg, &mut rng).unwrap();
        let (l, gl) = b.input_split();
        prop_assert_eq!(l + gl, ch);
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(rand_tensor(seed, &[2, ch, h, h + 1])).unwrap();
        let y = b.forward(&mut g, &store, x).unwrap();
        prop_assert_eq!(g.shape(y), &[2, out, h, h + 1][..]);
    }

    #[test]
    fn attention_map_is_one_channel_in_unit_interval(h in 3usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let b = AttFfcBlock::new(&mut store, "a", 8, 0.5, NormKind::Batch, &mut rng).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(rand_tensor(seed, &[2, 8, h, h])).unwrap();
        let t = b.forward_traced(&mut g, &store, x).unwrap();
        prop_assert_eq!(g.shape(t.attention), &[2, 1, h, h][..]);
        prop_assert!(g.value(t.attention).data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert_eq!(g.shape(t.output), &[2, 8, h, h][..]);
    }

    #[test]
    fn conservative_mask_downsampling(h in 4usize..24, w in 4usize..24, oh in 1usize..8, ow in 1usize..8, seed in any::<u64>()) {
        let m = random_mask(h, w, seed).unsqueeze0();
        let d = kernels::resample::downsample_mask_max(&m, oh, ow).unwrap();
        for y in 0..h {
            for x in 0..w {
                if m.data()[y * w + x] > 0.5 {
                    prop_assert_eq!(d.data()[(y * oh / h) * ow + x * ow / w], 1.0);
                }
            }
        }
    }

    #[test]
    fn encoding_is_bounded_and_periodic(px in 0.0f64..500.0, py in 0.0f64..500.0, ex in 0.5f64..40.0, ey in 0.5f64..40.0, k in 1u32..4) {
        let a = encode_position(px, py, ex, ey, 3).unwrap();
        let b = encode_position(px + k as f64 * ex, py + k as f64 * ey, ex, ey, 3).unwrap();
        prop_assert_eq!(a.len(), 12);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!(u.abs() <= 1.0);
            prop_assert!((u - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn mask_ratio_bound_and_determinism(side in 8usize..64, seed in any::<u64>()) {
        let spec = MaskSpec::default().with_seed(seed);
        let m = generate_mask(&spec, side, side + 3).unwrap();
        let ratio = m.data().iter().filter(|&&v| v > 0.5).count() as f64 / m.len() as f64;
        prop_assert!(ratio <= spec.max_hole_ratio);
        prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(m, generate_mask(&spec, side, side + 3).unwrap());
    }

    #[test]
    fn psnr_falls_with_noise_and_ssim_is_bounded(seed in any::<u64>()) {
        let img = synth_dataset(1, 16, 16, seed).remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::<f32>::from_fn(&[3, 16, 16], |_| rng.gen_range(-1.0..1.0));
        let noisy = |amp: f32| Tensor::from_fn(&[3, 16, 16], |i| img.data()[i] + amp * noise.data()[i]);
        let p: Vec<f64> = [0.01, 0.05, 0.2].iter().map(|&a| psnr(&noisy(a), &img).unwrap()).collect();
        prop_assert!(p[0] > p[1] && p[1] > p[2]);
        let s = ssim(&noisy(0.2), &img).unwrap();
        prop_assert!((-1.0..1.0).contains(&s));
        prop_assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn losses_vanish_on_identical_inputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[1, 3, 8, 8], |_| rng.gen_range(0.0..1.0));
        let y = Tensor::<f64>::from_fn(&[1, 3, 8, 8], |_| rng.gen_range(0.0..1.0));
        let ext = FeatureExtractor::<f64>::random_conv(seed);
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::new(&mut store, &DiscriminatorConfig { base_channels: 2, layers: 2 }, &mut rng).unwrap();
        let mut g = Graph::new(Mode::Train);
        let (xv, yv) = (g.constant(x).unwrap(), g.constant(y).unwrap());
        let same = losses::perceptual_loss(&mut g, &ext, xv, xv).unwrap();
        let diff = losses::perceptual_loss(&mut g, &ext, xv, yv).unwrap();
        let (lx, ax) = d.forward(&mut g, &store, xv).unwrap();
        let (ly, ay) = d.forward(&mut g, &store, yv).unwrap();
        let fm_same = losses::feature_matching_loss(&mut g, &ax, &ax).unwrap();
        let fm_diff = losses::feature_matching_loss(&mut g, &ax, &ay).unwrap();
        let dl = losses::d_loss(&mut g, lx, ly).unwrap();
        let gl = losses::g_loss(&mut g, ly).unwrap();
        prop_assert_eq!(g.value(same).item(), 0.0);
        prop_assert_eq!(g.value(fm_same).item(), 0.0);
        for v in [diff, fm_diff, dl, gl] {
            prop_assert!(g.value(v).item() >= 0.0);
        }
        prop_assert_eq!(ax.len(), 2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn selective_query_and_paste_back_are_exact(h in 8usize..40, w in 8usize..40, seed in any::<u64>(), workers in 1usize..6) {
        let (gen, store) = small_generator(seed, true);
        let img = synth_dataset(1, h, w, seed).remove(0);
        let mask = random_mask(h, w, seed ^ 7);
        let input = MaskedImage::new(img.clone(), mask.clone()).unwrap();
        let spec = &gen.config.mlp;
        let map = generate_parameters(&gen, &store, &input).unwrap();
        let grid = map.grid();
        prop_assert_eq!(grid.shape(), &[spec.num_params(), 4, 4][..]);
        let view = map.upsampled(h, w).unwrap();
        let (full, _) = decode_full(&view, spec).unwrap();
        let coords = hole_coords(&mask).unwrap();
        let q = query_pixels(&view, &coords, spec, workers).unwrap();
        let q1 = query_pixels(&view, &coords, spec, 1).unwrap();
        prop_assert_eq!(&q, &q1);
        prop_assert_eq!(q.mults, coords.len() as u64 * spec.mults_per_pixel());
        let plane = h * w;
        for (c, rgb) in coords.iter().zip(&q.rgb) {
            let i = c.y as usize * w + c.x as usize;
            for ch in 0..3 {
                prop_assert_eq!(rgb[ch].to_bits(), full.data()[ch * plane + i].to_bits());
            }
        }
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(view.at(y, x), map.patch(view.patch_of(y, x).0, view.patch_of(y, x).1));
            }
        }
        let r = coordfill::coord_query::inpaint(&gen, &store, &input, workers).unwrap();
        prop_assert_eq!(r.decoded_pixels, coords.len());
        for i in 0..plane {
            if mask.data()[i] < 0.5 {
                for ch in 0..3 {
                    prop_assert_eq!(r.image.data()[ch * plane + i].to_bits(), img.data()[ch * plane + i].to_bits());
                }
            }
        }
    }

    #[test]
    fn parameters_depend_on_size_only_through_the_code(seed in any::<u64>(), k in 2usize..4) {
        let img = synth_dataset(1, 16, 16, seed).remove(0);
        let mask = random_mask(16, 16, seed ^ 3);
        let small = MaskedImage::new(img.clone(), mask.clone()).unwrap();
        let big = MaskedImage::new(nearest_upscale(&img, k), nearest_upscale(&mask, k)).unwrap();
        let (gen, store) = small_generator(seed, false);
        let a = generate_parameters(&gen, &store, &small).unwrap().grid();
        let b = generate_parameters(&gen, &store, &big).unwrap().grid();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&a, &generate_parameters(&gen, &store, &small).unwrap().grid());
        let (gen, store) = small_generator(seed, true);
        let a = generate_parameters(&gen, &store, &small).unwrap().grid();
        let b = generate_parameters(&gen, &store, &big).unwrap().grid();
        prop_assert_ne!(a, b);
    }

    #[test]
    fn image_io_roundtrip_is_quantization_bounded(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::<f32>::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0));
        for name in ["x.png", "x.ppm"] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            prop_assert!(read_image(&p).unwrap().max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn masked_prediction_composite_keeps_known_pixels(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::<f64>::from_fn(&[2, 3, 6, 6], |_| rng.gen_range(0.0..1.0));
        let masks = Tensor::<f64>::from_fn(&[2, 1, 6, 6], |_| rng.gen_bool(0.3) as u8 as f64);
        let out = Tensor::<f64>::from_fn(&[2, 3, 6, 6], |_| rng.gen_range(0.0..1.0));
        let mut g = Graph::new(Mode::Train);
        let o = g.constant(out.clone()).unwrap();
        let c = Model::composite(&mut g, o, &images, &masks).unwrap();
        let v = g.value(c);
        for n in 0..2 {
            for ch in 0..3 {
                for p in 0..36 {
                    let i = (n * 3 + ch) * 36 + p;
                    let want = if masks.data()[n * 36 + p] > 0.5 { out.data()[i] } else { images.data()[i] };
                    prop_assert_eq!(v.data()[i], want);
                }
            }
        }
    }
}
