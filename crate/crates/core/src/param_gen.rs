//! Parameter generation network.
//!
//! The masked image is resampled to a fixed square resolution, encoded by
//! three stride-2 convolutions, refined by a stack of FFC blocks and mapped
//! per location to a vector of query-MLP parameters. The result is a
//! [`ParamMap`]: one parameter vector per low-resolution patch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::coord_query::MlpSpec;
use crate::error::{Error, Result};
use crate::ffc::{BlockKind, BottleneckBlock};
use crate::kernels::{downsample_mask_max, resample_bilinear, Activation, NormKind};
use crate::nn::Conv2d;
use crate::params::{uniform_init, ParamStore, RELU_GAIN};
use crate::tensor::{lit, Real, Tensor};

/// An RGB image with a binary hole mask (1 = missing).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    /// `(3, H, W)`, values in `[0, 1]`.
    pub image: Tensor,
    /// `(1, H, W)`, values in `{0, 1}`.
    pub mask: Tensor,
}

impl MaskedImage {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("image must have 3 channels, got {c}")));
        }
        let (mc, mh, mw) = mask.dims3()?;
        if mc != 1 || mh != h || mw != w {
            return Err(Error::shape(format!(
                "mask shape {:?} does not match image {h}x{w}",
                mask.shape()
            )));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("image value {v} outside [0, 1]")));
        }
        if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn hole_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }

    pub fn hole_ratio(&self) -> f64 {
        self.hole_count() as f64 / self.mask.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub fixed_input_res: usize,
    pub base_channels: usize,
    pub n_downsamples: usize,
    /// Number of bottleneck blocks.
    pub n_blocks: usize,
    pub block_kind: BlockKind,
    pub alpha: f64,
    pub norm: NormKind,
    pub mlp: MlpSpec,
    /// Feed the target-resolution code into the parameter mapping.
    pub resolution_injection: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            fixed_input_res: 64,
            base_channels: 8,
            n_downsamples: 2,
            n_blocks: 6,
            block_kind: BlockKind::AttFfc,
            alpha: 0.5,
            norm: NormKind::Batch,
            mlp: MlpSpec::default(),
            resolution_injection: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let scale = 1usize
            .checked_shl(self.n_downsamples as u32)
            .ok_or_else(|| Error::config("too many downsampling steps"))?;
        if self.fixed_input_res == 0 || self.fixed_input_res % scale != 0 {
            return Err(Error::config(format!(
                "fixed_input_res {} is not divisible by 2^{}",
                self.fixed_input_res, self.n_downsamples
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be >= 1"));
        }
        if self.n_downsamples == 0 {
            return Err(Error::config("n_downsamples must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        self.mlp.validate()
    }

    /// Side length of the parameter grid.
    pub fn grid_size(&self) -> usize {
        self.fixed_input_res >> self.n_downsamples
    }

    /// Channel width at the bottleneck.
    pub fn feature_channels(&self) -> usize {
        self.base_channels << (self.n_downsamples - 1)
    }

    fn rcode_channels(&self) -> usize {
        if self.resolution_injection {
            2
        } else {
            0
        }
    }
}

/// `(log2(H / fixed), log2(W / fixed))`.
pub fn resolution_code(height: usize, width: usize, fixed: usize) -> [f64; 2] {
    [
        (height as f64 / fixed as f64).log2(),
        (width as f64 / fixed as f64).log2(),
    ]
}

/// Builds the `(n, 4, R, R)` network input from `(n, 3, H, W)` images and
/// `(n, 1, H, W)` masks: the image is resampled bilinearly, the mask by
/// max-pooling, and the image is zeroed wherever the low-resolution mask is
/// set. Also returns the low-resolution mask.
pub fn prepare_input<T: Real>(images: &Tensor<T>, masks: &Tensor<T>, res: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = images.dims4()?;
    let (mn, mc, mh, mw) = masks.dims4()?;
    if c != 3 || mc != 1 || (mn, mh, mw) != (n, h, w) {
        return Err(Error::shape(format!(
            "expected images (n,3,H,W) and masks (n,1,H,W), got {:?} and {:?}",
            images.shape(),
            masks.shape()
        )));
    }
    let img = resample_bilinear(images, res, res)?;
    let m = downsample_mask_max(masks, res, res)?;
    let plane = res * res;
    let mut data = Vec::with_capacity(n * 4 * plane);
    for b in 0..n {
        let mb = &m.data()[b * plane..][..plane];
        for ch in 0..3 {
            let src = &img.data()[(b * 3 + ch) * plane..][..plane];
            data.extend(src.iter().zip(mb).map(|(&v, &k)| v * (T::one() - k)));
        }
        data.extend_from_slice(mb);
    }
    Ok((Tensor::new(&[n, 4, res, res], data)?, m))
}

/// Encoder, FFC bottleneck and per-location parameter mapping.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    encoder: Vec<Conv2d>,
    blocks: Vec<BottleneckBlock>,
    mapping: Conv2d,
}

/// Gain of the feature part of the mapping, relative to a unit-variance init.
const MAPPING_GAIN: f64 = 0.1;

impl Generator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::with_capacity(config.n_downsamples);
        let mut ch = 4;
        for i in 0..config.n_downsamples {
            let out = config.base_channels << i;
            encoder.push(Conv2d::new(store, &format!("gen.enc{i}"), ch, out, 3, 2, 1, true, RELU_GAIN, rng));
            ch = out;
        }
        let blocks = (0..config.n_blocks)
            .map(|i| {
                BottleneckBlock::new(
                    config.block_kind,
                    store,
                    &format!("gen.block{i}"),
                    ch,
                    config.alpha,
                    config.norm,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let p = config.mlp.num_params();
        let map_in = ch + config.rcode_channels();
        let mapping = Conv2d::new(store, "gen.mapping", map_in, p, 1, 1, 0, true, MAPPING_GAIN, rng);
        // Every patch starts from the same well-scaled MLP.
        let base = config.mlp.init_params::<T>(rng);
        store
            .get_mut(mapping.bias.expect("mapping has a bias"))
            .data_mut()
            .copy_from_slice(&base);
        Ok(Self {
            config,
            encoder,
            blocks,
            mapping,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.config.grid_size()
    }

    /// Encoder plus bottleneck: `(n, 4, R, R)` to `(n, C, h, w)`.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, input: Var) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        let r = self.config.fixed_input_res;
        if shape.len() != 4 || shape[1] != 4 || shape[2] != r || shape[3] != r {
            return Err(Error::shape(format!("generator expects (n, 4, {r}, {r}) input, got {shape:?}")));
        }
        let mut x = input;
        for conv in &self.encoder {
            x = conv.forward(g, s, x)?;
            x = g.relu(x)?;
        }
        for b in &self.blocks {
            x = b.forward(g, s, x)?;
        }
        Ok(x)
    }

    /// Per-location linear map over features and the resolution code.
    pub fn map_params<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, feat: Var, rcodes: &[[f64; 2]]) -> Result<Var> {
        let [n, _, h, w] = *g.shape(feat) else {
            return Err(Error::shape("features must be 4-d"));
        };
        let x = if self.config.resolution_injection {
            if rcodes.len() != n {
                return Err(Error::shape(format!("{} resolution codes for batch of {n}", rcodes.len())));
            }
            let mut code = Vec::with_capacity(n * 2 * h * w);
            for rc in rcodes {
                for &v in rc {
                    code.extend(std::iter::repeat_n(lit::<T>(v), h * w));
                }
            }
            let code = g.constant(Tensor::new(&[n, 2, h, w], code)?)?;
            g.concat(&[feat, code])?
        } else {
            feat
        };
        self.mapping.forward(g, s, x)
    }

    /// `(n, 4, R, R)` input to `(n, P, h, w)` parameters.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, input: Var, rcodes: &[[f64; 2]]) -> Result<Var> {
        let f = self.features(g, s, input)?;
        self.map_params(g, s, f, rcodes)
    }

    pub fn num_mapping_params(&self) -> usize {
        self.mapping.num_params()
    }
}

/// Runs the generator once in inference mode on a single masked image.
pub fn generate_parameters(gen: &Generator, store: &ParamStore, input: &MaskedImage) -> Result<ParamMap> {
    let (h, w) = (input.height(), input.width());
    let images = input.image.clone().unsqueeze0();
    let masks = input.mask.clone().unsqueeze0();
    let (x, _) = prepare_input(&images, &masks, gen.config.fixed_input_res)?;
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(x)?;
    let rc = resolution_code(h, w, gen.config.fixed_input_res);
    let phi = gen.forward(&mut g, store, x, &[rc])?;
    ParamMap::from_batch(g.value(phi), 0, h, w)
}

/// Per-patch MLP parameter vectors on an `h x w` grid, stored patch-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMap<T: Real = f32> {
    p: usize,
    h: usize,
    w: usize,
    patches: Vec<T>,
    /// Output resolution the map was generated for.
    pub target_h: usize,
    pub target_w: usize,
}

impl<T: Real> ParamMap<T> {
    /// From a `(P, h, w)` grid.
    pub fn from_grid(grid: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Self> {
        let (p, h, w) = grid.dims3()?;
        let plane = h * w;
        let mut patches = vec![T::zero(); p * plane];
        for (k, chan) in grid.data().chunks_exact(plane).enumerate() {
            for (cell, &v) in chan.iter().enumerate() {
                patches[cell * p + k] = v;
            }
        }
        Ok(Self {
            p,
            h,
            w,
            patches,
            target_h,
            target_w,
        })
    }

    /// Item `b` of a `(n, P, h, w)` batch.
    pub fn from_batch(batch: &Tensor<T>, b: usize, target_h: usize, target_w: usize) -> Result<Self> {
        let (n, p, h, w) = batch.dims4()?;
        if b >= n {
            return Err(Error::shape(format!("batch index {b} out of range for {n}")));
        }
        let grid = Tensor::new(&[p, h, w], batch.data()[b * p * h * w..][..p * h * w].to_vec())?;
        Self::from_grid(&grid, target_h, target_w)
    }

    /// The `(P, h, w)` grid.
    pub fn grid(&self) -> Tensor<T> {
        let plane = self.h * self.w;
        let mut data = vec![T::zero(); self.p * plane];
        for (cell, v) in self.patches.chunks_exact(self.p).enumerate() {
            for (k, &x) in v.iter().enumerate() {
                data[k * plane + cell] = x;
            }
        }
        Tensor::new(&[self.p, self.h, self.w], data).expect("grid shape")
    }

    pub fn param_len(&self) -> usize {
        self.p
    }

    pub fn grid_h(&self) -> usize {
        self.h
    }

    pub fn grid_w(&self) -> usize {
        self.w
    }

    pub fn patch(&self, iy: usize, ix: usize) -> &[T] {
        &self.patches[(iy * self.w + ix) * self.p..][..self.p]
    }

    pub fn patch_flat(&self, idx: usize) -> &[T] {
        &self.patches[idx * self.p..][..self.p]
    }

    /// Nearest-neighbour view at `height x width` without materializing it.
    pub fn upsampled(&self, height: usize, width: usize) -> Result<UpsampledParams<'_, T>> {
        if height < self.h || width < self.w {
            return Err(Error::InvalidArgument(format!(
                "output {height}x{width} is smaller than the {}x{} parameter grid",
                self.h, self.w
            )));
        }
        Ok(UpsampledParams {
            map: self,
            height,
            width,
        })
    }
}

/// Logical `(P, H, W)` view of a [`ParamMap`].
#[derive(Clone, Copy, Debug)]
pub struct UpsampledParams<'a, T: Real = f32> {
    pub map: &'a ParamMap<T>,
    pub height: usize,
    pub width: usize,
}

impl<'a, T: Real> UpsampledParams<'a, T> {
    /// Patch coordinates for integer pixel `(y, x)`.
    pub fn patch_of(&self, y: usize, x: usize) -> (usize, usize) {
        (y * self.map.h / self.height, x * self.map.w / self.width)
    }

    pub fn at(&self, y: usize, x: usize) -> &'a [T] {
        let (iy, ix) = self.patch_of(y, x);
        self.map.patch(iy, ix)
    }
}

/// Patches whose low-resolution mask cell is set, as `(flat index, params)`.
pub fn select_masked_patches<'a, T: Real>(map: &'a ParamMap<T>, mask_lowres: &Tensor<T>) -> Result<Vec<(usize, &'a [T])>> {
    let s = mask_lowres.shape();
    if s.len() < 2 || s[s.len() - 2..] != [map.h, map.w] || mask_lowres.len() != map.h * map.w {
        return Err(Error::shape(format!(
            "mask {:?} does not match the {}x{} grid",
            mask_lowres.shape(),
            map.h,
            map.w
        )));
    }
    Ok(mask_lowres
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > T::zero())
        .map(|(i, _)| (i, map.patch_flat(i)))
        .collect())
}

impl MlpSpec {
    /// Packed parameters of a freshly initialized MLP.
    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        let last = self.layer_sizes.len() - 2;
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            let (i, o) = (pair[0], pair[1]);
            let gain = if l == last || self.hidden_activation != Activation::Relu {
                1.0
            } else {
                RELU_GAIN
            };
            out.extend(uniform_init::<T>(&[o, i], i, gain, rng).into_data());
            out.extend(uniform_init::<T>(&[o], i, 1.0, rng).into_data());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            fixed_input_res: 16,
            base_channels: 4,
            n_blocks: 2,
            ..GeneratorConfig::default()
        }
    }

    fn random_masked(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MaskedImage {
        let image = Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0));
        let mask = Tensor::from_fn(&[1, h, w], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        MaskedImage::new(image, mask).unwrap()
    }

    #[test]
    fn default_grid_and_param_count() {
        let c = GeneratorConfig::default();
        assert_eq!(c.grid_size(), 16);
        assert_eq!(c.mlp.num_params(), 4 * 32 + 32 + 32 * 32 + 32 + 32 * 32 + 32 + 32 * 3 + 3);
        assert_eq!(c.mlp.num_params(), 2371);
    }

    #[test]
    fn indivisible_resolution_is_a_config_error() {
        let c = GeneratorConfig {
            fixed_input_res: 62,
            ..GeneratorConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_is_p_h_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let gen = Generator::new(&mut store, small_config(), &mut rng).unwrap();
        let input = random_masked(&mut rng, 40, 24);
        let map = generate_parameters(&gen, &store, &input).unwrap();
        assert_eq!(map.grid().shape(), &[2371, 4, 4]);
        assert_eq!((map.target_h, map.target_w), (40, 24));
    }

    #[test]
    fn resolution_code_changes_the_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let gen = Generator::new(&mut store, small_config(), &mut rng).unwrap();
        let a = random_masked(&mut rng, 16, 16);
        // Same content at twice the resolution resamples to the same input.
        let (x, _) = prepare_input(&a.image.clone().unsqueeze0(), &a.mask.clone().unsqueeze0(), 16).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let xv = g.constant(x).unwrap();
        let p1 = gen.forward(&mut g, &store, xv, &[resolution_code(16, 16, 16)]).unwrap();
        let p2 = gen.forward(&mut g, &store, xv, &[resolution_code(64, 64, 16)]).unwrap();
        let p3 = gen.forward(&mut g, &store, xv, &[resolution_code(16, 16, 16)]).unwrap();
        assert!(g.value(p1).max_abs_diff(g.value(p2)) > 0.0);
        assert_eq!(g.value(p1), g.value(p3));
    }

    #[test]
    fn identical_resampled_input_and_code_give_identical_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let gen = Generator::new(&mut store, small_config(), &mut rng).unwrap();
        let a = random_masked(&mut rng, 32, 32);
        let m1 = generate_parameters(&gen, &store, &a).unwrap();
        let m2 = generate_parameters(&gen, &store, &a).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn masked_input_zeroes_holes() {
        let img = Tensor::full(&[1, 3, 8, 8], 0.7f32);
        let mut mask = Tensor::zeros(&[1, 1, 8, 8]);
        mask.data_mut()[3 * 8 + 5] = 1.0;
        let (x, m) = prepare_input(&img, &mask, 4).unwrap();
        assert_eq!(m.data().iter().filter(|&&v| v == 1.0).count(), 1);
        let cell = 4 + 2;
        for c in 0..3 {
            assert_eq!(x.data()[c * 16 + cell], 0.0);
            assert_eq!(x.data()[c * 16], 0.7);
        }
        assert_eq!(x.data()[3 * 16 + cell], 1.0);
    }

    #[test]
    fn masked_image_validation() {
        let img = Tensor::zeros(&[3, 4, 4]);
        assert!(MaskedImage::new(img.clone(), Tensor::zeros(&[1, 4, 5])).is_err());
        assert!(MaskedImage::new(img.clone(), Tensor::full(&[1, 4, 4], 0.5)).is_err());
        assert!(MaskedImage::new(img, Tensor::zeros(&[1, 4, 4])).is_ok());
    }

    fn random_map(rng: &mut ChaCha8Rng, p: usize, h: usize, w: usize) -> ParamMap {
        ParamMap::from_grid(&Tensor::from_fn(&[p, h, w], |_| rng.gen_range(-1.0..1.0)), h, w).unwrap()
    }

    #[test]
    fn grid_roundtrip_and_patch_access() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Tensor::<f32>::from_fn(&[5, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let map = ParamMap::from_grid(&grid, 3, 4).unwrap();
        assert_eq!(map.grid(), grid);
        for k in 0..5 {
            assert_eq!(map.patch(2, 1)[k], grid.data()[k * 12 + 2 * 4 + 1]);
        }
    }

    #[test]
    fn selection_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = random_map(&mut rng, 7, 4, 4);
        let none = select_masked_patches(&map, &Tensor::zeros(&[4, 4])).unwrap();
        assert!(none.is_empty());
        let all = select_masked_patches(&map, &Tensor::full(&[1, 4, 4], 1.0)).unwrap();
        assert_eq!(all.len(), 16);
        let m = Tensor::from_fn(&[4, 4], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let sel = select_masked_patches(&map, &m).unwrap();
        let mut want = Vec::new();
        for iy in 0..4 {
            for ix in 0..4 {
                if m.data()[iy * 4 + ix] == 1.0 {
                    want.push((iy * 4 + ix, map.patch(iy, ix)));
                }
            }
        }
        assert_eq!(sel, want);
        assert!(select_masked_patches(&map, &Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn upsampled_view_tiles_and_matches_index_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = random_map(&mut rng, 3, 2, 2);
        let v = map.upsampled(4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(v.at(y, x), map.patch(y / 2, x / 2));
            }
        }
        let id = map.upsampled(2, 2).unwrap();
        assert_eq!(id.at(1, 0), map.patch(1, 0));

        let map = random_map(&mut rng, 3, 5, 7);
        let v = map.upsampled(37, 90).unwrap();
        for _ in 0..20 {
            let (y, x) = (rng.gen_range(0..37), rng.gen_range(0..90));
            assert_eq!(v.at(y, x), map.patch((y * 5) / 37, (x * 7) / 90));
        }
        assert!(map.upsampled(4, 90).is_err());
    }
}
