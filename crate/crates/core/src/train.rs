//! Adversarial training loop and held-out evaluation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::data::{generate_mask, synth_dataset, MaskSpec};
use crate::error::{Error, Result};
use crate::image_io::{read_image, read_manifest, read_mask_dir};
use crate::kernels::{resample_bilinear, resample_nearest};
use crate::losses::{self, proxy_perceptual_distance, Discriminator, DiscriminatorConfig, FeatureExtractor, LossWeights};
use crate::metrics::{cap_psnr, psnr, psnr_masked, ssim, ssim_masked};
use crate::model::{Model, ModelConfig};
use crate::param_gen::MaskedImage;
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

/// Size of the procedural dataset used by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDataConfig {
    pub train: usize,
    pub held_out: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        Self {
            train: 64,
            held_out: 16,
            size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Compute every loss on the paste-back composite.
    pub masked_prediction: bool,
    /// Inclusive range of the square side each batch is resized to.
    pub resize: (usize, usize),
    pub masks: MaskSpec,
    pub seed: u64,
    pub bn_momentum: f64,
    pub extractor_seed: u64,
    pub extractor: ExtractorKind,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub data: SynthDataConfig,
    /// JSON list of image paths used instead of the procedural set; the
    /// last `data.held_out` entries are held out.
    pub image_manifest: Option<PathBuf>,
    /// Directory of PNG masks sampled instead of procedural ones.
    pub mask_dir: Option<PathBuf>,
}

/// Desk defaults: 200 steps on 64 procedural 32x32 images, with a higher
/// learning rate and lighter adversarial terms than [`TrainConfig::published`].
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            weights: LossWeights {
                perceptual: 10.0,
                adversarial: 0.1,
                feature_matching: 1.0,
            },
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            epochs: 25,
            batch_size: 8,
            masked_prediction: true,
            resize: (32, 32),
            masks: MaskSpec::default(),
            seed: 0,
            bn_momentum: 0.1,
            extractor_seed: 7,
            extractor: ExtractorKind::default(),
            checkpoint_every: 0,
            data: SynthDataConfig::default(),
            image_manifest: None,
            mask_dir: None,
        }
    }
}

impl TrainConfig {
    /// Published loss weights (10, 1, 100), learning rate 1e-4 and resize
    /// range 32..=64, on the desk model and data.
    pub fn published() -> Self {
        Self {
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            resize: (32, 64),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.masks.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        let (lo, hi) = self.resize;
        if lo < 16 || lo > hi {
            return Err(Error::config(format!("resize range ({lo}, {hi}) must satisfy 16 <= min <= max")));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("learning rate must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum outside [0, 1]"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which frozen features the perceptual loss compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Four random conv layers.
    #[default]
    RandomConv,
    /// The raw image plus the four conv layers.
    RandomConvPixels,
    /// Only the raw image: plain L1.
    Pixels,
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_per: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_fm: f64,
    pub total: f64,
}

pub fn write_history(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Generator, discriminator, their optimizers and the frozen extractor.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub disc: Discriminator,
    pub disc_store: ParamStore,
    extractor: FeatureExtractor,
    mask_pool: Vec<Tensor>,
    g_opt: Adam,
    d_opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    Tensor::stack(parts)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, config.model.clone(), &mut rng)?;
        let mut disc_store = ParamStore::new();
        let disc = Discriminator::new(&mut disc_store, &config.discriminator, &mut rng)?;
        let extractor = match config.extractor {
            ExtractorKind::RandomConv => FeatureExtractor::random_conv(config.extractor_seed),
            ExtractorKind::RandomConvPixels => FeatureExtractor::random_conv(config.extractor_seed).with_pixel_tap(),
            ExtractorKind::Pixels => FeatureExtractor::pixels(),
        };
        let mask_pool = match &config.mask_dir {
            Some(dir) => {
                let pool = read_mask_dir(dir)?;
                if pool.is_empty() {
                    return Err(Error::config(format!("no PNG masks in {}", dir.display())));
                }
                pool
            }
            None => Vec::new(),
        };
        Ok(Self {
            mask_pool,
            g_opt: Adam::new(config.adam.clone()),
            d_opt: Adam::new(config.adam.clone()),
            config,
            model,
            store,
            disc,
            disc_store,
            extractor,
            rng,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Resizes a batch to a random square side and draws fresh masks.
    fn prepare_batch(&mut self, images: &[&Tensor]) -> Result<(Tensor, Tensor)> {
        let (lo, hi) = self.config.resize;
        let side = self.rng.gen_range(lo..=hi);
        let mut imgs = Vec::with_capacity(images.len());
        let mut masks = Vec::with_capacity(images.len());
        for img in images {
            let (c, h, w) = img.dims3()?;
            if c != 3 {
                return Err(Error::shape(format!("training images need 3 channels, got {c}")));
            }
            let x = if (h, w) == (side, side) {
                (*img).clone()
            } else {
                let r = resample_bilinear(&(*img).clone().unsqueeze0(), side, side)?;
                Tensor::new(&[3, side, side], r.into_data())?
            };
            imgs.push(x);
            let mask = if self.mask_pool.is_empty() {
                generate_mask(&self.config.masks.clone().with_seed(self.rng.gen()), side, side)?
            } else {
                let m = &self.mask_pool[self.rng.gen_range(0..self.mask_pool.len())];
                fit_mask(m, side, side)?
            };
            masks.push(mask);
        }
        Ok((stack(&imgs)?, stack(&masks)?))
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, images: &[&Tensor]) -> Result<LossRecord> {
        let (gt, masks) = self.prepare_batch(images)?;
        let step = self.step + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { step },
            other => other,
        };

        let mut g = Graph::new(Mode::Train);
        g.train_store(&self.store);
        let out = self.model.forward(&mut g, &self.store, &gt, &masks).map_err(diverged)?;
        let pred = if self.config.masked_prediction {
            Model::composite(&mut g, out, &gt, &masks)?
        } else {
            out
        };

        // Discriminator step on the detached prediction.
        let l_adv_d = {
            let mut dg = Graph::new(Mode::Train);
            dg.train_store(&self.disc_store);
            let real = dg.constant(gt.clone())?;
            let fake = dg.constant(g.value(pred).clone())?;
            let (rl, _) = self.disc.forward(&mut dg, &self.disc_store, real)?;
            let (fl, _) = self.disc.forward(&mut dg, &self.disc_store, fake)?;
            let d = losses::d_loss(&mut dg, rl, fl)?;
            let v = dg.value(d).item() as f64;
            let grads = dg.backward(d)?;
            let sg = dg.store_grads(&grads, &self.disc_store);
            self.d_opt.step(&mut self.disc_store, &sg)?;
            v
        };

        // Generator step against the updated discriminator.
        let gt_var = g.constant(gt.clone())?;
        let per = losses::perceptual_loss(&mut g, &self.extractor, pred, gt_var)?;
        let (fl, fake_acts) = self.disc.forward(&mut g, &self.disc_store, pred)?;
        let (_, real_acts) = self.disc.forward(&mut g, &self.disc_store, gt_var)?;
        let adv = losses::g_loss(&mut g, fl).map_err(diverged)?;
        let fm = losses::feature_matching_loss(&mut g, &real_acts, &fake_acts)?;
        let total = losses::total_loss_var(&mut g, per, adv, fm, &self.config.weights).map_err(diverged)?;
        let rec = LossRecord {
            step,
            l_per: g.value(per).item() as f64,
            l_adv_g: g.value(adv).item() as f64,
            l_adv_d,
            l_fm: g.value(fm).item() as f64,
            total: g.value(total).item() as f64,
        };
        if !rec.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = g.backward(total)?;
        let sg = g.store_grads(&grads, &self.store);
        self.g_opt.step(&mut self.store, &sg)?;
        self.store.apply_stat_updates(&g, self.config.bn_momentum);
        self.step = step;
        Ok(rec)
    }

    /// Runs `config.epochs` shuffled passes over `images`, calling `on_epoch`
    /// after each with the epoch number (1-based).
    pub fn run(
        &mut self,
        images: &[Tensor],
        mut on_epoch: impl FnMut(usize, &Trainer) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        if images.is_empty() && self.config.epochs > 0 {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut history = Vec::new();
        let mut order: Vec<usize> = (0..images.len()).collect();
        for epoch in 1..=self.config.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
                let rec = self.train_step(&batch)?;
                log::debug!("step {} total {:.4}", rec.step, rec.total);
                history.push(rec);
            }
            on_epoch(epoch, self)?;
        }
        Ok(history)
    }
}

/// Trains on `images` and returns the trainer with its loss history.
pub fn train(images: &[Tensor], config: TrainConfig) -> Result<(Trainer, Vec<LossRecord>)> {
    let mut t = Trainer::new(config)?;
    let history = t.run(images, |_, _| Ok(()))?;
    Ok((t, history))
}

/// Nearest-resamples a `(1, h, w)` mask to `(1, H, W)`.
pub fn fit_mask(mask: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = mask.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("masks need 1 channel, got {c}")));
    }
    if (h, w) == (height, width) {
        return Ok(mask.clone());
    }
    let r = resample_nearest(&mask.clone().unsqueeze0(), height, width)?;
    Tensor::new(&[1, height, width], r.into_data())
}

/// Training images, held-out images and one mask per held-out image, as
/// fixed by `config.data` (or the manifest and mask directory when set).
pub fn load_data(config: &TrainConfig) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)> {
    let d = &config.data;
    let mask_seed = d.seed.wrapping_add(77);
    let (train_set, held_out) = match &config.image_manifest {
        None => (
            synth_dataset(d.train, d.size, d.size, d.seed),
            synth_dataset(d.held_out, d.size, d.size, d.seed.wrapping_add(1_000_003)),
        ),
        Some(path) => {
            let mut images = read_manifest(path)?.iter().map(read_image).collect::<Result<Vec<_>>>()?;
            if images.len() <= d.held_out {
                return Err(Error::config(format!(
                    "manifest lists {} images but {} are held out",
                    images.len(),
                    d.held_out
                )));
            }
            let held = images.split_off(images.len() - d.held_out);
            (images, held)
        }
    };
    let masks = match &config.mask_dir {
        Some(dir) => {
            let pool: Vec<Tensor> = read_mask_dir(dir)?
                .into_iter()
                .filter(|m| m.data().iter().any(|&v| v > 0.5))
                .collect();
            if pool.is_empty() && !held_out.is_empty() {
                return Err(Error::config(format!("no non-empty PNG masks in {}", dir.display())));
            }
            held_out
                .iter()
                .enumerate()
                .map(|(i, img)| fit_mask(&pool[i % pool.len()], img.shape()[1], img.shape()[2]))
                .collect::<Result<_>>()?
        }
        None if config.image_manifest.is_none() => eval_masks(&config.masks, d.held_out, d.size, d.size, mask_seed)?,
        None => held_out
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let (h, w) = (img.shape()[1], img.shape()[2]);
                Ok(eval_masks(&config.masks, 1, h, w, mask_seed.wrapping_add(1000 * i as u64))?.remove(0))
            })
            .collect::<Result<_>>()?,
    };
    Ok((train_set, held_out, masks))
}

/// Seed of the extractor behind [`EvalReport::proxy_perceptual`]; distinct
/// from the default training extractor.
pub const PROXY_EXTRACTOR_SEED: u64 = 1234;

/// Hole pixels replaced by the per-channel mean of the known pixels.
pub fn mean_fill(input: &MaskedImage) -> Tensor {
    let plane = input.height() * input.width();
    let m = input.mask.data();
    let mut out = input.image.clone();
    let known = m.iter().filter(|&&v| v < 0.5).count().max(1);
    for c in 0..3 {
        let ch = &mut out.data_mut()[c * plane..][..plane];
        let mean = ch.iter().zip(m).filter(|(_, &mv)| mv < 0.5).map(|(&v, _)| v as f64).sum::<f64>() / known as f64;
        for (v, &mv) in ch.iter_mut().zip(m) {
            if mv > 0.5 {
                *v = mean as f32;
            }
        }
    }
    out
}

/// Averages over a held-out set; PSNR values are capped before averaging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_masked: f64,
    pub ssim_masked: f64,
    pub mean_fill_psnr_masked: f64,
    /// Mean random-feature distance to the ground truth; not LPIPS.
    pub proxy_perceptual: f64,
    pub images: usize,
}

/// Held-out masks, deterministic in `seed`; images without holes are given
/// a fresh draw.
pub fn eval_masks(spec: &MaskSpec, n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(n);
    let mut s = seed;
    while out.len() < n {
        let m = generate_mask(&spec.clone().with_seed(s), h, w)?;
        s = s.wrapping_add(1);
        if m.data().iter().any(|&v| v > 0.5) {
            out.push(m);
        }
    }
    Ok(out)
}

pub fn evaluate(model: &Model, store: &ParamStore, images: &[Tensor], masks: &[Tensor]) -> Result<EvalReport> {
    if images.len() != masks.len() || images.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs one mask per image".into()));
    }
    let ext = FeatureExtractor::random_conv(PROXY_EXTRACTOR_SEED);
    let mut r = EvalReport {
        images: images.len(),
        ..EvalReport::default()
    };
    for (img, m) in images.iter().zip(masks) {
        let input = MaskedImage::new(img.clone(), m.clone())?;
        let out = model.inpaint(store, &input, 1)?;
        r.psnr += cap_psnr(psnr(&out.image, img)?);
        r.ssim += ssim(&out.image, img)?;
        r.psnr_masked += cap_psnr(psnr_masked(&out.image, img, m)?);
        r.ssim_masked += ssim_masked(&out.image, img, m)?;
        r.mean_fill_psnr_masked += cap_psnr(psnr_masked(&mean_fill(&input), img, m)?);
        r.proxy_perceptual += proxy_perceptual_distance(&ext, &out.image, img)?;
    }
    let n = images.len() as f64;
    r.psnr /= n;
    r.ssim /= n;
    r.psnr_masked /= n;
    r.ssim_masked /= n;
    r.mean_fill_psnr_masked /= n;
    r.proxy_perceptual /= n;
    Ok(r)
}
