//! A generator paired with one of the decoders.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::coord_query::{self, InpaintResult, PhaseTimings};
use crate::decoders::{ConvDecoder, DecoderKind, MlpDecoder};
use crate::error::{Error, Result};
use crate::param_gen::{prepare_input, resolution_code, Generator, GeneratorConfig, MaskedImage};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub decoder: DecoderKind,
    /// Largest output side the conv decoder upsamples to natively.
    pub max_output_res: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            decoder: DecoderKind::PixelQuery,
            max_output_res: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.max_output_res == 0 {
            return Err(Error::config("max_output_res must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    PixelQuery,
    Conv(ConvDecoder),
    Mlp(MlpDecoder),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub generator: Generator,
    pub decoder: Decoder,
}

impl Model {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(store, config.generator.clone(), rng)?;
        let ch = config.generator.feature_channels();
        let decoder = match config.decoder {
            DecoderKind::PixelQuery => Decoder::PixelQuery,
            DecoderKind::Conv => {
                let layers = ConvDecoder::layers_for(generator.grid_size(), config.max_output_res);
                let width = ConvDecoder::width_for_budget(ch, layers, generator.num_mapping_params());
                Decoder::Conv(ConvDecoder::new(store, "dec", ch, width, layers, rng)?)
            }
            DecoderKind::Mlp => Decoder::Mlp(MlpDecoder::new(store, "dec", ch, &config.generator.mlp, rng)?),
        };
        Ok(Self {
            config,
            generator,
            decoder,
        })
    }

    /// Raw decoder output `(n, 3, H, W)` for a batch of images and masks.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, images: &Tensor<T>, masks: &Tensor<T>) -> Result<Var> {
        let (n, _, h, w) = images.dims4()?;
        let res = self.config.generator.fixed_input_res;
        let (x, _) = prepare_input(images, masks, res)?;
        let x = g.constant(x)?;
        let feat = self.generator.features(g, s, x)?;
        match &self.decoder {
            Decoder::PixelQuery => {
                let rc = vec![resolution_code(h, w, res); n];
                let phi = self.generator.map_params(g, s, feat, &rc)?;
                coord_query::query_decode(g, phi, &self.config.generator.mlp, h, w)
            }
            Decoder::Conv(d) => d.forward(g, s, feat, h, w),
            Decoder::Mlp(d) => d.forward(g, s, feat, h, w),
        }
    }

    /// `images * (1 - masks) + out * masks`; gradients reach `out` only in holes.
    pub fn composite<T: Real>(g: &mut Graph<T>, out: Var, images: &Tensor<T>, masks: &Tensor<T>) -> Result<Var> {
        let (n, c, h, w) = images.dims4()?;
        let plane = h * w;
        let mut m3 = Vec::with_capacity(n * c * plane);
        let mut known = Vec::with_capacity(n * c * plane);
        for b in 0..n {
            let mb = &masks.data()[b * plane..][..plane];
            for ch in 0..c {
                let ib = &images.data()[(b * c + ch) * plane..][..plane];
                m3.extend_from_slice(mb);
                known.extend(ib.iter().zip(mb).map(|(&v, &m)| v * (T::one() - m)));
            }
        }
        let m3 = g.constant(Tensor::new(&[n, c, h, w], m3)?)?;
        let known = g.constant(Tensor::new(&[n, c, h, w], known)?)?;
        let hole = g.mul(out, m3)?;
        g.add(known, hole)
    }

    /// Inference on one image. The pixel-query decoder only evaluates hole
    /// pixels; the baselines synthesize the full image and paste back.
    pub fn inpaint(&self, store: &ParamStore, input: &MaskedImage, workers: usize) -> Result<InpaintResult> {
        if let Decoder::PixelQuery = self.decoder {
            return coord_query::inpaint(&self.generator, store, input, workers);
        }
        let start = Instant::now();
        let holes = input.hole_count();
        if holes == 0 {
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
        let images = input.image.clone().unsqueeze0();
        let masks = input.mask.clone().unsqueeze0();
        let mut g = Graph::new(Mode::Eval);
        let out = self.forward(&mut g, store, &images, &masks)?;
        let comp = Self::composite(&mut g, out, &images, &masks)?;
        let (h, w) = (input.height(), input.width());
        let image = Tensor::new(&[3, h, w], g.value(comp).data().to_vec())?;
        let total = start.elapsed();
        Ok(InpaintResult {
            image,
            decoded_pixels: h * w,
            mults: 0,
            timings: PhaseTimings {
                paramgen: total,
                query: Default::default(),
                total,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(decoder: DecoderKind) -> ModelConfig {
        ModelConfig {
            generator: GeneratorConfig {
                fixed_input_res: 16,
                base_channels: 4,
                n_blocks: 1,
                ..GeneratorConfig::default()
            },
            decoder,
            max_output_res: 32,
        }
    }

    #[test]
    fn every_decoder_keeps_known_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [DecoderKind::PixelQuery, DecoderKind::Conv, DecoderKind::Mlp] {
            let mut store = ParamStore::new();
            let model = Model::new(&mut store, tiny(kind), &mut rng).unwrap();
            let image = Tensor::from_fn(&[3, 20, 24], |_| rng.gen_range(0.0..1.0));
            let mask = Tensor::from_fn(&[1, 20, 24], |_| if rng.gen_bool(0.25) { 1.0 } else { 0.0 });
            let input = MaskedImage::new(image.clone(), mask.clone()).unwrap();
            let r = model.inpaint(&store, &input, 2).unwrap();
            for c in 0..3 {
                for p in 0..480 {
                    if mask.data()[p] == 0.0 {
                        assert_eq!(r.image.data()[c * 480 + p], image.data()[c * 480 + p]);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_baseline_matches_mapping_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&mut store, tiny(DecoderKind::Conv), &mut rng).unwrap();
        let Decoder::Conv(d) = &model.decoder else { unreachable!() };
        let budget = model.generator.num_mapping_params() as f64;
        assert!((d.num_params() as f64 / budget - 1.0).abs() <= 0.1);
    }

    use rand::Rng;
}
