//! Baseline decoders that synthesize the full image from bottleneck features.
//!
//! [`ConvDecoder`] upsamples with transposed convolutions, mirroring the
//! encoder. [`MlpDecoder`] copies each feature vector to every pixel of its
//! patch and runs one shared MLP per pixel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::coord_query::MlpSpec;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d};
use crate::params::{ParamStore, RELU_GAIN};
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    #[serde(alias = "pixel-query", alias = "query")]
    PixelQuery,
    #[serde(alias = "d_conv", alias = "dconv")]
    Conv,
    #[serde(alias = "d_mlp", alias = "dmlp")]
    Mlp,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "pixelquery" | "query" => Ok(Self::PixelQuery),
            "conv" | "dconv" => Ok(Self::Conv),
            "mlp" | "dmlp" => Ok(Self::Mlp),
            other => Err(Error::config(format!("unknown decoder kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PixelQuery => "pixel_query",
            Self::Conv => "conv",
            Self::Mlp => "mlp",
        })
    }
}

/// Transposed-convolution decoder: `layers` x (4x4 stride-2 up-conv, ReLU),
/// then a 3x3 conv to RGB and a sigmoid. Output is `grid * 2^layers` and
/// nearest-resampled to the requested size if that differs.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    ups: Vec<ConvTranspose2d>,
    head: Conv2d,
    pub width: usize,
}

impl ConvDecoder {
    /// Parameter count for the given geometry.
    pub fn count_params(in_ch: usize, width: usize, layers: usize) -> usize {
        let first = in_ch * width * 16 + width;
        let rest = layers.saturating_sub(1) * (width * width * 16 + width);
        first + rest + width * 3 * 9 + 3
    }

    /// Width whose parameter count is closest to `budget`.
    pub fn width_for_budget(in_ch: usize, layers: usize, budget: usize) -> usize {
        (1..=1024)
            .min_by_key(|&w| Self::count_params(in_ch, w, layers).abs_diff(budget))
            .unwrap()
    }

    /// Upsampling steps needed to reach `target` from `grid`.
    pub fn layers_for(grid: usize, target: usize) -> usize {
        let mut l = 0;
        while grid << l < target {
            l += 1;
        }
        l.max(1)
    }

    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        width: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if width == 0 || layers == 0 {
            return Err(Error::config("conv decoder needs width and layers >= 1"));
        }
        let ups = (0..layers)
            .map(|i| {
                let cin = if i == 0 { in_ch } else { width };
                ConvTranspose2d::new(store, &format!("{name}.up{i}"), cin, width, 4, 2, 1, RELU_GAIN, rng)
            })
            .collect();
        let head = Conv2d::new(store, &format!("{name}.head"), width, 3, 3, 1, 1, true, 1.0, rng);
        Ok(Self { ups, head, width })
    }

    pub fn num_params(&self) -> usize {
        self.ups.iter().map(|u| u.num_params()).sum::<usize>() + self.head.num_params()
    }

    pub fn layers(&self) -> usize {
        self.ups.len()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, feat: Var, height: usize, width: usize) -> Result<Var> {
        let mut x = feat;
        for up in &self.ups {
            x = up.forward(g, s, x)?;
            x = g.relu(x)?;
        }
        x = self.head.forward(g, s, x)?;
        x = g.sigmoid(x)?;
        let shape = g.shape(x);
        if shape[2] != height || shape[3] != width {
            x = g.resample_nearest(x, height, width)?;
        }
        Ok(x)
    }
}

/// Shared per-pixel MLP over nearest-upsampled features and the positional
/// encoding, implemented as 1x1 convolutions.
#[derive(Clone, Debug)]
pub struct MlpDecoder {
    layers: Vec<Conv2d>,
    spec: MlpSpec,
}

impl MlpDecoder {
    /// Hidden widths and activations are taken from `spec`; the input width
    /// becomes `in_ch` plus the encoding width.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_ch: usize, spec: &MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut sizes = spec.layer_sizes.clone();
        sizes[0] += in_ch;
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { 1.0 } else { RELU_GAIN };
                Conv2d::new(store, &format!("{name}.fc{i}"), sizes[i], sizes[i + 1], 1, 1, 0, true, gain, rng)
            })
            .collect();
        Ok(Self {
            layers,
            spec: spec.clone(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, feat: Var, height: usize, width: usize) -> Result<Var> {
        let [n, _, h, w] = *g.shape(feat) else {
            return Err(Error::shape("features must be 4-d"));
        };
        let up = g.resample_nearest(feat, height, width)?;
        let pe = positional_planes::<T>(n, h, w, height, width, self.spec.n_freq)?;
        let pe = g.constant(pe)?;
        let mut x = g.concat(&[up, pe])?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, s, x)?;
            let act = if i == last {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            x = g.activation(x, act)?;
        }
        Ok(x)
    }
}

/// The pixel-query encoding laid out as `(n, 4 * n_freq, H, W)` planes.
pub fn positional_planes<T: Real>(n: usize, h: usize, w: usize, height: usize, width: usize, n_freq: usize) -> Result<Tensor<T>> {
    let (ex, ey) = (width as f64 / w as f64, height as f64 / h as f64);
    let c = 4 * n_freq;
    let plane = height * width;
    let mut one = vec![T::zero(); c * plane];
    for y in 0..height {
        for x in 0..width {
            let e = crate::coord_query::encode_position(x as f64, y as f64, ex, ey, n_freq)?;
            for (k, v) in e.into_iter().enumerate() {
                one[k * plane + y * width + x] = lit(v);
            }
        }
    }
    let mut data = Vec::with_capacity(n * one.len());
    for _ in 0..n {
        data.extend_from_slice(&one);
    }
    Tensor::new(&[n, c, height, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count_formula_matches_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let d = ConvDecoder::new(&mut store, "d", 32, 12, 3, &mut rng).unwrap();
        assert_eq!(d.num_params(), ConvDecoder::count_params(32, 12, 3));
        assert_eq!(store.num_params(), d.num_params());
    }

    #[test]
    fn budget_matching_is_within_ten_percent() {
        for (layers, budget) in [(3, 83_000), (7, 83_000), (2, 20_000)] {
            let w = ConvDecoder::width_for_budget(32, layers, budget);
            let got = ConvDecoder::count_params(32, w, layers) as f64;
            assert!((got / budget as f64 - 1.0).abs() <= 0.1, "{layers} {w} {got}");
        }
        assert_eq!(ConvDecoder::layers_for(8, 64), 3);
        assert_eq!(ConvDecoder::layers_for(8, 1024), 7);
        assert_eq!(ConvDecoder::layers_for(8, 40), 3);
    }

    #[test]
    fn decoders_produce_requested_shape_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let conv = ConvDecoder::new(&mut store, "c", 8, 6, 2, &mut rng).unwrap();
        let mlp = MlpDecoder::new(&mut store, "m", 8, &MlpSpec::default(), &mut rng).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let f = g
            .constant(Tensor::from_fn(&[2, 8, 4, 4], |_| rng.gen_range(-1.0..1.0)))
            .unwrap();
        for (h, w) in [(16, 16), (13, 10)] {
            let a = conv.forward(&mut g, &store, f, h, w).unwrap();
            let b = mlp.forward(&mut g, &store, f, h, w).unwrap();
            for v in [a, b] {
                assert_eq!(g.shape(v), &[2, 3, h, w]);
                assert!(g.value(v).data().iter().all(|&x| x > 0.0 && x < 1.0));
            }
        }
    }

    #[test]
    fn decoder_kind_parses() {
        assert_eq!("D_Conv".parse::<DecoderKind>().unwrap(), DecoderKind::Conv);
        assert_eq!("pixel-query".parse::<DecoderKind>().unwrap(), DecoderKind::PixelQuery);
        assert_eq!("d_mlp".parse::<DecoderKind>().unwrap(), DecoderKind::Mlp);
        assert!("unet".parse::<DecoderKind>().is_err());
    }

    use rand::Rng;
}
