//! Perceptual, adversarial and feature-matching losses, and the patch
//! discriminator they use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::Activation;
use crate::nn::Conv2d;
use crate::params::{ParamStore, RELU_GAIN};
use crate::tensor::{lit, Real, Tensor};

/// A frozen feature extractor with per-tap weights. Its weights live in its
/// own store, which is never registered for training.
#[derive(Debug)]
pub struct FeatureExtractor<T: Real = f32> {
    store: ParamStore<T>,
    layers: Vec<Conv2d>,
    /// Tap on the raw input before any layer.
    pixel_tap: bool,
    weights: Vec<f64>,
}

impl<T: Real> FeatureExtractor<T> {
    /// Randomly initialized 4-layer conv stack (3x3, ReLU, every other layer
    /// strided), tapped after each layer with uniform weights.
    pub fn random_conv(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let chans = [3, 16, 16, 32, 32];
        let layers: Vec<Conv2d> = (0..4)
            .map(|i| {
                let stride = if i % 2 == 1 { 2 } else { 1 };
                Conv2d::new(&mut store, &format!("ext{i}"), chans[i], chans[i + 1], 3, stride, 1, true, RELU_GAIN, &mut rng)
            })
            .collect();
        let n = layers.len();
        Self {
            store,
            layers,
            pixel_tap: false,
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// The raw image as the only tap, so the loss reduces to L1.
    pub fn pixels() -> Self {
        Self {
            store: ParamStore::new(),
            layers: Vec::new(),
            pixel_tap: true,
            weights: vec![1.0],
        }
    }

    /// Adds a raw-pixel tap in front of the conv taps; weights stay uniform.
    pub fn with_pixel_tap(mut self) -> Self {
        if !self.pixel_tap {
            self.pixel_tap = true;
            let n = self.weights.len() + 1;
            self.weights = vec![1.0 / n as f64; n];
        }
        self
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.weights.len() || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::config(format!(
                "expected {} non-negative tap weights, got {weights:?}",
                self.weights.len()
            )));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn tap_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let mut taps = Vec::with_capacity(self.weights.len());
        if self.pixel_tap {
            taps.push(x);
        }
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, &self.store, h)?;
            h = g.relu(h)?;
            taps.push(h);
        }
        Ok(taps)
    }
}

/// `sum_k tau_k * L1(E_k(out) - E_k(gt))`; `gt` is treated as a constant.
pub fn perceptual_loss<T: Real>(g: &mut Graph<T>, ext: &FeatureExtractor<T>, out: Var, gt: Var) -> Result<Var> {
    if g.shape(out) != g.shape(gt) {
        return Err(Error::shape(format!(
            "perceptual loss shapes differ: {:?} vs {:?}",
            g.shape(out),
            g.shape(gt)
        )));
    }
    let gt = g.detach(gt)?;
    let fo = ext.features(g, out)?;
    let fg = ext.features(g, gt)?;
    weighted_l1(g, &fo, &fg, ext.tap_weights())
}

/// Extractor-feature distance between two `(3, H, W)` images. A stand-in
/// for a learned perceptual metric; its scale is not comparable to LPIPS.
pub fn proxy_perceptual_distance(ext: &FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut g = Graph::new(crate::autodiff::Mode::Eval);
    let av = g.constant(a.clone().unsqueeze0())?;
    let bv = g.constant(b.clone().unsqueeze0())?;
    let d = perceptual_loss(&mut g, ext, av, bv)?;
    Ok(g.value(d).item() as f64)
}

fn weighted_l1<T: Real>(g: &mut Graph<T>, a: &[Var], b: &[Var], weights: &[f64]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ((&x, &y), &w) in a.iter().zip(b).zip(weights) {
        let d = g.sub(x, y)?;
        let l = g.mean_abs(d)?;
        let l = g.scale(l, lit(w))?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => g.constant(Tensor::scalar(T::zero())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            layers: 4,
        }
    }
}

/// Patch discriminator: stride-2 4x4 convs with doubling width and
/// LeakyReLU, then a 3x3 conv to one logit per patch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.base_channels == 0 || config.layers == 0 {
            return Err(Error::config("discriminator needs base_channels and layers >= 1"));
        }
        let mut cin = 3;
        let convs = (0..config.layers)
            .map(|i| {
                let out = config.base_channels << i;
                let c = Conv2d::new(store, &format!("disc.conv{i}"), cin, out, 4, 2, 1, true, RELU_GAIN, rng);
                cin = out;
                c
            })
            .collect();
        let head = Conv2d::new(store, "disc.head", cin, 1, 3, 1, 1, true, 1.0, rng);
        Ok(Self { convs, head })
    }

    /// Logits and the activation after every conv layer.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, s, h)?;
            h = g.activation(h, Activation::LeakyRelu)?;
            acts.push(h);
        }
        let logits = self.head.forward(g, s, h)?;
        Ok((logits, acts))
    }
}

/// `-E[log D(real)] - E[log(1 - D(fake))]` from logits.
pub fn d_loss<T: Real>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let a = g.bce_with_logits(real_logits, true)?;
    let b = g.bce_with_logits(fake_logits, false)?;
    g.add(a, b)
}

/// Non-saturating generator loss `-E[log D(fake)]`.
pub fn g_loss<T: Real>(g: &mut Graph<T>, fake_logits: Var) -> Result<Var> {
    g.bce_with_logits(fake_logits, true)
}

/// `sum_i L1(D^i(gt) - D^i(out))`, with the real activations held constant.
pub fn feature_matching_loss<T: Real>(g: &mut Graph<T>, real_acts: &[Var], fake_acts: &[Var]) -> Result<Var> {
    if real_acts.len() != fake_acts.len() {
        return Err(Error::shape("feature matching needs matching activation lists"));
    }
    let fixed = real_acts.iter().map(|&v| g.detach(v)).collect::<Result<Vec<_>>>()?;
    let ones = vec![1.0; fixed.len()];
    weighted_l1(g, fake_acts, &fixed, &ones)
}

/// Loss weights for perceptual, adversarial and feature-matching terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perceptual: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 10.0,
            adversarial: 1.0,
            feature_matching: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.perceptual, self.adversarial, self.feature_matching]
            .iter()
            .any(|&v| !(v >= 0.0))
        {
            return Err(Error::config(format!("loss weights must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Weighted sum of `(perceptual, adversarial, feature matching)`.
pub fn total_loss(components: [f64; 3], w: &LossWeights) -> f64 {
    w.perceptual * components[0] + w.adversarial * components[1] + w.feature_matching * components[2]
}

/// Graph version of [`total_loss`].
pub fn total_loss_var<T: Real>(g: &mut Graph<T>, per: Var, adv: Var, fm: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(per, lit(w.perceptual))?;
    let b = g.scale(adv, lit(w.adversarial))?;
    let c = g.scale(fm, lit(w.feature_matching))?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}
