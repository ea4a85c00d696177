//! Fast Fourier Convolution blocks.
//!
//! An [`FfcBlock`] splits its channels into a local part (ordinary 3x3
//! convolutions) and a global part (a spectral transform that convolves in
//! the Fourier domain, so every output position sees the whole input).
//! Cross-branch 3x3 convolutions exchange information between the two, as in
//! the original FFC design:
//!
//! ```text
//! out_local  = l2l(x_local) + g2l(x_global)
//! out_global = l2g(x_local) + spectral(x_global)
//! y          = act(norm(concat(out_local, out_global)))
//! ```
//!
//! [`AttFfcBlock`] composes three of these into an attention / noise-removal
//! / enhancement unit; [`ResFfcBlock`] is the plain residual wrapper.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::kernels::{Activation, NormKind};
use crate::nn::{Conv2d, Norm};
use crate::params::{ParamStore, RELU_GAIN};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfcConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Fraction of channels routed through the global (spectral) branch.
    pub alpha: f64,
    pub norm: NormKind,
    pub activation: Activation,
    /// Optional trailing 1x1 projection (no activation) to this many channels.
    pub project_to: Option<usize>,
    /// Start the output normalization gain at zero so the block emits zeros.
    pub zero_init: bool,
}

impl FfcConfig {
    pub fn new(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            alpha: 0.5,
            norm: NormKind::Batch,
            activation: Activation::Relu,
            project_to: None,
            zero_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::config("FFC channel counts must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("FFC alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Number of channels assigned to the global branch.
pub fn global_channels(alpha: f64, channels: usize) -> usize {
    ((alpha * channels as f64).round() as usize).min(channels)
}

#[derive(Clone, Debug)]
struct SpectralTransform {
    reduce: Conv2d,
    reduce_norm: Norm,
    freq_conv: Conv2d,
    freq_norm: Norm,
    expand: Conv2d,
}

impl SpectralTransform {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        norm: NormKind,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (out_ch / 2).max(1);
        Self {
            reduce: Conv2d::new(store, &format!("{name}.reduce"), in_ch, hidden, 1, 1, 0, false, RELU_GAIN, rng),
            reduce_norm: Norm::new(store, &format!("{name}.reduce_norm"), hidden, norm),
            freq_conv: Conv2d::new(
                store,
                &format!("{name}.freq_conv"),
                2 * hidden,
                2 * hidden,
                1,
                1,
                0,
                false,
                RELU_GAIN,
                rng,
            ),
            freq_norm: Norm::new(store, &format!("{name}.freq_norm"), 2 * hidden, norm),
            expand: Conv2d::new(store, &format!("{name}.expand"), hidden, out_ch, 1, 1, 0, false, 1.0, rng),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let width = g.shape(x)[3];
        let r = self.reduce.forward(g, s, x)?;
        let r = self.reduce_norm.forward(g, s, r)?;
        let r = g.relu(r)?;
        let spec = g.rfft2(r)?;
        let spec = self.freq_conv.forward(g, s, spec)?;
        let spec = self.freq_norm.forward(g, s, spec)?;
        let spec = g.relu(spec)?;
        let back = g.irfft2(spec, width)?;
        let sum = g.add(r, back)?;
        self.expand.forward(g, s, sum)
    }
}

#[derive(Clone, Debug)]
pub struct FfcBlock {
    pub config: FfcConfig,
    in_local: usize,
    in_global: usize,
    out_local: usize,
    out_global: usize,
    l2l: Option<Conv2d>,
    l2g: Option<Conv2d>,
    g2l: Option<Conv2d>,
    spectral: Option<SpectralTransform>,
    norm: Norm,
    projection: Option<Conv2d>,
}

impl FfcBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: FfcConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let in_global = global_channels(config.alpha, config.in_ch);
        let out_global = global_channels(config.alpha, config.out_ch);
        let in_local = config.in_ch - in_global;
        let out_local = config.out_ch - out_global;
        let conv = |store: &mut ParamStore<T>, rng: &mut _, tag: &str, i: usize, o: usize| {
            (i > 0 && o > 0).then(|| Conv2d::new(store, &format!("{name}.{tag}"), i, o, 3, 1, 1, false, RELU_GAIN, rng))
        };
        let l2l = conv(store, rng, "l2l", in_local, out_local);
        let l2g = conv(store, rng, "l2g", in_local, out_global);
        let g2l = conv(store, rng, "g2l", in_global, out_local);
        let spectral = (in_global > 0 && out_global > 0).then(|| {
            SpectralTransform::new(store, &format!("{name}.spectral"), in_global, out_global, config.norm, rng)
        });
        let norm = Norm::new(store, &format!("{name}.norm"), config.out_ch, config.norm);
        if config.zero_init {
            store.get_mut(norm.gamma).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        let projection = config.project_to.map(|p| {
            Conv2d::new(store, &format!("{name}.project"), config.out_ch, p, 1, 1, 0, true, 1.0, rng)
        });
        Ok(Self {
            config,
            in_local,
            in_global,
            out_local,
            out_global,
            l2l,
            l2g,
            g2l,
            spectral,
            norm,
            projection,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.config.project_to.unwrap_or(self.config.out_ch)
    }

    /// `(local, global)` channel counts on the input side.
    pub fn input_split(&self) -> (usize, usize) {
        (self.in_local, self.in_global)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if g.shape(x).len() != 4 || c != self.config.in_ch {
            return Err(Error::shape(format!(
                "FFC block expects {} input channels, got shape {:?}",
                self.config.in_ch,
                g.shape(x)
            )));
        }
        let xl = (self.in_local > 0)
            .then(|| g.narrow_channels(x, 0, self.in_local))
            .transpose()?;
        let xg = (self.in_global > 0)
            .then(|| g.narrow_channels(x, self.in_local, self.in_global))
            .transpose()?;

        let mut parts = Vec::with_capacity(2);
        if self.out_local > 0 {
            let a = match (&self.l2l, xl) {
                (Some(conv), Some(xl)) => Some(conv.forward(g, s, xl)?),
                _ => None,
            };
            let b = match (&self.g2l, xg) {
                (Some(conv), Some(xg)) => Some(conv.forward(g, s, xg)?),
                _ => None,
            };
            parts.push(sum_opt(g, a, b)?);
        }
        if self.out_global > 0 {
            let a = match (&self.l2g, xl) {
                (Some(conv), Some(xl)) => Some(conv.forward(g, s, xl)?),
                _ => None,
            };
            let b = match (&self.spectral, xg) {
                (Some(st), Some(xg)) => Some(st.forward(g, s, xg)?),
                _ => None,
            };
            parts.push(sum_opt(g, a, b)?);
        }
        let y = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
        let y = self.norm.forward(g, s, y)?;
        let y = g.activation(y, self.config.activation)?;
        match &self.projection {
            Some(p) => p.forward(g, s, y),
            None => Ok(y),
        }
    }
}

fn sum_opt<T: Real>(g: &mut Graph<T>, a: Option<Var>, b: Option<Var>) -> Result<Var> {
    match (a, b) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => Err(Error::shape("FFC branch has no inputs")),
    }
}

/// Intermediate tensors of one attention block pass.
#[derive(Clone, Copy, Debug)]
pub struct AttFfcTrace {
    /// One-channel attention map in (0, 1).
    pub attention: Var,
    /// Predicted noise to subtract.
    pub noise: Var,
    pub output: Var,
}

/// Attention-guided FFC block:
///
/// ```text
/// attention = sigmoid(ffc_attention(f))                     one channel
/// noise     = ffc_noise(concat(f, attention))
/// out       = (f - noise) + ffc_enhance(f - noise)
/// ```
#[derive(Clone, Debug)]
pub struct AttFfcBlock {
    pub attention: FfcBlock,
    pub noise: FfcBlock,
    pub enhance: FfcBlock,
    channels: usize,
}

impl AttFfcBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        alpha: f64,
        norm: NormKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let base = |in_ch: usize| FfcConfig {
            alpha,
            norm,
            ..FfcConfig::new(in_ch, channels)
        };
        let attention = FfcBlock::new(
            store,
            &format!("{name}.attention"),
            FfcConfig {
                project_to: Some(1),
                ..base(channels)
            },
            rng,
        )?;
        let noise = FfcBlock::new(
            store,
            &format!("{name}.noise"),
            FfcConfig {
                activation: Activation::Identity,
                zero_init: true,
                ..base(channels + 1)
            },
            rng,
        )?;
        let enhance = FfcBlock::new(
            store,
            &format!("{name}.enhance"),
            FfcConfig {
                activation: Activation::Identity,
                zero_init: true,
                ..base(channels)
            },
            rng,
        )?;
        Ok(Self {
            attention,
            noise,
            enhance,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, f: Var) -> Result<Var> {
        Ok(self.forward_traced(g, s, f)?.output)
    }

    pub fn forward_traced<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, f: Var) -> Result<AttFfcTrace> {
        if g.shape(f).get(1) != Some(&self.channels) {
            return Err(Error::shape(format!(
                "AttFFC block expects {} channels, got shape {:?}",
                self.channels,
                g.shape(f)
            )));
        }
        let logits = self.attention.forward(g, s, f)?;
        let attention = g.sigmoid(logits)?;
        let cat = g.concat(&[f, attention])?;
        let noise = self.noise.forward(g, s, cat)?;
        let denoised = g.sub(f, noise)?;
        let enhanced = self.enhance.forward(g, s, denoised)?;
        let output = g.add(denoised, enhanced)?;
        Ok(AttFfcTrace {
            attention,
            noise,
            output,
        })
    }
}

/// `x + ffc(x)`.
#[derive(Clone, Debug)]
pub struct ResFfcBlock {
    pub ffc: FfcBlock,
}

impl ResFfcBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        alpha: f64,
        norm: NormKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ffc = FfcBlock::new(
            store,
            &format!("{name}.ffc"),
            FfcConfig {
                alpha,
                norm,
                ..FfcConfig::new(channels, channels)
            },
            rng,
        )?;
        Ok(Self { ffc })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.ffc.forward(g, s, x)?;
        g.add(x, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[serde(alias = "attffc", alias = "att_ffc")]
    AttFfc,
    #[serde(alias = "resffc", alias = "res_ffc")]
    ResFfc,
}

impl std::str::FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "attffc" => Ok(BlockKind::AttFfc),
            "resffc" => Ok(BlockKind::ResFfc),
            other => Err(Error::config(format!("unknown block kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockKind::AttFfc => "att_ffc",
            BlockKind::ResFfc => "res_ffc",
        })
    }
}

/// One bottleneck unit of either kind.
#[derive(Clone, Debug)]
pub enum BottleneckBlock {
    Att(AttFfcBlock),
    Res(ResFfcBlock),
}

impl BottleneckBlock {
    pub fn new<T: Real>(
        kind: BlockKind,
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        alpha: f64,
        norm: NormKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            BlockKind::AttFfc => BottleneckBlock::Att(AttFfcBlock::new(store, name, channels, alpha, norm, rng)?),
            BlockKind::ResFfc => BottleneckBlock::Res(ResFfcBlock::new(store, name, channels, alpha, norm, rng)?),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            BottleneckBlock::Att(b) => b.forward(g, s, x),
            BottleneckBlock::Res(b) => b.forward(g, s, x),
        }
    }
}

/// Draws every normalization gain from `[0.5, 1.5]` and offset from
/// `[-0.5, 0.5]`, so probes do not depend on the identity defaults.
pub fn randomize_norms<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entries()[id.index()].name.clone();
        let range = if name.ends_with(".gamma") {
            0.5..1.5
        } else if name.ends_with(".beta") {
            -0.5..0.5
        } else {
            continue;
        };
        for v in store.get_mut(id).data_mut() {
            *v = T::of_f64(rng.gen_range(range.clone()));
        }
    }
}

/// Fraction of spatial positions whose output (max over channels) changes by
/// more than `tol` when a unit impulse is placed at one pixel of every input
/// channel, relative to an all-zero input. Evaluated in inference mode.
pub fn impulse_coverage<T: Real>(block: &FfcBlock, store: &ParamStore<T>, h: usize, w: usize, tol: f64) -> Result<f64> {
    let c = block.in_channels();
    let (py, px) = (h / 3, (2 * w) / 3);
    let mut impulse = Tensor::zeros(&[1, c, h, w]);
    for ch in 0..c {
        impulse.data_mut()[(ch * h + py) * w + px] = T::one();
    }
    let mut g = Graph::new(Mode::Eval);
    let x0 = g.constant(Tensor::zeros(&[1, c, h, w]))?;
    let x1 = g.constant(impulse)?;
    let y0 = block.forward(&mut g, store, x0)?;
    let y1 = block.forward(&mut g, store, x1)?;
    let (a, b) = (g.value(y0), g.value(y1));
    let oc = block.out_channels();
    let hit = (0..h * w)
        .filter(|&p| (0..oc).any(|k| (a.data()[k * h * w + p] - b.data()[k * h * w + p]).as_f64().abs() > tol))
        .count();
    Ok(hit as f64 / (h * w) as f64)
}
