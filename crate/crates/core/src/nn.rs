//! Parameterized layers on top of the autodiff graph.

use rand::Rng;

use crate::autodiff::{Graph, Mode, StatUpdate, Var};
use crate::error::Result;
use crate::kernels::NormKind;
use crate::params::{uniform_init, EntryKind, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(&[out_ch, in_ch, kernel, kernel], fan_in, gain, rng),
            EntryKind::Param,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform_init(&[out_ch], fan_in, 1.0, rng),
                EntryKind::Param,
            )
        });
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = self.bias.map(|b| g.param(store, b)).transpose()?;
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn num_params(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.bias.map_or(0, |_| self.out_ch)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        // Each output pixel sees in_ch * (kernel / stride)^2 taps.
        let fan_in = (in_ch * kernel * kernel / (stride * stride)).max(1);
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(&[in_ch, out_ch, kernel, kernel], fan_in, gain, rng),
            EntryKind::Param,
        );
        let bias = Some(store.add(
            format!("{name}.bias"),
            uniform_init(&[out_ch], fan_in, 1.0, rng),
            EntryKind::Param,
        ));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = self.bias.map(|b| g.param(store, b)).transpose()?;
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }

    pub fn num_params(&self) -> usize {
        self.in_ch * self.out_ch * self.kernel * self.kernel + self.bias.map_or(0, |_| self.out_ch)
    }
}

/// Per-channel normalization with a learned affine map.
#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, kind: NormKind) -> Self {
        Self {
            kind,
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), EntryKind::Param),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), EntryKind::Param),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), EntryKind::Buffer),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                EntryKind::Buffer,
            ),
            channels,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        match (g.mode(), self.kind) {
            (Mode::Train, NormKind::Batch) => {
                let (y, mean, var) = g.norm_train(x, gamma, beta, NormKind::Batch)?;
                g.record_stats(StatUpdate {
                    store: store.uid(),
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean,
                    var,
                });
                Ok(y)
            }
            (Mode::Eval, NormKind::Batch) => {
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                g.norm_eval(x, gamma, beta, &mean, &var)
            }
            (_, NormKind::Instance) => Ok(g.norm_train(x, gamma, beta, NormKind::Instance)?.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform_init(&[out_dim, in_dim], in_dim, gain, rng),
                EntryKind::Param,
            ),
            bias: store.add(
                format!("{name}.bias"),
                uniform_init(&[out_dim], in_dim, 1.0, rng),
                EntryKind::Param,
            ),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.linear(x, w, Some(b))
    }
}
