//! Named parameter storage, initializers and the Adam optimizer.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Updated by the optimizer.
    Param,
    /// Running statistics; saved with the model, never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: EntryKind,
}

/// Ordered collection of a network's tensors. Each store carries a process
/// unique id so graphs can tell stores apart; clones get a new id.
#[derive(Debug)]
pub struct ParamStore<T: Real = f32> {
    uid: u64,
    entries: Vec<Entry<T>>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            entries: self.entries.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: fresh_uid(),
            entries: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: EntryKind) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].kind == EntryKind::Param
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.len())
            .sum()
    }

    /// Sets every trainable entry to zero, leaving buffers alone.
    pub fn zero_params(&mut self) {
        for e in &mut self.entries {
            if e.kind == EntryKind::Param {
                e.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match stored {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Folds batch statistics recorded in `graph` into running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_stat_updates(&mut self, graph: &Graph<T>, momentum: f64) {
        let m: T = lit(momentum);
        for up in graph.stat_updates().iter().filter(|u| u.store == self.uid) {
            for (id, batch) in [(up.mean_id, &up.mean), (up.var_id, &up.var)] {
                for (r, &b) in self.entries[id.0].value.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            uid: fresh_uid(),
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
        }
    }
}

/// Uniform in `[-bound, bound]` with `bound = gain / sqrt(fan_in)`.
pub fn uniform_init<T: Real>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| lit(rng.gen_range(-bound..=bound)))
}

/// Gain that gives ReLU layers unit-variance activations under uniform init.
pub const RELU_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable entry that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t, lr, eps): (T, T, T, T) = (lit(b1), lit(b2), lit(c.lr), lit(c.eps));
        let (bc1t, bc2t): (T, T) = (lit(bc1), lit(bc2));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if store.entries[i].kind != EntryKind::Param {
                continue;
            }
            let entry = &mut store.entries[i];
            if entry.value.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} does not match parameter {} {:?}",
                    g.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
            let p = &mut entry.value;
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1t * *mv + (T::one() - b1t) * gv;
                *vv = b2t * *vv + (T::one() - b2t) * gv * gv;
                let mhat = *mv / bc1t;
                let vhat = *vv / bc2t;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
