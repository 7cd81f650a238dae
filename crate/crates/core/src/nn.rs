//! Parameters, layers and optimizers on top of [`crate::autograd`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Layers hold [`ParamId`]s into a store, so one
/// layer definition can run against stores of different precision.
pub struct ParamStore<T: Real> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("uid", &self.uid).field("tensors", &self.names.len()).finish()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    /// Clones get a fresh identity so both can be loaded into one graph.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.as_ref().clone())).collect(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed), names: Vec::new(), values: Vec::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.values[id.0].clone()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Total scalar count over ids whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }

    /// Copy values from `other` by name. Every parameter must be present
    /// with a matching shape.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let src = other
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let src = other.get(src);
            if src.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Arc::new(src.clone());
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and f32 little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_f32_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn kaiming_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        p: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = kaiming_bound(fan_in);
        let weight = p.add(format!("{name}.weight"), Tensor::uniform([fan_out, fan_in], bound, rng));
        let bias = bias.then(|| p.add(format!("{name}.bias"), Tensor::uniform([fan_out], bound, rng)));
        Self { weight, bias }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn forward<'g, T: Real>(&self, p: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        x.linear(g.param(p, self.weight), self.bias.map(|b| g.param(p, b)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        p: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = kaiming_bound(cin * kernel * kernel);
        let weight = p.add(format!("{name}.weight"), Tensor::uniform([cout, cin, kernel, kernel], bound, rng));
        let bias = p.add(format!("{name}.bias"), Tensor::uniform([cout], bound, rng));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<'g, T: Real>(&self, p: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        x.conv2d(g.param(p, self.weight), Some(g.param(p, self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(p: &mut ParamStore<T>, name: &str, groups: usize, channels: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "{channels} channels not divisible into {groups} groups");
        Self {
            gamma: p.add(format!("{name}.gamma"), Tensor::full([channels], T::one())),
            beta: p.add(format!("{name}.beta"), Tensor::zeros([channels])),
            groups,
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        x.group_norm(self.groups, g.param(p, self.gamma), g.param(p, self.beta), 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(p: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: p.add(format!("{name}.gamma"), Tensor::full([width], T::one())),
            beta: p.add(format!("{name}.beta"), Tensor::zeros([width])),
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        x.layer_norm(g.param(p, self.gamma), g.param(p, self.beta), 1e-5)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value sources. `query` is `[b, lq, dq]`, `context` is `[b, lk, dk]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    width: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        p: &mut ParamStore<T>,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Self {
            q: Linear::new(p, &format!("{name}.q"), query_dim, width, false, rng),
            k: Linear::new(p, &format!("{name}.k"), context_dim, width, false, rng),
            v: Linear::new(p, &format!("{name}.v"), context_dim, width, false, rng),
            out: Linear::new(p, &format!("{name}.out"), width, query_dim, true, rng),
            heads,
            width,
        }
    }

    /// `[b, l, width] -> [b * heads, l, width / heads]`
    fn split_heads<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let (b, l) = (s[0], s[1]);
        let dh = self.width / self.heads;
        x.reshape([b, l, self.heads, dh])?.permute(&[0, 2, 1, 3])?.reshape([b * self.heads, l, dh])
    }

    /// `key_bias`, when given, is added to the attention logits and must
    /// broadcast to `[b * heads, lq, lk]` (use `-inf`-like values to mask).
    pub fn forward<'g, T: Real>(
        &self,
        p: &ParamStore<T>,
        query: Var<'g, T>,
        context: Var<'g, T>,
        key_bias: Option<Var<'g, T>>,
    ) -> Result<Var<'g, T>> {
        let qs = query.shape();
        let (b, lq) = (qs[0], qs[1]);
        let dh = self.width / self.heads;
        let q = self.split_heads(self.q.forward(p, query)?)?;
        let k = self.split_heads(self.k.forward(p, context)?)?;
        let v = self.split_heads(self.v.forward(p, context)?)?;
        let mut logits = q.bmm(k, false, true)?.scale(T::lit(1.0 / (dh as f64).sqrt()));
        if let Some(bias) = key_bias {
            logits = logits.add(bias)?;
        }
        let attn = logits.softmax()?;
        let mixed = attn.bmm(v, false, false)?;
        let merged = mixed.reshape([b, self.heads, lq, dh])?.permute(&[0, 2, 1, 3])?.reshape([b, lq, self.width])?;
        self.out.forward(p, merged)
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0), step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        let sq: f64 = grads.iter().flatten().map(|g| g.dot(g).f64()).sum();
        if !sq.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm at optimizer step {}", self.step)));
        }
        let scale = match self.clip_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::lit(self.lr / bc1);
        let (tb1, tb2, eps) = (T::lit(b1), T::lit(b2), T::lit(self.eps));
        let tscale = T::lit(scale);
        let sqrt_bc2 = T::lit(bc2.sqrt());
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.get_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j] * tscale;
                m[j] = tb1 * m[j] + (T::one() - tb1) * gj;
                v[j] = tb2 * v[j] + (T::one() - tb2) * gj * gj;
                w[j] -= step_size * m[j] / (v[j].sqrt() / sqrt_bc2 + eps);
            }
        }
        Ok(())
    }

    /// Moment estimates as stores named like `store`, for checkpointing.
    pub fn moments(&self, store: &ParamStore<T>) -> (ParamStore<T>, ParamStore<T>) {
        let build = |src: &Vec<Tensor<T>>| {
            let mut s = ParamStore::new();
            for id in store.ids() {
                s.add(store.name(id), src[id.0].clone());
            }
            s
        };
        (build(&self.m), build(&self.v))
    }

    pub fn restore(&mut self, step: u64, m: &ParamStore<T>, v: &ParamStore<T>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer state size mismatch".into()));
        }
        self.step = step;
        for i in 0..self.m.len() {
            m.get(ParamId(i)).expect_same_shape(&self.m[i])?;
            self.m[i] = m.get(ParamId(i)).clone();
            self.v[i] = v.get(ParamId(i)).clone();
        }
        Ok(())
    }
}

/// Exponential moving average of a parameter store with the usual warmup
/// `min(decay, (1 + n) / (10 + n))`.
pub struct Ema<T: Real> {
    pub decay: f64,
    updates: u64,
    store: ParamStore<T>,
}

impl<T: Real> Ema<T> {
    pub fn new(source: &ParamStore<T>, decay: f64) -> Self {
        Self { decay, updates: 0, store: source.clone() }
    }

    pub fn from_parts(store: ParamStore<T>, decay: f64, updates: u64) -> Self {
        Self { decay, updates, store }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn update(&mut self, source: &ParamStore<T>) {
        self.updates += 1;
        let n = self.updates as f64;
        let d = T::lit(self.decay.min((1.0 + n) / (10.0 + n)));
        for id in source.ids() {
            let src = source.get(id);
            let dst = self.store.get_mut(id);
            for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
                *a = d * *a + (T::one() - d) * b;
            }
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }
}

/// Sinusoidal embedding of integer positions, `[positions.len(), dim]`.
pub fn sinusoidal_embedding<T: Real>(positions: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); positions.len() * dim];
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = pos as f64 * freq;
            out[r * dim + i] = T::lit(a.sin());
            out[r * dim + half + i] = T::lit(a.cos());
        }
    }
    Tensor::from_vec([positions.len(), dim], out).expect("embedding shape")
}
