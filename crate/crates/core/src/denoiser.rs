//! Conditional noise predictor (a small U-Net with cross-attention onto the
//! condition sequence) and its training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::codec::LatentCodec;
use crate::context::{AdaptiveEncoder, ConditionBundle};
use crate::encoders::{Encoders, TextEmbedding, MAX_TOKENS};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Adam, Conv2d, Ema, GroupNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::seeds;
use crate::story_data::{Dataset, Split, FRAME_SIZE};
use crate::tensor::{Real, Tensor};

const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    /// Levels (by index into `widths`) that get cross-attention.
    pub attn_levels: Vec<usize>,
    pub heads: usize,
    pub d_model: usize,
    pub groups: usize,
    pub codec: LatentCodec,
    /// Adaptive history attention; `false` passes pair vectors through.
    pub history_attention: bool,
    pub attention_residual: bool,
    pub history_heads: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256],
            res_blocks: 2,
            attn_levels: vec![1, 2],
            heads: 4,
            d_model: 128,
            groups: 8,
            codec: LatentCodec::Identity,
            history_attention: true,
            attention_residual: true,
            history_heads: 4,
        }
    }
}

impl DenoiserConfig {
    /// Single-CPU shape: diffuse on a 2x space-to-depth latent (12x16x16)
    /// with one block per level.
    pub fn desk() -> Self {
        Self {
            widths: vec![32, 64, 128],
            res_blocks: 1,
            codec: LatentCodec::SpaceToDepth { factor: 2 },
            ..Self::default()
        }
    }

    pub fn latent_shape(&self) -> Result<[usize; 3]> {
        self.codec.latent_shape([3, FRAME_SIZE, FRAME_SIZE])
    }

    pub fn validate(&self) -> Result<()> {
        let [_, h, _] = self.latent_shape()?;
        if self.widths.is_empty() || self.res_blocks == 0 {
            return Err(Error::Invalid("denoiser needs at least one level and one block".into()));
        }
        if h % (1 << (self.widths.len() - 1)) != 0 {
            return Err(Error::Invalid(format!("latent size {h} cannot be halved {} times", self.widths.len() - 1)));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w % self.groups != 0 || w % self.heads != 0) {
            return Err(Error::Invalid(format!("width {w} must be divisible by groups and heads")));
        }
        if let Some(l) = self.attn_levels.iter().find(|&&l| l >= self.widths.len()) {
            return Err(Error::Invalid(format!("attention level {l} does not exist")));
        }
        if !self.d_model.is_multiple_of(self.history_heads) {
            return Err(Error::Invalid("d_model must be divisible by history_heads".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real>(p: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, tdim: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: GroupNorm::new(p, &format!("{name}.norm1"), groups.min(cin), cin),
            conv1: Conv2d::new(p, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng),
            time: Linear::new(p, &format!("{name}.time"), tdim, cout, true, rng),
            norm2: GroupNorm::new(p, &format!("{name}.norm2"), groups, cout),
            conv2: Conv2d::new(p, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(p, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
        }
    }

    fn forward<'g, T: Real>(&self, p: &ParamStore<T>, x: Var<'g, T>, temb: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.conv1.forward(p, self.norm1.forward(p, x)?.silu())?;
        let s = h.shape();
        let t = self.time.forward(p, temb)?.reshape([s[0], s[1], 1, 1])?;
        let h = h.add(t)?;
        let h = self.conv2.forward(p, self.norm2.forward(p, h)?.silu())?;
        let skip = match &self.skip {
            Some(c) => c.forward(p, x)?,
            None => x,
        };
        h.add(skip)
    }
}

#[derive(Clone, Debug)]
struct CrossAttnBlock {
    norm: GroupNorm,
    attn: MultiHeadAttention,
}

impl CrossAttnBlock {
    fn forward<'g, T: Real>(&self, p: &ParamStore<T>, x: Var<'g, T>, cond: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let tokens = self.norm.forward(p, x)?.reshape([b, c, hw])?.permute(&[0, 2, 1])?;
        let out = self.attn.forward(p, tokens, cond, bias)?;
        x.add(out.permute(&[0, 2, 1])?.reshape(s)?)
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<(ResBlock, Option<CrossAttnBlock>)>,
    resample: Option<Conv2d>,
}

/// The noise predictor `ε_θ(x_t, t, c)` plus the trainable conditioning
/// parameters (history attention and the null sequence).
#[derive(Clone, Debug)]
pub struct Denoiser<T: Real> {
    pub params: ParamStore<T>,
    cfg: DenoiserConfig,
    input: Conv2d,
    time1: Linear,
    time2: Linear,
    down: Vec<Level>,
    mid: (ResBlock, CrossAttnBlock, ResBlock),
    up: Vec<Level>,
    out_norm: GroupNorm,
    output: Conv2d,
    context: Option<AdaptiveEncoder>,
    null_tokens: ParamId,
}

/// Condition for one training sample.
#[derive(Clone, Copy, Debug)]
pub enum CondSource<'a, T: Real> {
    Null,
    Story { text: &'a TextEmbedding<T>, history: &'a [Tensor<T>] },
}

impl<T: Real> Denoiser<T> {
    /// U-Net, history attention and null sequence draw from separate seeded
    /// streams, so toggling history attention leaves the rest identical.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let [cin, _, _] = cfg.latent_shape()?;
        let mut p = ParamStore::new();
        let mut rng = seeds::rng(seed, "unet", 0);
        let rng = &mut rng;
        let w0 = cfg.widths[0];
        let tdim = 4 * w0;
        let g = cfg.groups;
        let input = Conv2d::new(&mut p, "unet.input", cin, w0, 3, 1, 1, rng);
        let time1 = Linear::new(&mut p, "unet.time1", w0, tdim, true, rng);
        let time2 = Linear::new(&mut p, "unet.time2", tdim, tdim, true, rng);
        let attn = |p: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut _| CrossAttnBlock {
            norm: GroupNorm::new(p, &format!("{name}.norm"), g, ch),
            attn: MultiHeadAttention::new(p, &format!("{name}.attn"), ch, cfg.d_model, ch, cfg.heads, rng),
        };
        let n = cfg.widths.len();
        let mut ch = w0;
        let mut skips = vec![w0];
        let mut down = Vec::with_capacity(n);
        for (l, &w) in cfg.widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                let name = format!("unet.down{l}.{b}");
                let rb = ResBlock::new(&mut p, &name, ch, w, tdim, g, rng);
                let at = cfg.attn_levels.contains(&l).then(|| attn(&mut p, &format!("{name}.xattn"), w, rng));
                blocks.push((rb, at));
                ch = w;
                skips.push(ch);
            }
            let resample = (l + 1 < n).then(|| Conv2d::new(&mut p, &format!("unet.down{l}.downsample"), ch, ch, 3, 2, 1, rng));
            if resample.is_some() {
                skips.push(ch);
            }
            down.push(Level { blocks, resample });
        }
        let mid = (
            ResBlock::new(&mut p, "unet.mid.0", ch, ch, tdim, g, rng),
            attn(&mut p, "unet.mid.xattn", ch, rng),
            ResBlock::new(&mut p, "unet.mid.1", ch, ch, tdim, g, rng),
        );
        let mut up = Vec::with_capacity(n);
        for (l, &w) in cfg.widths.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            for b in 0..=cfg.res_blocks {
                let name = format!("unet.up{l}.{b}");
                let skip = skips.pop().expect("skip channels");
                let rb = ResBlock::new(&mut p, &name, ch + skip, w, tdim, g, rng);
                let at = cfg.attn_levels.contains(&l).then(|| attn(&mut p, &format!("{name}.xattn"), w, rng));
                blocks.push((rb, at));
                ch = w;
            }
            let resample = (l > 0).then(|| Conv2d::new(&mut p, &format!("unet.up{l}.upsample"), ch, ch, 3, 1, 1, rng));
            up.push(Level { blocks, resample });
        }
        let out_norm = GroupNorm::new(&mut p, "unet.out_norm", g, ch);
        let output = Conv2d::new(&mut p, "unet.output", ch, cin, 3, 1, 1, rng);
        let context = if cfg.history_attention {
            let mut crng = seeds::rng(seed, "context", 0);
            Some(AdaptiveEncoder::new(&mut p, "context", cfg.d_model, cfg.history_heads, cfg.attention_residual, &mut crng)?)
        } else {
            None
        };
        let null_tokens = p.add("null.tokens", Tensor::randn([MAX_TOKENS, cfg.d_model], &mut seeds::rng(seed, "null", 0)));
        Ok(Self { params: p, cfg, input, time1, time2, down, mid, up, out_norm, output, context, null_tokens })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn context(&self) -> Option<&AdaptiveEncoder> {
        self.context.as_ref()
    }

    pub fn trainable_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            params: self.params.cast(),
            cfg: self.cfg.clone(),
            input: self.input.clone(),
            time1: self.time1.clone(),
            time2: self.time2.clone(),
            down: self.down.clone(),
            mid: self.mid.clone(),
            up: self.up.clone(),
            out_norm: self.out_norm.clone(),
            output: self.output.clone(),
            context: self.context.clone(),
            null_tokens: self.null_tokens,
        }
    }

    /// Same architecture with another parameter store (e.g. EMA weights).
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        let mut m = self.clone();
        m.params.copy_from(&params)?;
        Ok(m)
    }

    pub fn null_condition(&self) -> ConditionBundle<T> {
        ConditionBundle::null(self.params.get(self.null_tokens).clone()).expect("null token shape")
    }

    /// Differentiable `ε_θ` on a latent batch. `cond` is `[b, L, d]`;
    /// `key_bias` masks condition rows and broadcasts to `[b * heads, 1, L]`.
    pub fn eps_var<'g>(&self, xt: Var<'g, T>, ts: &[usize], cond: Var<'g, T>, key_bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let p = &self.params;
        let g = xt.graph();
        let xs = xt.shape();
        let cs = cond.shape();
        if xs.len() != 4 || ts.len() != xs[0] || cs.len() != 3 || cs[0] != xs[0] || cs[2] != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "denoiser input {xs:?} with {} steps and condition {cs:?} (d_model {})",
                ts.len(),
                self.cfg.d_model
            )));
        }
        let temb = g.constant(sinusoidal_embedding(ts, self.cfg.widths[0]));
        let temb = self.time2.forward(p, self.time1.forward(p, temb)?.silu())?;
        let mut h = self.input.forward(p, xt)?;
        let mut skips = vec![h];
        for level in &self.down {
            for (rb, at) in &level.blocks {
                h = rb.forward(p, h, temb)?;
                if let Some(at) = at {
                    h = at.forward(p, h, cond, key_bias)?;
                }
                skips.push(h);
            }
            if let Some(ds) = &level.resample {
                h = ds.forward(p, h)?;
                skips.push(h);
            }
        }
        h = self.mid.0.forward(p, h, temb)?;
        h = self.mid.1.forward(p, h, cond, key_bias)?;
        h = self.mid.2.forward(p, h, temb)?;
        for level in &self.up {
            for (rb, at) in &level.blocks {
                let skip = skips.pop().expect("skip");
                h = rb.forward(p, Var::concat(&[h, skip], 1)?, temb)?;
                if let Some(at) = at {
                    h = at.forward(p, h, cond, key_bias)?;
                }
            }
            if let Some(us) = &level.resample {
                h = us.forward(p, h.upsample2x()?)?;
            }
        }
        self.output.forward(p, self.out_norm.forward(p, h)?.silu())
    }

    /// Pad bundles to a common length; returns `[b, L, d]` and the key mask bias.
    pub fn bundle_inputs<'g>(&self, g: &'g Graph<T>, bundles: &[&ConditionBundle<T>]) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let d = self.cfg.d_model;
        let len = bundles.iter().map(|b| b.len()).max().unwrap_or(0);
        let mut data = vec![T::zero(); bundles.len() * len * d];
        let mut valid = Vec::with_capacity(bundles.len());
        for (i, b) in bundles.iter().enumerate() {
            if b.width() != d {
                return Err(Error::Shape(format!("condition width {} for a d_model {d} denoiser", b.width())));
            }
            data[i * len * d..i * len * d + b.len() * d].copy_from_slice(b.condition.data());
            let mut v = b.valid_keys();
            v.resize(len, false);
            valid.push(v);
        }
        let cond = g.constant(Tensor::from_vec([bundles.len(), len, d], data)?);
        Ok((cond, g.constant(self.key_bias(&valid)?)))
    }

    fn key_bias(&self, valid: &[Vec<bool>]) -> Result<Tensor<T>> {
        let (b, len, hd) = (valid.len(), valid.first().map_or(0, Vec::len), self.cfg.heads);
        let mut bias = vec![T::zero(); b * hd * len];
        for (i, row) in valid.iter().enumerate() {
            for (j, &ok) in row.iter().enumerate() {
                if !ok {
                    (0..hd).for_each(|h| bias[(i * hd + h) * len + j] = T::lit(MASKED));
                }
            }
        }
        Tensor::from_vec([b * hd, 1, len], bias)
    }

    /// Inference-mode noise prediction for a latent batch `[b, c, h, w]`.
    pub fn predict_noise(&self, xt: &Tensor<T>, ts: &[usize], conds: &[&ConditionBundle<T>]) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let (cond, bias) = self.bundle_inputs(&g, conds)?;
        Ok(self.eps_var(g.constant(xt.clone()), ts, cond, Some(bias))?.tensor())
    }

    /// Condition sequences for a training batch, built inside `g` so the
    /// history attention and null sequence receive gradients.
    pub fn training_condition<'g>(&self, g: &'g Graph<T>, samples: &[CondSource<'_, T>]) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let d = self.cfg.d_model;
        let b = samples.len();
        let n_max = samples
            .iter()
            .map(|s| match s {
                CondSource::Null => 0,
                CondSource::Story { history, .. } => history.len(),
            })
            .max()
            .unwrap_or(0);
        let mut pooled = vec![T::zero(); b * d];
        let mut hist = vec![T::zero(); b * n_max * d];
        let mut hvalid = vec![vec![false; n_max]; b];
        for (i, s) in samples.iter().enumerate() {
            if let CondSource::Story { text, history } = s {
                pooled[i * d..(i + 1) * d].copy_from_slice(text.pooled.data());
                for (j, h) in history.iter().enumerate() {
                    hist[(i * n_max + j) * d..(i * n_max + j + 1) * d].copy_from_slice(h.data());
                    hvalid[i][j] = true;
                }
            }
        }
        let updated = if n_max == 0 {
            None
        } else {
            let hv = g.constant(Tensor::from_vec([b, n_max, d], hist)?);
            Some(match &self.context {
                Some(ctx) => {
                    // Null rows get a dummy valid key so softmax stays defined.
                    let mask: Vec<Vec<bool>> = hvalid.iter().map(|r| if r.iter().any(|&v| v) { r.clone() } else { vec![true; n_max] }).collect();
                    ctx.forward(&self.params, g.constant(Tensor::from_vec([b, d], pooled)?), hv, Some(&mask))?.1
                }
                None => hv,
            })
        };
        let null = g.param(&self.params, self.null_tokens).reshape([1, MAX_TOKENS, d])?;
        let mut rows = Vec::with_capacity(b);
        let mut valid = Vec::with_capacity(b);
        for (i, s) in samples.iter().enumerate() {
            let (head, n_tok) = match s {
                CondSource::Null => (null, MAX_TOKENS),
                CondSource::Story { text, .. } => (g.constant(text.tokens.clone().reshape([1, MAX_TOKENS, d])?), text.n_tokens),
            };
            let row = match updated {
                Some(u) => Var::concat(&[head, u.narrow(0, i, 1)?], 1)?,
                None => head,
            };
            rows.push(row);
            valid.push((0..MAX_TOKENS + n_max).map(|k| if k < MAX_TOKENS { k < n_tok } else { hvalid[i][k - MAX_TOKENS] }).collect::<Vec<_>>());
        }
        Ok((Var::concat(&rows, 0)?, g.constant(self.key_bias(&valid)?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_weights(&self.params, path)
    }
}

/// One prepared training frame: clean latent plus frozen-encoder features.
#[derive(Clone, Debug)]
pub struct TrainItem<T: Real> {
    pub x0: Tensor<T>,
    pub text: TextEmbedding<T>,
    /// Pair vectors of the ground-truth frames before this one.
    pub history: Vec<Tensor<T>>,
}

/// Noise draws for one batch.
#[derive(Clone, Debug)]
pub struct Corruption<T: Real> {
    pub xt: Tensor<T>,
    pub ts: Vec<usize>,
    pub eps: Tensor<T>,
    pub dropped: Vec<bool>,
}

/// Sample `t ~ U{1..T}`, `ε ~ N(0, I)` and condition dropout for a stacked
/// batch of clean latents.
pub fn corrupt_batch<T: Real>(x0: &Tensor<T>, schedule: &NoiseSchedule, dropout_p: f64, rng: &mut impl Rng) -> Result<Corruption<T>> {
    let b = x0.dim(0);
    let per = x0.numel() / b;
    let mut xt = Vec::with_capacity(x0.numel());
    let mut eps_all = Vec::with_capacity(x0.numel());
    let mut ts = Vec::with_capacity(b);
    let mut dropped = Vec::with_capacity(b);
    for i in 0..b {
        let t = rng.random_range(1..=schedule.steps());
        let eps: Vec<T> = (0..per).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        let ab = schedule.alpha_bar(t)?;
        let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        xt.extend(x0.data()[i * per..(i + 1) * per].iter().zip(&eps).map(|(&x, &e)| a * x + s * e));
        eps_all.extend(eps);
        ts.push(t);
        dropped.push(rng.random_bool(dropout_p));
    }
    Ok(Corruption {
        xt: Tensor::from_vec(x0.shape().to_vec(), xt)?,
        ts,
        eps: Tensor::from_vec(x0.shape().to_vec(), eps_all)?,
        dropped,
    })
}

/// Loss and parameter gradients for one batch.
pub fn training_step<T: Real>(
    model: &Denoiser<T>,
    batch: &[&TrainItem<T>],
    schedule: &NoiseSchedule,
    dropout_p: f64,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let x0 = Tensor::stack(&batch.iter().map(|b| &b.x0).collect::<Vec<_>>())?;
    let c = corrupt_batch(&x0, schedule, dropout_p, rng)?;
    let sources: Vec<CondSource<'_, T>> = batch
        .iter()
        .zip(&c.dropped)
        .map(|(b, &drop)| if drop { CondSource::Null } else { CondSource::Story { text: &b.text, history: &b.history } })
        .collect();
    let g = Graph::training();
    let (cond, bias) = model.training_condition(&g, &sources)?;
    let pred = model.eps_var(g.constant(c.xt), &c.ts, cond, Some(bias))?;
    let loss = pred.mse(g.constant(c.eps))?;
    let value = loss.tensor().data()[0].f64();
    let grads = g.backward(loss)?.for_store(&model.params);
    Ok((value, grads))
}

/// Teacher-forced training items for every frame of `split`.
pub fn prepare_items(data: &Dataset, split: Split, encoders: &Encoders<f32>, codec: &LatentCodec) -> Result<Vec<TrainItem<f32>>> {
    let mut items = Vec::new();
    for story in data.split(split) {
        let prompts: Vec<&str> = story.frames.iter().map(|f| f.prompt.as_str()).collect();
        let texts = encoders.encode_texts(&prompts)?;
        let frames: Vec<Tensor<f32>> = story.frames.iter().map(|f| f.image.to_tensor()).collect();
        let images = Tensor::stack(&frames.iter().collect::<Vec<_>>())?;
        let pairs: Vec<Tensor<f32>> = encoders.encode_pairs(&prompts, &images)?.into_iter().map(|p| p.vector).collect();
        let latents = codec.encode(&images)?;
        for (k, text) in texts.into_iter().enumerate() {
            items.push(TrainItem { x0: latents.index0(k), text, history: pairs[..k].to_vec() });
        }
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub dropout_p: f64,
    pub batch: usize,
    pub seed: u64,
    pub ema_decay: f64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 50, lr: 1e-4, dropout_p: 0.1, batch: 32, seed: 0, ema_decay: 0.999, max_steps: None, checkpoint_every: None }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointState {
    pub step: usize,
    pub adam_steps: u64,
    pub ema_updates: u64,
    pub config: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub options: TrainOptions,
    pub config_hash: String,
    pub encoder_digest: String,
    pub ema: bool,
    pub losses: Vec<f64>,
}

/// Model, optimizer and EMA state at a step boundary.
pub struct TrainState {
    pub model: Denoiser<f32>,
    pub adam: Adam<f32>,
    pub ema: Ema<f32>,
    pub step: usize,
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(model: Denoiser<f32>, opts: &TrainOptions) -> Self {
        let adam = Adam::new(&model.params, opts.lr);
        let ema = Ema::new(&model.params, opts.ema_decay);
        Self { model, adam, ema, step: 0, losses: Vec::new() }
    }

    pub fn ema_model(&self) -> Result<Denoiser<f32>> {
        self.model.with_params(self.ema.store().clone())
    }

    pub fn save(&self, dir: &Path, meta: &CheckpointMeta<'_>) -> Result<PathBuf> {
        let d = dir.join(format!("step-{}", self.step));
        checkpoint::save_weights(&self.model.params, &d.join("model.bin"))?;
        checkpoint::save_weights(self.ema.store(), &d.join("ema.bin"))?;
        let (m, v) = self.adam.moments(&self.model.params);
        checkpoint::save_weights(&m, &d.join("adam_m.bin"))?;
        checkpoint::save_weights(&v, &d.join("adam_v.bin"))?;
        let state = CheckpointState {
            step: self.step,
            adam_steps: self.adam.steps(),
            ema_updates: self.ema.updates(),
            config: self.model.config().clone(),
            schedule: meta.schedule,
            options: meta.options.clone(),
            config_hash: meta.config_hash.to_string(),
            encoder_digest: meta.encoder_digest.to_string(),
            ema: true,
            losses: self.losses.clone(),
        };
        checkpoint::save_json(&state, &d.join("state.json"))?;
        Ok(d)
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointState)> {
        let state: CheckpointState = checkpoint::load_json(&dir.join("state.json"))?;
        let mut model = Denoiser::<f32>::new(state.config.clone(), state.options.seed)?;
        model.params.copy_from(&checkpoint::load_weights(&dir.join("model.bin"))?)?;
        let ema_store = model.with_params(checkpoint::load_weights(&dir.join("ema.bin"))?)?.params;
        let mut adam = Adam::new(&model.params, state.options.lr);
        let m = model.with_params(checkpoint::load_weights(&dir.join("adam_m.bin"))?)?.params;
        let v = model.with_params(checkpoint::load_weights(&dir.join("adam_v.bin"))?)?.params;
        adam.restore(state.adam_steps, &m, &v)?;
        let ema = Ema::from_parts(ema_store, state.options.ema_decay, state.ema_updates);
        Ok((Self { model, adam, ema, step: state.step, losses: state.losses.clone() }, state))
    }
}

/// Provenance written next to each checkpoint.
pub struct CheckpointMeta<'a> {
    pub schedule: ScheduleParams,
    pub options: &'a TrainOptions,
    pub config_hash: &'a str,
    pub encoder_digest: &'a str,
}

/// Latest `step-<n>` directory under `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n: usize = name.strip_prefix("step-")?.parse().ok()?;
            e.path().join("state.json").exists().then_some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

/// Batches for one epoch: a seeded permutation of item indices.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed, "epoch", epoch as u64));
    order
}

/// Continue training `state` until `opts.epochs` epochs (or `max_steps`).
/// Every step draws its noise from `(seed, step)`, so resuming from a saved
/// state replays the same sequence.
pub fn train(
    state: &mut TrainState,
    items: &[TrainItem<f32>],
    encoders: &Encoders<f32>,
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
    checkpoints: Option<(&Path, &CheckpointMeta<'_>)>,
) -> Result<TrainReport> {
    if items.is_empty() && opts.epochs > 0 {
        return Err(Error::Data("no training items".into()));
    }
    let before = encoders.digest();
    let per_epoch = items.len().div_ceil(opts.batch.max(1));
    let total = (opts.epochs * per_epoch).min(opts.max_steps.unwrap_or(usize::MAX));
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while state.step < total {
        let epoch = state.step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(items.len(), opts.seed, epoch);
            order_epoch = epoch;
        }
        let k = state.step % per_epoch;
        let batch: Vec<&TrainItem<f32>> = order[k * opts.batch..((k + 1) * opts.batch).min(items.len())].iter().map(|&i| &items[i]).collect();
        let mut rng = seeds::rng(opts.seed, "train-step", state.step as u64);
        let (loss, grads) = training_step(&state.model, &batch, schedule, opts.dropout_p, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "denoiser loss {loss} at step {} (batch seed {})",
                state.step,
                seeds::derive(opts.seed, "train-step", state.step as u64)
            )));
        }
        state.adam.step(&mut state.model.params, &grads)?;
        state.ema.update(&state.model.params);
        state.losses.push(loss);
        state.step += 1;
        if state.step.is_multiple_of(50) || state.step == total {
            let recent = &state.losses[state.losses.len().saturating_sub(50)..];
            log::info!("denoiser step {}/{}: loss {:.4}", state.step, total, recent.iter().sum::<f64>() / recent.len() as f64);
        }
        if let (Some(every), Some((dir, meta))) = (opts.checkpoint_every, checkpoints) {
            if state.step.is_multiple_of(every) {
                state.save(dir, meta)?;
            }
        }
    }
    let after = encoders.digest();
    if before != after {
        return Err(Error::Invalid("encoder weights changed during denoiser training".into()));
    }
    Ok(TrainReport { steps: state.step, losses: state.losses.clone(), encoder_digest_before: before, encoder_digest_after: after })
}
