//! Text, image and text-image pair encoders trained jointly with a
//! contrastive objective, then frozen.
//!
//! * text tower: learned token + position embeddings, pre-norm transformer
//!   layers, masked-mean pooling followed by L2 normalization;
//! * image tower: strided convolutions, spatial mean, linear, L2 normalization;
//! * pair encoder: `normalize(W [text_pooled; image_emb])`.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::seeds;
use crate::story_data::{vocabulary, Dataset, Split};
use crate::tensor::{Real, Tensor};

pub const MAX_TOKENS: usize = 32;
pub const PAD: usize = 0;
const NORM_EPS: f64 = 1e-12;
const MASKED: f64 = -1e9;

/// Closed whitespace vocabulary; id 0 is padding.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Self {
        let words: Vec<String> = std::iter::once("<pad>".to_string()).chain(words).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn shape_stories() -> Self {
        Self::new(vocabulary())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Token ids, truncated to [`MAX_TOKENS`].
    pub fn encode(&self, prompt: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = prompt
            .split_whitespace()
            .take(MAX_TOKENS)
            .map(|w| self.index.get(w).copied().ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(Error::Invalid("empty prompt".into()));
        }
        Ok(ids)
    }

    pub fn hash(&self) -> String {
        seeds::sha256_hex(self.words.join("\n").as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub image_widths: [usize; 4],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 128, text_layers: 2, heads: 4, image_widths: [32, 64, 128, 128] }
    }
}

/// Per-token vectors padded with zeros to [`MAX_TOKENS`] rows, and the
/// unit-norm pooled vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T: Real> {
    pub tokens: Tensor<T>,
    pub pooled: Tensor<T>,
    pub n_tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairEmbedding<T: Real> {
    pub vector: Tensor<T>,
}

/// Cosine similarity of the pooled vectors.
pub fn text_similarity<T: Real>(a: &TextEmbedding<T>, b: &TextEmbedding<T>) -> f64 {
    cosine(&a.pooled, &b.pooled)
}

pub fn cosine<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let (na, nb) = (a.norm().f64(), b.norm().f64());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b).f64() / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug)]
struct TextLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoders<T: Real> {
    pub params: ParamStore<T>,
    cfg: EncoderConfig,
    vocab: Vocab,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<TextLayer>,
    final_norm: LayerNorm,
    convs: Vec<Conv2d>,
    image_proj: Linear,
    pair_proj: Linear,
    logit_scale: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop early once validation retrieval reaches this value.
    pub target_retrieval: Option<f64>,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        Self { epochs: 6, batch: 64, lr: 1e-3, seed: 0, target_retrieval: None }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub steps: usize,
    pub epochs_run: usize,
    pub losses: Vec<f64>,
    /// Validation top-1 text-to-image retrieval after each epoch.
    pub retrieval: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    d_model: usize,
    vocab_hash: String,
    seed: u64,
    config: EncoderConfig,
    weights_sha256: String,
}

impl<T: Real> Encoders<T> {
    pub fn new(cfg: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        if !d.is_multiple_of(cfg.heads) {
            return Err(Error::Invalid(format!("d_model {d} not divisible by {} heads", cfg.heads)));
        }
        let mut rng = seeds::rng(seed, "encoders", 0);
        let mut p = ParamStore::new();
        let tok_emb = p.add("text.tok_emb", Tensor::randn([vocab.len(), d], &mut rng).scale(T::lit(0.1)));
        let pos_emb = p.add("text.pos_emb", Tensor::randn([MAX_TOKENS, d], &mut rng).scale(T::lit(0.1)));
        let layers = (0..cfg.text_layers)
            .map(|l| {
                let n = format!("text.layer{l}");
                TextLayer {
                    ln1: LayerNorm::new(&mut p, &format!("{n}.ln1"), d),
                    attn: MultiHeadAttention::new(&mut p, &format!("{n}.attn"), d, d, d, cfg.heads, &mut rng),
                    ln2: LayerNorm::new(&mut p, &format!("{n}.ln2"), d),
                    fc1: Linear::new(&mut p, &format!("{n}.fc1"), d, 2 * d, true, &mut rng),
                    fc2: Linear::new(&mut p, &format!("{n}.fc2"), 2 * d, d, true, &mut rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut p, "text.final_norm", d);
        let mut cin = 3;
        let convs = cfg
            .image_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(&mut p, &format!("image.conv{i}"), cin, w, 3, 2, 1, &mut rng);
                cin = w;
                c
            })
            .collect();
        let image_proj = Linear::new(&mut p, "image.proj", cin, d, true, &mut rng);
        let pair_proj = Linear::new(&mut p, "pair.proj", 2 * d, d, true, &mut rng);
        let logit_scale = p.add("logit_scale", Tensor::from_vec([1], vec![T::lit((1.0f64 / 0.07).ln())])?);
        Ok(Self {
            params: p,
            cfg,
            vocab,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            convs,
            image_proj,
            pair_proj,
            logit_scale,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn cast<U: Real>(&self) -> Encoders<U> {
        Encoders {
            params: self.params.cast(),
            cfg: self.cfg,
            vocab: self.vocab.clone(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            layers: self.layers.clone(),
            final_norm: self.final_norm.clone(),
            convs: self.convs.clone(),
            image_proj: self.image_proj.clone(),
            pair_proj: self.pair_proj.clone(),
            logit_scale: self.logit_scale,
        }
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// Token states `[b, len, d]` (zero at padding) and pooled unit vectors
    /// `[b, d]` for already-tokenized prompts; `len` is the longest prompt.
    pub fn text_var<'g>(&self, g: &'g Graph<T>, batch: &[Vec<usize>]) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let p = &self.params;
        let d = self.cfg.d_model;
        let b = batch.len();
        let len = batch.iter().map(Vec::len).max().unwrap_or(0);
        if b == 0 || len == 0 {
            return Err(Error::Invalid("text batch is empty".into()));
        }
        let mut ids = Vec::with_capacity(b * len);
        let mut keep = vec![T::zero(); b * len];
        let mut bias = vec![T::zero(); b * self.cfg.heads * len];
        for (r, seq) in batch.iter().enumerate() {
            for k in 0..len {
                ids.push(seq.get(k).copied().unwrap_or(PAD));
                if k < seq.len() {
                    keep[r * len + k] = T::one();
                } else {
                    for h in 0..self.cfg.heads {
                        bias[(r * self.cfg.heads + h) * len + k] = T::lit(MASKED);
                    }
                }
            }
        }
        let bias = g.constant(Tensor::from_vec([b * self.cfg.heads, 1, len], bias)?);
        let pos = g.param(p, self.pos_emb).narrow(0, 0, len)?.reshape([1, len, d])?;
        let mut x = g.param(p, self.tok_emb).gather_rows(&ids)?.reshape([b, len, d])?.add(pos)?;
        for layer in &self.layers {
            let h = layer.ln1.forward(p, x)?;
            x = x.add(layer.attn.forward(p, h, h, Some(bias))?)?;
            let h = layer.ln2.forward(p, x)?;
            x = x.add(layer.fc2.forward(p, layer.fc1.forward(p, h)?.silu())?)?;
        }
        let x = self.final_norm.forward(p, x)?;
        let keep = g.constant(Tensor::from_vec([b, len, 1], keep)?);
        let tokens = x.mul(keep)?;
        let inv: Vec<T> = batch.iter().map(|s| T::lit(1.0 / s.len() as f64)).collect();
        let pooled = tokens.sum_axis(1)?.mul(g.constant(Tensor::from_vec([b, 1], inv)?))?.l2_normalize(NORM_EPS)?;
        Ok((tokens, pooled))
    }

    /// Differentiable image embedding `f`: `[b, 3, 32, 32] -> [b, d]`, unit rows.
    pub fn image_var<'g>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let p = &self.params;
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(p, h)?.silu();
        }
        let s = h.shape();
        let pooled = h.reshape([s[0], s[1], s[2] * s[3]])?.mean_axis(2)?;
        self.image_proj.forward(p, pooled)?.l2_normalize(NORM_EPS)
    }

    pub fn pair_var<'g>(&self, text_pooled: Var<'g, T>, image_emb: Var<'g, T>) -> Result<Var<'g, T>> {
        let joint = Var::concat(&[text_pooled, image_emb], 1)?;
        self.pair_proj.forward(&self.params, joint)?.l2_normalize(NORM_EPS)
    }

    pub fn encode_texts(&self, prompts: &[&str]) -> Result<Vec<TextEmbedding<T>>> {
        let ids: Vec<Vec<usize>> = prompts.iter().map(|p| self.vocab.encode(p)).collect::<Result<_>>()?;
        let g = Graph::inference();
        let (tokens, pooled) = self.text_var(&g, &ids)?;
        let (tokens, pooled) = (tokens.tensor(), pooled.tensor());
        let (len, d) = (tokens.dim(1), self.cfg.d_model);
        Ok(ids
            .iter()
            .enumerate()
            .map(|(r, seq)| {
                let mut padded = vec![T::zero(); MAX_TOKENS * d];
                padded[..len * d].copy_from_slice(&tokens.data()[r * len * d..(r + 1) * len * d]);
                TextEmbedding {
                    tokens: Tensor::from_vec([MAX_TOKENS, d], padded).expect("token shape"),
                    pooled: pooled.index0(r),
                    n_tokens: seq.len(),
                }
            })
            .collect())
    }

    pub fn encode_text(&self, prompt: &str) -> Result<TextEmbedding<T>> {
        Ok(self.encode_texts(&[prompt])?.remove(0))
    }

    /// Image embeddings for a batch `[b, 3, 32, 32]`.
    pub fn embed_images(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        Ok(self.image_var(g.constant(images.clone()))?.tensor())
    }

    pub fn encode_pairs(&self, prompts: &[&str], images: &Tensor<T>) -> Result<Vec<PairEmbedding<T>>> {
        let ids: Vec<Vec<usize>> = prompts.iter().map(|p| self.vocab.encode(p)).collect::<Result<_>>()?;
        if images.ndim() != 4 || images.dim(0) != ids.len() {
            return Err(Error::Shape(format!("{} prompts for images {:?}", ids.len(), images.shape())));
        }
        let g = Graph::inference();
        let (_, pooled) = self.text_var(&g, &ids)?;
        let pair = self.pair_var(pooled, self.image_var(g.constant(images.clone()))?)?.tensor();
        Ok((0..ids.len()).map(|r| PairEmbedding { vector: pair.index0(r) }).collect())
    }

    /// Pair embedding of one prompt and one `[3, 32, 32]` frame.
    pub fn encode_pair(&self, prompt: &str, image: &Tensor<T>) -> Result<PairEmbedding<T>> {
        let s = image.shape().to_vec();
        let batch = image.clone().reshape([1, s[0], s[1], s[2]])?;
        Ok(self.encode_pairs(&[prompt], &batch)?.remove(0))
    }

    /// Symmetric InfoNCE between text and image plus the pair encoder's
    /// matching losses against both modalities.
    pub fn contrastive_loss<'g>(&self, g: &'g Graph<T>, ids: &[Vec<usize>], images: &Tensor<T>) -> Result<Var<'g, T>> {
        let n = ids.len();
        let (_, text) = self.text_var(g, ids)?;
        let image = self.image_var(g.constant(images.clone()))?;
        let pair = self.pair_var(text, image)?;
        let scale = g.param(&self.params, self.logit_scale).exp().reshape([1, 1, 1])?;
        let targets: Vec<usize> = (0..n).collect();
        let logits = |a: Var<'g, T>, b: Var<'g, T>| -> Result<Var<'g, T>> {
            let a = a.reshape([1, n, self.cfg.d_model])?;
            let b = b.reshape([1, n, self.cfg.d_model])?;
            a.bmm(b, false, true)?.mul(scale)?.reshape([n, n])
        };
        let ti = logits(text, image)?;
        let it = logits(image, text)?;
        let clip = ti.cross_entropy(&targets)?.add(it.cross_entropy(&targets)?)?;
        let pi = logits(pair, image)?.cross_entropy(&targets)?;
        let pt = logits(pair, text)?.cross_entropy(&targets)?;
        Ok(clip.add(pi.add(pt)?)?.scale(T::lit(0.5)))
    }

    /// Top-1 text-to-image retrieval over batches of `batch` frames drawn
    /// from [`retrieval_batches`] (a trailing partial batch is dropped).
    pub fn retrieval_accuracy(&self, data: &Dataset, split: Split, batch: usize) -> Result<f64> {
        let items = retrieval_batches(data, split);
        let (mut hit, mut total) = (0usize, 0usize);
        for chunk in items.chunks(batch).filter(|c| c.len() == batch) {
            let prompts: Vec<&str> = chunk.iter().map(|(s, k)| data.stories[*s].frames[*k].prompt.as_str()).collect();
            let texts = self.encode_texts(&prompts)?;
            let images = stack_frames(data, chunk)?;
            let emb = self.embed_images(&images)?;
            let d = self.cfg.d_model;
            for (r, t) in texts.iter().enumerate() {
                let scores: Vec<f64> = (0..chunk.len())
                    .map(|c| t.pooled.data().iter().zip(&emb.data()[c * d..(c + 1) * d]).map(|(a, b)| a.f64() * b.f64()).sum())
                    .collect();
                let best = (0..scores.len()).fold(0, |bi, c| if scores[c] > scores[bi] { c } else { bi });
                hit += (best == r) as usize;
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::Data(format!("{} split has fewer than {batch} frames", split.name())));
        }
        Ok(hit as f64 / total as f64)
    }

    pub fn train_contrastive(&mut self, data: &Dataset, opts: &ContrastiveOptions) -> Result<ContrastiveReport> {
        let mut items = frame_items(data, Split::Train);
        if items.is_empty() {
            return Err(Error::Data("train split is empty".into()));
        }
        let mut adam = Adam::new(&self.params, opts.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(opts.seed, "contrastive", 0));
        let mut report = ContrastiveReport::default();
        for epoch in 0..opts.epochs {
            items.shuffle(&mut rng);
            for chunk in items.chunks(opts.batch) {
                let ids: Vec<Vec<usize>> = chunk
                    .iter()
                    .map(|(s, k)| self.vocab.encode(&data.stories[*s].frames[*k].prompt))
                    .collect::<Result<_>>()?;
                let images = stack_frames(data, chunk)?;
                let g = Graph::training();
                let loss = self.contrastive_loss(&g, &ids, &images)?;
                let value = loss.tensor().data()[0].f64();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "contrastive loss {value} at epoch {epoch}, step {} (seed {})",
                        report.steps, opts.seed
                    )));
                }
                let grads = g.backward(loss)?.for_store(&self.params);
                adam.step(&mut self.params, &grads)?;
                let ls = self.params.get_mut(self.logit_scale);
                ls.data_mut()[0] = ls.data()[0].min(T::lit(100f64.ln()));
                report.losses.push(value);
                report.steps += 1;
            }
            report.epochs_run = epoch + 1;
            let acc = self.retrieval_accuracy(data, Split::Valid, opts.batch.min(64))?;
            log::info!("encoders epoch {}: loss {:.4}, valid retrieval {:.3}", epoch + 1, report.losses.last().copied().unwrap_or(0.0), acc);
            report.retrieval.push(acc);
            if opts.target_retrieval.is_some_and(|t| acc >= t) {
                break;
            }
        }
        Ok(report)
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        let weights = checkpoint::encode_weights(&self.params);
        let path = dir.join("weights.bin");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&path, &weights).map_err(|e| Error::io(&path, e))?;
        let sidecar = Sidecar {
            d_model: self.cfg.d_model,
            vocab_hash: self.vocab.hash(),
            seed,
            config: self.cfg,
            weights_sha256: seeds::sha256_hex(&weights),
        };
        checkpoint::save_json(&sidecar, &dir.join("encoders.json"))
    }

    pub fn load(dir: &Path, vocab: Vocab) -> Result<Self> {
        let sidecar: Sidecar = checkpoint::load_json(&dir.join("encoders.json"))?;
        if sidecar.vocab_hash != vocab.hash() {
            return Err(Error::Checkpoint("encoder vocabulary does not match".into()));
        }
        let path = dir.join("weights.bin");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if seeds::sha256_hex(&bytes) != sidecar.weights_sha256 {
            return Err(Error::Checksum(path.display().to_string()));
        }
        let mut enc = Self::new(sidecar.config, vocab, sidecar.seed)?;
        enc.params.copy_from(&checkpoint::decode_weights(&bytes)?)?;
        Ok(enc)
    }
}

/// Frames of a split in a fixed pseudo-random order, so that evaluation
/// batches mix stories.
pub fn retrieval_batches(data: &Dataset, split: Split) -> Vec<(&str, usize)> {
    let mut items = frame_items(data, split);
    items.shuffle(&mut seeds::rng(data.manifest.seed, "retrieval", 0));
    items
}

/// `(story id, frame index)` for every frame of a split.
pub fn frame_items(data: &Dataset, split: Split) -> Vec<(&str, usize)> {
    data.split(split).iter().flat_map(|s| (0..s.len()).map(move |k| (s.story_id.as_str(), k))).collect()
}

pub fn stack_frames<T: Real>(data: &Dataset, items: &[(&str, usize)]) -> Result<Tensor<T>> {
    let frames: Vec<Tensor<T>> = items.iter().map(|(s, k)| data.stories[*s].frames[*k].image.to_tensor()).collect();
    Tensor::stack(&frames.iter().collect::<Vec<_>>())
}
