//! History conditioning: relevance-weighted history vectors, the condition
//! sequence fed to the denoiser, and similarity-gated anchor selection.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoders::{text_similarity, PairEmbedding, TextEmbedding, MAX_TOKENS};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::tensor::{Real, Tensor};

const MASKED: f64 = -1e9;

/// One earlier frame of the story being generated.
#[derive(Clone, Debug)]
pub struct HistoryEntry<T: Real> {
    pub pair_embedding: PairEmbedding<T>,
    pub prompt_embedding: TextEmbedding<T>,
    /// `[3, 32, 32]` frame used as history (given or generated).
    pub image: Tensor<T>,
    pub frame_index: usize,
}

/// Condition sequence `[v; ĥ_0; ...; ĥ_{n-1}]`, `(32 + n, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle<T: Real> {
    pub current_tokens: Tensor<T>,
    /// Leading rows of `current_tokens` that hold real tokens.
    pub n_tokens: usize,
    pub updated_history: Vec<Tensor<T>>,
    pub condition: Tensor<T>,
    pub null_flag: bool,
}

impl<T: Real> ConditionBundle<T> {
    pub fn n_history(&self) -> usize {
        self.updated_history.len()
    }

    pub fn len(&self) -> usize {
        self.condition.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.condition.dim(1)
    }

    /// Keys the denoiser may attend to: real text tokens and every history row.
    pub fn valid_keys(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i >= MAX_TOKENS || i < self.n_tokens).collect()
    }

    /// The learned unconditional sequence; every row counts as a token.
    pub fn null(tokens: Tensor<T>) -> Result<Self> {
        if tokens.ndim() != 2 || tokens.dim(0) != MAX_TOKENS {
            return Err(Error::Shape(format!("null condition must be [{MAX_TOKENS}, d], got {:?}", tokens.shape())));
        }
        Ok(Self { current_tokens: tokens.clone(), n_tokens: MAX_TOKENS, updated_history: Vec::new(), condition: tokens, null_flag: true })
    }
}

pub fn build_condition<T: Real>(v: &TextEmbedding<T>, updated: &[Tensor<T>]) -> Result<ConditionBundle<T>> {
    let d = v.tokens.dim(1);
    let mut rows: Vec<Tensor<T>> = vec![v.tokens.clone()];
    for h in updated {
        if h.shape() != [d] {
            return Err(Error::Shape(format!("history vector {:?} for width {d}", h.shape())));
        }
        rows.push(h.clone().reshape([1, d])?);
    }
    let condition = Tensor::concat(&rows.iter().collect::<Vec<_>>(), 0)?;
    Ok(ConditionBundle {
        current_tokens: v.tokens.clone(),
        n_tokens: v.n_tokens,
        updated_history: updated.to_vec(),
        condition,
        null_flag: false,
    })
}

/// Cross-attention from the pooled prompt onto history pair vectors. Each
/// history vector is rescaled by its per-head attention weight:
/// `ĥ_j = [h_j +] W_O concat_h(a_j^h W_V^h h_j)`.
#[derive(Clone, Debug)]
pub struct AdaptiveEncoder {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    width: usize,
    pub residual: bool,
}

impl AdaptiveEncoder {
    pub fn new<T: Real>(p: &mut ParamStore<T>, name: &str, width: usize, heads: usize, residual: bool, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Invalid(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(p, &format!("{name}.q"), width, width, false, rng),
            k: Linear::new(p, &format!("{name}.k"), width, width, false, rng),
            v: Linear::new(p, &format!("{name}.v"), width, width, false, rng),
            out: Linear::new(p, &format!("{name}.out"), width, width, false, rng),
            heads,
            width,
            residual,
        })
    }

    /// Overwrite every projection with the identity (tests and probes).
    pub fn set_identity<T: Real>(&self, p: &mut ParamStore<T>) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            let w = p.get_mut(l.weight());
            let n = w.dim(0);
            for (i, x) in w.data_mut().iter_mut().enumerate() {
                *x = if i / n == i % n { T::one() } else { T::zero() };
            }
        }
    }

    /// Attention weights `[b * heads, 1, n]` and updated history `[b, n, d]`.
    /// `valid[b][j]` marks real (unpadded) history rows.
    pub fn forward<'g, T: Real>(
        &self,
        p: &ParamStore<T>,
        pooled: Var<'g, T>,
        history: Var<'g, T>,
        valid: Option<&[Vec<bool>]>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let g = pooled.graph();
        let hs = history.shape();
        if hs.len() != 3 || hs[2] != self.width || pooled.shape() != [hs[0], self.width] {
            return Err(Error::Shape(format!("attend pooled {:?} over history {:?} at width {}", pooled.shape(), hs, self.width)));
        }
        let (b, n, hd) = (hs[0], hs[1], self.heads);
        let dh = self.width / hd;
        let q = self.q.forward(p, pooled)?.reshape([b * hd, 1, dh])?;
        let heads = |x: Var<'g, T>| x.reshape([b, n, hd, dh])?.permute(&[0, 2, 1, 3])?.reshape([b * hd, n, dh]);
        let k = heads(self.k.forward(p, history)?)?;
        let v = heads(self.v.forward(p, history)?)?;
        let mut logits = q.bmm(k, false, true)?.scale(T::lit(1.0 / (dh as f64).sqrt()));
        if let Some(valid) = valid {
            let mut bias = vec![T::zero(); b * hd * n];
            for (r, row) in valid.iter().enumerate() {
                for (j, &ok) in row.iter().enumerate().take(n) {
                    if !ok {
                        (0..hd).for_each(|h| bias[(r * hd + h) * n + j] = T::lit(MASKED));
                    }
                }
            }
            logits = logits.add(g.constant(Tensor::from_vec([b * hd, 1, n], bias)?))?;
        }
        let attn = logits.softmax()?;
        let weighted = v.mul(attn.reshape([b * hd, n, 1])?)?;
        let merged = weighted.reshape([b, hd, n, dh])?.permute(&[0, 2, 1, 3])?.reshape([b, n, self.width])?;
        let mut updated = self.out.forward(p, merged)?;
        if self.residual {
            updated = updated.add(history)?;
        }
        Ok((attn, updated))
    }
}

/// Updated history vectors for one frame. `None` (the no-attention ablation)
/// passes the pair vectors through unchanged.
pub fn attend_history<T: Real>(
    module: Option<(&AdaptiveEncoder, &ParamStore<T>)>,
    v: &TextEmbedding<T>,
    history: &[HistoryEntry<T>],
) -> Result<Vec<Tensor<T>>> {
    let raw: Vec<Tensor<T>> = history.iter().map(|h| h.pair_embedding.vector.clone()).collect();
    let Some((enc, p)) = module else {
        return Ok(raw);
    };
    if raw.is_empty() {
        return Ok(raw);
    }
    let d = v.pooled.numel();
    let g = Graph::inference();
    let pooled = g.constant(v.pooled.clone().reshape([1, d])?);
    let hist = g.constant(Tensor::stack(&raw.iter().collect::<Vec<_>>())?.reshape([1, raw.len(), d])?);
    let (_, out) = enc.forward(p, pooled, hist, None)?;
    let out = out.tensor().reshape([raw.len(), d])?;
    Ok((0..raw.len()).map(|j| out.index0(j)).collect())
}

/// Outcome of similarity gating over the history prompts.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnchorSelection {
    /// Position in the history list of the chosen entry.
    pub selected: Option<usize>,
    pub selected_frame: Option<usize>,
    pub best_score: f64,
    pub threshold: f64,
    pub scores: Vec<f64>,
}

impl AnchorSelection {
    pub fn fired(&self) -> bool {
        self.selected.is_some()
    }

    pub fn entry<'a, T: Real>(&self, history: &'a [HistoryEntry<T>]) -> Option<&'a HistoryEntry<T>> {
        self.selected.map(|i| &history[i])
    }
}

/// Most text-similar history entry, kept only if its score reaches `tau`.
/// Ties go to the most recent frame.
pub fn select_anchor<T: Real>(v: &TextEmbedding<T>, history: &[HistoryEntry<T>], tau: f64) -> Result<AnchorSelection> {
    let scores: Vec<f64> = history.iter().map(|h| text_similarity(v, &h.prompt_embedding)).collect();
    select_from_scores(&scores, &history.iter().map(|h| h.frame_index).collect::<Vec<_>>(), tau)
}

pub fn select_from_scores(scores: &[f64], frame_indices: &[usize], tau: f64) -> Result<AnchorSelection> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::Invalid(format!("similarity threshold {tau} outside [-1, 1]")));
    }
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        best = match best {
            Some(b) if scores[b] > s || (scores[b] == s && frame_indices[b] > frame_indices[i]) => Some(b),
            _ => Some(i),
        };
    }
    let best_score = best.map_or(f64::NEG_INFINITY, |b| scores[b]);
    let selected = best.filter(|_| best_score >= tau);
    Ok(AnchorSelection {
        selected,
        selected_frame: selected.map(|i| frame_indices[i]),
        best_score,
        threshold: tau,
        scores: scores.to_vec(),
    })
}
