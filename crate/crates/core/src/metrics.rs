//! Evaluation: a small multi-label character classifier whose backbone
//! features drive FID, plus set-based character metrics and a scene
//! consistency probe.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, GroupNorm, Linear, ParamStore};
use crate::seeds;
use crate::story_data::{Dataset, Image, Split, StoryRecord};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 64;
const JITTER: f64 = 1e-6;

/// Conv backbone (32 -> 4 spatial) projected to a 64-d feature, then one sigmoid logit per
/// roster character.
#[derive(Clone, Debug)]
pub struct CharacterClassifier {
    pub params: ParamStore<f32>,
    convs: Vec<(Conv2d, GroupNorm)>,
    proj: Linear,
    head: Linear,
    roster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        Self { epochs: 3, batch: 64, lr: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub valid_f1: f64,
}

impl CharacterClassifier {
    pub fn new(roster: usize, seed: u64) -> Self {
        let mut p = ParamStore::new();
        let rng = &mut seeds::rng(seed, "classifier", 0);
        let spec = [(3, 16, 1), (16, 32, 2), (32, 64, 2), (64, FEATURE_DIM, 2)];
        let convs = spec
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| {
                let conv = Conv2d::new(&mut p, &format!("clf.conv{i}"), cin, cout, 3, s, 1, rng);
                (conv, GroupNorm::new(&mut p, &format!("clf.norm{i}"), 8, cout))
            })
            .collect();
        let proj = Linear::new(&mut p, "clf.proj", FEATURE_DIM * 16, FEATURE_DIM, true, rng);
        let head = Linear::new(&mut p, "clf.head", FEATURE_DIM, roster, true, rng);
        Self { params: p, convs, proj, head, roster }
    }

    pub fn roster(&self) -> usize {
        self.roster
    }

    fn features_var<'g>(&self, x: Var<'g, f32>) -> Result<Var<'g, f32>> {
        let mut h = x;
        for (c, n) in &self.convs {
            h = n.forward(&self.params, c.forward(&self.params, h)?)?.relu();
        }
        let b = h.shape()[0];
        Ok(self.proj.forward(&self.params, h.reshape([b, FEATURE_DIM * 16])?)?.relu())
    }

    /// Backbone features `[n, 64]` for images `[n, 3, 32, 32]`.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::inference();
        Ok(self.features_var(g.constant(images.clone()))?.tensor())
    }

    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::inference();
        let f = self.features_var(g.constant(images.clone()))?;
        Ok(self.head.forward(&self.params, f)?.tensor())
    }

    /// Predicted character-id sets (logit > 0, i.e. probability > 0.5).
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<BTreeSet<usize>>> {
        let l = self.logits(images)?;
        Ok((0..l.dim(0)).map(|i| (0..self.roster).filter(|&c| l.data()[i * self.roster + c] > 0.0).collect()).collect())
    }

    pub fn predict_frames(&self, frames: &[&Image]) -> Result<Vec<BTreeSet<usize>>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(256) {
            out.extend(self.predict(&stack_images(chunk)?)?);
        }
        Ok(out)
    }

    pub fn frame_features(&self, frames: &[&Image]) -> Result<Tensor<f32>> {
        let mut parts = Vec::new();
        for chunk in frames.chunks(256) {
            parts.push(self.features(&stack_images(chunk)?)?);
        }
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
    }

    pub fn train(&mut self, data: &Dataset, opts: &ClassifierOptions) -> Result<ClassifierReport> {
        let frames: Vec<(&Image, &[usize])> = data.split(Split::Train).iter().flat_map(|s| s.frames.iter().map(|f| (&f.image, f.characters.as_slice()))).collect();
        let mut adam = Adam::new(&self.params, opts.lr);
        let mut losses = Vec::new();
        for epoch in 0..opts.epochs {
            let mut order: Vec<usize> = (0..frames.len()).collect();
            order.shuffle(&mut seeds::rng(opts.seed, "classifier-epoch", epoch as u64));
            for chunk in order.chunks(opts.batch) {
                let images = stack_images(&chunk.iter().map(|&i| frames[i].0).collect::<Vec<_>>())?;
                let mut targets = vec![0f32; chunk.len() * self.roster];
                for (r, &i) in chunk.iter().enumerate() {
                    frames[i].1.iter().for_each(|&c| targets[r * self.roster + c] = 1.0);
                }
                let targets = Tensor::from_vec([chunk.len(), self.roster], targets)?;
                let g = Graph::training();
                let f = self.features_var(g.constant(images))?;
                let loss = self.head.forward(&self.params, f)?.bce_with_logits(&targets)?;
                let value = loss.tensor().data()[0] as f64;
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("classifier loss {value} at step {}", losses.len())));
                }
                let grads = g.backward(loss)?.for_store(&self.params);
                adam.step(&mut self.params, &grads)?;
                losses.push(value);
            }
            log::info!("classifier epoch {}: loss {:.4}", epoch + 1, losses.last().copied().unwrap_or(f64::NAN));
        }
        let valid_f1 = self.split_f1(data, Split::Valid)?;
        Ok(ClassifierReport { steps: losses.len(), losses, valid_f1 })
    }

    /// Micro-F1 on the clean frames of a split.
    pub fn split_f1(&self, data: &Dataset, split: Split) -> Result<f64> {
        let stories = data.split(split);
        let frames: Vec<&Image> = stories.iter().flat_map(|s| s.frames.iter().map(|f| &f.image)).collect();
        let gold: Vec<BTreeSet<usize>> = stories.iter().flat_map(|s| s.frames.iter().map(|f| f.characters.iter().copied().collect())).collect();
        character_f1(&self.predict_frames(&frames)?, &gold)
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        checkpoint::save_weights(&self.params, &dir.join("weights.bin"))?;
        checkpoint::save_json(&serde_json::json!({ "roster": self.roster, "seed": seed, "feature_dim": FEATURE_DIM }), &dir.join("classifier.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value = checkpoint::load_json(&dir.join("classifier.json"))?;
        let roster = meta["roster"].as_u64().ok_or_else(|| Error::Checkpoint("classifier.json lacks roster".into()))? as usize;
        let mut clf = Self::new(roster, 0);
        clf.params.copy_from(&checkpoint::load_weights(&dir.join("weights.bin"))?)?;
        Ok(clf)
    }
}

pub fn stack_images(frames: &[&Image]) -> Result<Tensor<f32>> {
    let ts: Vec<Tensor<f32>> = frames.iter().map(|f| f.to_tensor()).collect();
    Tensor::stack(&ts.iter().collect::<Vec<_>>())
}

fn moments(x: &Tensor<f32>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.dim(0), x.dim(1));
    let m = DMatrix::from_row_iterator(n, d, x.data().iter().map(|&v| v as f64));
    let mu = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `Tr((A B)^{1/2})` for PSD `A`, `B` via the similar symmetric matrix
/// `A^{1/2} B A^{1/2}`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sqrt_psd(a);
    let m = &ra * b * &ra;
    SymmetricEigen::new((&m + m.transpose()) * 0.5).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussian fits of two feature sets `[n, d]`.
pub fn fid_from_features(real: &Tensor<f32>, generated: &Tensor<f32>) -> Result<f64> {
    let d = real.dim(1);
    for (name, x) in [("real", real), ("generated", generated)] {
        if x.ndim() != 2 || x.dim(1) != d {
            return Err(Error::Shape(format!("{name} features {:?} for width {d}", x.shape())));
        }
        if x.dim(0) < 2 * d {
            return Err(Error::Invalid(format!("FID needs at least {} {name} frames, got {}", 2 * d, x.dim(0))));
        }
    }
    let (mr, mut cr) = moments(real);
    let (mg, mut cg) = moments(generated);
    for i in 0..d {
        cr[(i, i)] += JITTER;
        cg[(i, i)] += JITTER;
    }
    if cr.iter().chain(cg.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature covariance".into()));
    }
    let diff = (&mr - &mg).norm_squared();
    let value = diff + cr.trace() + cg.trace() - 2.0 * trace_sqrt_product(&cr, &cg);
    if value < 0.0 {
        if value < -1e-6 {
            log::warn!("FID {value} below zero from round-off; clamped");
        }
        return Ok(0.0);
    }
    Ok(value)
}

pub fn fid(real: &[&Image], generated: &[&Image], clf: &CharacterClassifier) -> Result<f64> {
    fid_from_features(&clf.frame_features(real)?, &clf.frame_features(generated)?)
}

fn check_aligned(pred: &[BTreeSet<usize>], gold: &[BTreeSet<usize>]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Invalid(format!("{} predicted frames against {} gold frames", pred.len(), gold.len())));
    }
    Ok(())
}

/// Micro-averaged F1 over per-frame character sets.
pub fn character_f1(pred: &[BTreeSet<usize>], gold: &[BTreeSet<usize>]) -> Result<f64> {
    check_aligned(pred, gold)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let hit = p.intersection(g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Fraction of frames whose predicted set equals the gold set.
pub fn frame_accuracy(pred: &[BTreeSet<usize>], gold: &[BTreeSet<usize>]) -> Result<f64> {
    check_aligned(pred, gold)?;
    if gold.is_empty() {
        return Err(Error::Invalid("frame accuracy over zero frames".into()));
    }
    Ok(pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64)
}

/// Cosine of backbone features rescaled to `[0, 1]`, averaged over all
/// frame pairs of `story` that share a gold scene. `None` without such pairs.
pub fn scene_consistency(features: &Tensor<f32>, story: &StoryRecord) -> Option<f64> {
    let pairs = story.repeated_scene_pairs();
    if pairs.is_empty() {
        return None;
    }
    let total: f64 = pairs.iter().map(|&(i, j)| (crate::encoders::cosine(&features.index0(i), &features.index0(j)) + 1.0) / 2.0).sum();
    Some(total / pairs.len() as f64)
}

/// Feature-space chance level: consistency over random frame pairs drawn
/// from different stories.
pub fn random_pair_consistency(features: &Tensor<f32>, pairs: usize, seed: u64) -> f64 {
    let n = features.dim(0);
    let mut rng = seeds::rng(seed, "random-pairs", 0);
    let idx: Vec<usize> = (0..n).collect();
    let total: f64 = (0..pairs)
        .map(|_| {
            let s: Vec<&usize> = idx.choose_multiple(&mut rng, 2).collect();
            (crate::encoders::cosine(&features.index0(*s[0]), &features.index0(*s[1])) + 1.0) / 2.0
        })
        .sum();
    total / pairs as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub system: String,
    pub fid: f64,
    /// FID between two disjoint halves of the real test frames.
    pub fid_floor: f64,
    pub char_f1: f64,
    pub frame_acc: f64,
    /// Added diagnostic, not one of the headline metrics.
    pub scene_consistency: Option<f64>,
    pub firing_rate: Option<f64>,
    pub n_stories: usize,
    pub n_frames: usize,
    pub f1_averaging: String,
    pub config_hash: String,
    pub dataset_seed: u64,
}

impl MetricReport {
    pub fn table(reports: &[MetricReport]) -> String {
        let mut s = format!("{:<14} {:>8} {:>8} {:>8} {:>8}\n", "system", "FID", "Char-F1", "F-Acc", "Scene");
        for r in reports {
            let scene = r.scene_consistency.map_or("-".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!("{:<14} {:>8.3} {:>8.2} {:>8.2} {:>8}\n", r.system, r.fid, 100.0 * r.char_f1, 100.0 * r.frame_acc, scene));
        }
        if let Some(r) = reports.first() {
            s.push_str(&format!("FID floor (split-half real) {:.3}; Char-F1 micro-averaged; {} stories, {} frames\n", r.fid_floor, r.n_stories, r.n_frames));
        }
        s
    }
}

/// Feature-space FID between even- and odd-indexed real frames.
pub fn split_half_floor(real: &[&Image], clf: &CharacterClassifier) -> Result<f64> {
    let a: Vec<&Image> = real.iter().step_by(2).copied().collect();
    let b: Vec<&Image> = real.iter().skip(1).step_by(2).copied().collect();
    fid(&a, &b, clf)
}

/// Frames, gold sets and generated images aligned for scoring.
pub struct Scored<'a> {
    pub story: &'a StoryRecord,
    pub generated: Vec<Image>,
    /// Frame indices that count (generated, not given).
    pub scored: Vec<usize>,
}

pub fn evaluate_stories(items: &[Scored<'_>], clf: &CharacterClassifier, system: &str) -> Result<MetricReport> {
    let mut real = Vec::new();
    let mut gen = Vec::new();
    let mut gold = Vec::new();
    let mut consistency = Vec::new();
    for it in items {
        if it.generated.len() != it.story.len() {
            return Err(Error::Invalid(format!("{}: {} generated frames for a {}-frame story", it.story.story_id, it.generated.len(), it.story.len())));
        }
        for &k in &it.scored {
            real.push(&it.story.frames[k].image);
            gen.push(&it.generated[k]);
            gold.push(it.story.frames[k].characters.iter().copied().collect::<BTreeSet<usize>>());
        }
        let feats = clf.frame_features(&it.generated.iter().collect::<Vec<_>>())?;
        if let Some(c) = scene_consistency(&feats, it.story) {
            consistency.push(c);
        }
    }
    let pred = clf.predict_frames(&gen)?;
    Ok(MetricReport {
        system: system.to_string(),
        fid: fid(&real, &gen, clf)?,
        fid_floor: split_half_floor(&real, clf)?,
        char_f1: character_f1(&pred, &gold)?,
        frame_acc: frame_accuracy(&pred, &gold)?,
        scene_consistency: (!consistency.is_empty()).then(|| consistency.iter().sum::<f64>() / consistency.len() as f64),
        firing_rate: None,
        n_stories: items.len(),
        n_frames: gen.len(),
        f1_averaging: "micro".into(),
        config_hash: String::new(),
        dataset_seed: 0,
    })
}

/// Newton–Schulz iteration for `A^{1/2}` (independent check on the
/// eigendecomposition path).
pub fn newton_schulz_sqrt(a: &DMatrix<f64>, iters: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.norm();
    let mut y = a / norm;
    let mut z = DMatrix::<f64>::identity(n, n);
    let eye3 = DMatrix::<f64>::identity(n, n) * 3.0;
    for _ in 0..iters {
        let t = (&eye3 - &z * &y) * 0.5;
        y = &y * &t;
        z = &t * &z;
    }
    y * norm.sqrt()
}
