//! Reverse diffusion: classifier-free guidance, the similarity-gradient
//! correction toward an anchor frame, and autoregressive story generation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::context::{attend_history, build_condition, select_anchor, AnchorSelection, ConditionBundle, HistoryEntry};
use crate::denoiser::Denoiser;
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::schedule::{strided_timesteps, NoiseSchedule};
use crate::seeds;
use crate::story_data::{contact_sheet, Image, StoryRecord, FRAME_SIZE};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub g: f64,
    pub tau_sim: f64,
    /// Reverse steps; `None` walks every step of the schedule.
    pub steps: Option<usize>,
    pub seed: u64,
    /// Stories sampled together per denoiser call.
    pub batch: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { gamma: 7.5, g: 0.15, tau_sim: 0.65, steps: None, seed: 0, batch: 16 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0) {
            return Err(Error::Invalid(format!("guidance scale gamma must be >= 1, got {}", self.gamma)));
        }
        if !(self.g >= 0.0) {
            return Err(Error::Invalid(format!("adaptive guidance weight g must be >= 0, got {}", self.g)));
        }
        if !(-1.0..=1.0).contains(&self.tau_sim) {
            return Err(Error::Invalid(format!("tau_sim {} outside [-1, 1]", self.tau_sim)));
        }
        if self.steps == Some(0) || self.batch == 0 {
            return Err(Error::Invalid("sampling steps and batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Visualization,
    Continuation,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visualization" => Ok(Self::Visualization),
            "continuation" => Ok(Self::Continuation),
            _ => Err(Error::Invalid(format!("unknown task {s:?}; expected visualization or continuation"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Visualization => "visualization",
            Self::Continuation => "continuation",
        })
    }
}

/// One frame to sample: its condition, the anchor image to pull toward
/// (pixel space), and the seed for its noise stream.
#[derive(Clone, Debug)]
pub struct FrameRequest<T: Real> {
    pub condition: ConditionBundle<T>,
    pub anchor: Option<Tensor<T>>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SampledFrame<T: Real> {
    /// `[3, 32, 32]` in `[-1, 1]`.
    pub image: Tensor<T>,
    pub guided: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub frame_index: usize,
    pub prompt: String,
    /// Ground-truth frame passed through (continuation frame 0).
    pub given: bool,
    pub anchor: Option<AnchorSelection>,
    pub guided: bool,
    pub seed: u64,
    /// `f(frame) . f(anchor)` on the finished frame.
    pub anchor_similarity: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StoryGenerationResult {
    pub story_id: String,
    pub task: Task,
    pub frames: Vec<Image>,
    pub log: Vec<FrameLog>,
}

impl StoryGenerationResult {
    /// `frame-<k>.png`, `grid.png` and `log.json` under `dir/<story_id>/`.
    pub fn write(&self, dir: &Path, config: &impl Serialize) -> Result<()> {
        let d = dir.join(&self.story_id);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (k, img) in self.frames.iter().enumerate() {
            let p = d.join(format!("frame-{k}.png"));
            std::fs::write(&p, img.encode_png()?).map_err(|e| Error::io(&p, e))?;
        }
        let p = d.join("grid.png");
        std::fs::write(&p, contact_sheet(&self.frames)?).map_err(|e| Error::io(&p, e))?;
        let log = serde_json::json!({ "story_id": self.story_id, "task": self.task, "frames": self.log, "config": config });
        checkpoint::save_json(&log, &d.join("log.json"))
    }
}

/// Read back the frames written by [`StoryGenerationResult::write`].
pub fn load_generated(dir: &Path, story_id: &str, len: usize) -> Result<Vec<Image>> {
    (0..len)
        .map(|k| {
            let p = dir.join(story_id).join(format!("frame-{k}.png"));
            Image::decode_png(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)
        })
        .collect()
}

pub struct Sampler<'a, T: Real> {
    pub model: &'a Denoiser<T>,
    pub encoders: &'a Encoders<T>,
    pub schedule: &'a NoiseSchedule,
    pub cfg: &'a GuidanceConfig,
}

fn randn<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let data = (0..shape.iter().product()).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
}

impl<T: Real> Sampler<'_, T> {
    fn doubled(&self, conds: &[&ConditionBundle<T>], null: &ConditionBundle<T>) -> Vec<ConditionBundle<T>> {
        conds.iter().map(|c| (*c).clone()).chain(conds.iter().map(|_| null.clone())).collect()
    }

    /// `ε(x|∅) + γ (ε(x|c) − ε(x|∅))` for a batch sharing step `t`. With
    /// `γ = 1` only the conditional pass runs.
    pub fn cfg_noise(&self, xt: &Tensor<T>, t: usize, conds: &[&ConditionBundle<T>]) -> Result<Tensor<T>> {
        let b = conds.len();
        let ts = vec![t; b];
        if self.cfg.gamma == 1.0 {
            return self.model.predict_noise(xt, &ts, conds);
        }
        let both = self.doubled(conds, &self.model.null_condition());
        let refs: Vec<&ConditionBundle<T>> = both.iter().collect();
        let e = self.model.predict_noise(&Tensor::concat(&[xt, xt], 0)?, &vec![t; 2 * b], &refs)?;
        let (ec, eu) = (e.narrow(0, 0, b)?, e.narrow(0, b, b)?);
        let gamma = T::lit(self.cfg.gamma);
        eu.zip_map(&ec, |u, c| u + gamma * (c - u))
    }

    /// Builds `Σ_b f(x_in,b) · f(x_h,b)` inside `g` with `x_t` as the input
    /// leaf; returns the CFG noise and the objective.
    fn guidance_graph<'g>(
        &self,
        g: &'g Graph<T>,
        x: Var<'g, T>,
        t: usize,
        conds: &[&ConditionBundle<T>],
        anchors: &[&Tensor<T>],
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let b = conds.len();
        let eps = if self.cfg.gamma == 1.0 {
            let (c, bias) = self.model.bundle_inputs(g, conds)?;
            self.model.eps_var(x, &vec![t; b], c, Some(bias))?
        } else {
            let both = self.doubled(conds, &self.model.null_condition());
            let (c, bias) = self.model.bundle_inputs(g, &both.iter().collect::<Vec<_>>())?;
            let e = self.model.eps_var(Var::concat(&[x, x], 0)?, &vec![t; 2 * b], c, Some(bias))?;
            let (ec, eu) = (e.narrow(0, 0, b)?, e.narrow(0, b, b)?);
            eu.add(ec.sub(eu)?.scale(T::lit(self.cfg.gamma)))?
        };
        let ab = self.schedule.alpha_bar(t)?;
        let w = self.schedule.blend_weight(t)?;
        let x0 = x.sub(eps.scale(T::lit((1.0 - ab).sqrt())))?.scale(T::lit(1.0 / ab.sqrt()));
        let x_in = x0.scale(T::lit(w)).add(x.scale(T::lit(1.0 - w)))?;
        let pixels = self.model.config().codec.decode_var(x_in)?;
        let emb = self.encoders.image_var(pixels)?;
        let target = self.encoders.embed_images(&Tensor::stack(anchors)?)?;
        let sim = emb.mul(g.constant(target))?.sum();
        Ok((eps, sim))
    }

    /// Summed guidance objective without gradients (finite-difference oracle).
    pub fn guidance_objective(&self, xt: &Tensor<T>, t: usize, conds: &[&ConditionBundle<T>], anchors: &[&Tensor<T>]) -> Result<f64> {
        let g = Graph::inference();
        let (_, sim) = self.guidance_graph(&g, g.constant(xt.clone()), t, conds, anchors)?;
        Ok(sim.tensor().data()[0].f64())
    }

    /// `∇_{x_t} Σ_b f(x_in,b) · f(x_h,b)` with the CFG noise it was built from.
    pub fn guidance_gradient(&self, xt: &Tensor<T>, t: usize, conds: &[&ConditionBundle<T>], anchors: &[&Tensor<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
        if anchors.len() != conds.len() {
            return Err(Error::Invalid(format!("{} anchors for {} conditions", anchors.len(), conds.len())));
        }
        let g = Graph::inference();
        let x = g.input(xt.clone());
        let (eps, sim) = self.guidance_graph(&g, x, t, conds, anchors)?;
        let grads = g.backward(sim)?;
        let grad = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(xt.shape().to_vec()));
        Ok((eps.tensor(), grad))
    }

    /// CFG noise minus `g sqrt(1 − ᾱ_t)` times the similarity gradient.
    /// `g = 0` returns [`Sampler::cfg_noise`] untouched.
    pub fn adaptive_noise(&self, xt: &Tensor<T>, t: usize, conds: &[&ConditionBundle<T>], anchors: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if self.cfg.g == 0.0 {
            return self.cfg_noise(xt, t, conds);
        }
        let (eps, grad) = self.guidance_gradient(xt, t, conds, anchors)?;
        if !grad.all_finite() {
            return Err(Error::Numerical(format!("non-finite guidance gradient at step {t}")));
        }
        let k = T::lit(self.cfg.g * self.schedule.blend_weight(t)?);
        eps.zip_map(&grad, |e, d| e - k * d)
    }

    /// Ancestral sampling of a batch of independent frames.
    pub fn sample_frames(&self, reqs: &[FrameRequest<T>]) -> Result<Vec<SampledFrame<T>>> {
        self.cfg.validate()?;
        if reqs.is_empty() {
            return Ok(Vec::new());
        }
        let lat = self.model.config().latent_shape()?;
        let per: usize = lat.iter().product();
        let b = reqs.len();
        let ts = strided_timesteps(self.schedule.steps(), self.cfg.steps.unwrap_or(self.schedule.steps()))?;
        let mut x = Vec::with_capacity(b * per);
        for r in reqs {
            x.extend(randn::<T>(&lat, &mut seeds::rng(r.seed, "x_T", 0)).into_data());
        }
        let mut x = Tensor::from_vec([b, lat[0], lat[1], lat[2]], x)?;
        let guided: Vec<usize> = (0..b).filter(|&i| self.cfg.g > 0.0 && reqs[i].anchor.is_some()).collect();
        let plain: Vec<usize> = (0..b).filter(|i| !guided.contains(i)).collect();
        let select = |x: &Tensor<T>, idx: &[usize]| Tensor::stack(&idx.iter().map(|&i| x.index0(i)).collect::<Vec<_>>().iter().collect::<Vec<_>>());
        for (k, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(k + 1).copied().unwrap_or(0);
            let mut eps = vec![T::zero(); b * per];
            for (idx, is_guided) in [(&plain, false), (&guided, true)] {
                if idx.is_empty() {
                    continue;
                }
                let xs = select(&x, idx)?;
                let conds: Vec<&ConditionBundle<T>> = idx.iter().map(|&i| &reqs[i].condition).collect();
                let e = if is_guided {
                    let anchors: Vec<&Tensor<T>> = idx.iter().map(|&i| reqs[i].anchor.as_ref().expect("guided")).collect();
                    self.adaptive_noise(&xs, t, &conds, &anchors)?
                } else {
                    self.cfg_noise(&xs, t, &conds)?
                };
                for (j, &i) in idx.iter().enumerate() {
                    eps[i * per..(i + 1) * per].copy_from_slice(&e.data()[j * per..(j + 1) * per]);
                }
            }
            let eps = Tensor::from_vec(x.shape().to_vec(), eps)?;
            let x0 = self.schedule.recover_x0(&x, t, &eps)?.clamp(-T::one(), T::one());
            let post = self.schedule.posterior(t, t_prev)?;
            let (cx0, cxt) = (T::lit(post.coef_x0), T::lit(post.coef_xt));
            let mut next = x0.zip_map(&x, |a, b| cx0 * a + cxt * b)?;
            if t_prev > 0 {
                let sd = T::lit(post.variance.sqrt());
                let nd = next.data_mut();
                for (i, r) in reqs.iter().enumerate() {
                    let z: Tensor<T> = randn(&lat, &mut seeds::rng(r.seed, "step", t as u64));
                    nd[i * per..(i + 1) * per].iter_mut().zip(z.data()).for_each(|(v, z)| *v += sd * *z);
                }
            }
            if !next.all_finite() {
                return Err(Error::Numerical(format!("non-finite sampler state at step {t}")));
            }
            x = next;
        }
        let pixels = self.model.config().codec.decode(&x)?.clamp(-T::one(), T::one());
        Ok((0..b).map(|i| SampledFrame { image: pixels.index0(i), guided: guided.contains(&i) }).collect())
    }

    pub fn sample_frame(&self, req: &FrameRequest<T>) -> Result<Tensor<T>> {
        Ok(self.sample_frames(std::slice::from_ref(req))?.remove(0).image)
    }

    /// Generate stories frame by frame; stories advance together in batches.
    /// History is built from the frames as saved (8-bit), so the log and the
    /// PNGs describe the same inputs.
    pub fn generate_stories(&self, stories: &[&StoryRecord], task: Task) -> Result<Vec<StoryGenerationResult>> {
        self.cfg.validate()?;
        let mut out = Vec::with_capacity(stories.len());
        for chunk in stories.chunks(self.cfg.batch) {
            out.extend(self.generate_chunk(chunk, task)?);
        }
        Ok(out)
    }

    pub fn generate_story(&self, story: &StoryRecord, task: Task) -> Result<StoryGenerationResult> {
        Ok(self.generate_stories(&[story], task)?.remove(0))
    }

    fn generate_chunk(&self, stories: &[&StoryRecord], task: Task) -> Result<Vec<StoryGenerationResult>> {
        let ctx = self.model.context().map(|c| (c, &self.model.params));
        let mut histories: Vec<Vec<HistoryEntry<T>>> = vec![Vec::new(); stories.len()];
        let mut results: Vec<StoryGenerationResult> = stories
            .iter()
            .map(|s| StoryGenerationResult { story_id: s.story_id.clone(), task, frames: Vec::new(), log: Vec::new() })
            .collect();
        let max_len = stories.iter().map(|s| s.len()).max().unwrap_or(0);
        for k in 0..max_len {
            let active: Vec<usize> = (0..stories.len()).filter(|&i| k < stories[i].len()).collect();
            let mut reqs = Vec::new();
            let mut pending = Vec::new();
            for &i in &active {
                let frame = &stories[i].frames[k];
                let seed = seeds::derive(self.cfg.seed, &stories[i].story_id, k as u64);
                let wrap = |e: Error| Error::Frame { index: k, reason: format!("{}: {e}", stories[i].story_id) };
                let v = self.encoders.encode_text(&frame.prompt).map_err(wrap)?;
                if task == Task::Continuation && k == 0 {
                    let image = frame.image.to_tensor::<T>();
                    results[i].frames.push(frame.image.clone());
                    results[i].log.push(FrameLog { frame_index: 0, prompt: frame.prompt.clone(), given: true, anchor: None, guided: false, seed, anchor_similarity: None });
                    let pair = self.encoders.encode_pair(&frame.prompt, &image).map_err(wrap)?;
                    histories[i].push(HistoryEntry { pair_embedding: pair, prompt_embedding: v, image, frame_index: 0 });
                    continue;
                }
                let anchor = select_anchor(&v, &histories[i], self.cfg.tau_sim).map_err(wrap)?;
                let updated = attend_history(ctx, &v, &histories[i]).map_err(wrap)?;
                let condition = build_condition(&v, &updated).map_err(wrap)?;
                let anchor_image = anchor.entry(&histories[i]).map(|h| h.image.clone());
                reqs.push(FrameRequest { condition, anchor: anchor_image, seed });
                pending.push((i, v, anchor));
            }
            let sampled = self.sample_frames(&reqs).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("frame {k}: {m}")),
                e => Error::Frame { index: k, reason: e.to_string() },
            })?;
            for ((i, v, anchor), s) in pending.into_iter().zip(sampled) {
                let frame = &stories[i].frames[k];
                let img = Image::from_tensor(&s.image)?;
                let image = img.to_tensor::<T>();
                let anchor_similarity = match anchor.entry(&histories[i]) {
                    Some(h) => {
                        let f = self.encoders.embed_images(&Tensor::stack(&[&image, &h.image])?)?;
                        Some(f.index0(0).dot(&f.index0(1)).f64())
                    }
                    None => None,
                };
                let seed = seeds::derive(self.cfg.seed, &stories[i].story_id, k as u64);
                results[i].log.push(FrameLog { frame_index: k, prompt: frame.prompt.clone(), given: false, anchor: Some(anchor), guided: s.guided, seed, anchor_similarity });
                results[i].frames.push(img);
                let pair = self.encoders.encode_pair(&frame.prompt, &image)?;
                histories[i].push(HistoryEntry { pair_embedding: pair, prompt_embedding: v, image, frame_index: k });
            }
        }
        Ok(results)
    }
}

/// Pixel-space image tensor sanity for anchors and outputs.
pub fn is_frame_shape<T: Real>(t: &Tensor<T>) -> bool {
    t.shape() == [3, FRAME_SIZE, FRAME_SIZE]
}
