//! End-to-end stages on a run directory. Every trained artifact records the
//! hash of the config sections that shaped it and is reused when the hash
//! matches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Ablation, RunConfig, Stage};
use crate::context::{build_condition, select_anchor, attend_history, HistoryEntry};
use crate::denoiser::{self, CheckpointMeta, Denoiser, TrainState};
use crate::encoders::{Encoders, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_stories, CharacterClassifier, MetricReport, Scored};
use crate::sampler::{load_generated, FrameLog, FrameRequest, Sampler, StoryGenerationResult, Task};
use crate::seeds;
use crate::story_data::{self, Dataset, Split, StoryRecord};
use crate::tensor::Tensor;
use crate::NoiseSchedule;

/// Directory layout under a run home.
#[derive(Clone, Debug)]
pub struct Layout {
    pub home: PathBuf,
    /// Dataset location when it lives outside the home.
    pub data_dir: Option<PathBuf>,
}

impl Layout {
    pub fn new(home: impl Into<PathBuf>) -> Self {
        Self { home: home.into(), data_dir: None }
    }

    pub fn data(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.home.join("data"))
    }

    pub fn encoders(&self) -> PathBuf {
        self.home.join("checkpoints").join("encoders")
    }

    pub fn classifier(&self) -> PathBuf {
        self.home.join("checkpoints").join("classifier")
    }

    pub fn denoiser(&self, ablation: &Ablation) -> PathBuf {
        let mut name = "denoiser".to_string();
        if ablation.no_attention {
            name.push_str("-no-attention");
        } else if ablation.no_attention_residual {
            name.push_str("-no-residual");
        }
        self.home.join("checkpoints").join(name)
    }

    pub fn generated(&self, system: &str, task: Task) -> PathBuf {
        self.home.join("generated").join(system).join(task.to_string())
    }

    pub fn reports(&self) -> PathBuf {
        self.home.join("reports")
    }
}

/// Name of the system a config's ablation flags describe.
pub fn system_name(a: &Ablation) -> String {
    let mut parts = Vec::new();
    if a.no_attention {
        parts.push("no-attention");
    } else if a.no_attention_residual {
        parts.push("no-residual");
    }
    if a.no_guidance && !a.no_attention {
        parts.push("no-guidance");
    }
    if a.no_attention && !a.no_guidance {
        parts.push("guided");
    }
    if parts.is_empty() {
        "full".into()
    } else {
        parts.join("-")
    }
}

/// The three ablation rows: full, without guidance, and without history
/// attention (which also drops guidance).
pub fn sweep_systems() -> Vec<(String, Ablation)> {
    vec![
        ("full".into(), Ablation::default()),
        ("no-guidance".into(), Ablation { no_guidance: true, ..Default::default() }),
        ("no-attention".into(), Ablation { no_guidance: true, no_attention: true, ..Default::default() }),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage_hash: String,
    pub report: serde_json::Value,
}

/// The record written next to a trained stage, if any.
pub fn stage_record(dir: &Path) -> Option<StageRecord> {
    checkpoint::load_json(&dir.join("stage.json")).ok()
}

fn stage_matches(dir: &Path, hash: &str) -> bool {
    checkpoint::load_json::<StageRecord>(&dir.join("stage.json")).is_ok_and(|r| r.stage_hash == hash)
}

fn write_stage(dir: &Path, hash: &str, report: impl Serialize) -> Result<()> {
    checkpoint::save_json(&StageRecord { stage_hash: hash.to_string(), report: serde_json::to_value(report)? }, &dir.join("stage.json"))
}

/// Split sizes laid out like the dataset statistics table.
pub fn split_table(data: &Dataset) -> String {
    let n = |s: Split| data.manifest.split[&s].len();
    format!(
        "{:<14} {:>8} {:>8} {:>8}\n{:<14} {:>8} {:>8} {:>8}\n",
        "dataset",
        "train",
        "valid",
        "test",
        format!("ShapeStories-{}", data.manifest.roster.len()),
        n(Split::Train),
        n(Split::Valid),
        n(Split::Test)
    )
}

/// Digest of every story checksum in the manifest.
pub fn dataset_checksum(data: &Dataset) -> String {
    let joined: String = data.manifest.stories.iter().map(|(id, h)| format!("{id}:{h}\n")).collect();
    seeds::sha256_hex(joined.as_bytes())
}

pub fn make_data(cfg: &RunConfig, dir: &Path, force: bool) -> Result<Dataset> {
    if dir.join("manifest.json").exists() {
        if !force {
            return Err(Error::Invalid(format!("{} already holds a dataset; pass --force to replace it", dir.display())));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let t = Instant::now();
    let data = story_data::generate_dataset(&cfg.data)?;
    story_data::save_dataset(&data, dir)?;
    log::info!("dataset written to {} in {:.1}s", dir.display(), t.elapsed().as_secs_f64());
    Ok(data)
}

/// Load the run's dataset, creating it on first use.
pub fn ensure_data(cfg: &RunConfig, layout: &Layout) -> Result<Dataset> {
    let dir = layout.data();
    if !dir.join("manifest.json").exists() {
        return make_data(cfg, &dir, false);
    }
    let manifest = story_data::load_manifest(&dir)?;
    if manifest.params != cfg.data {
        return Err(Error::Invalid(format!(
            "dataset at {} was made with different parameters; rerun make-data --force",
            dir.display()
        )));
    }
    story_data::load_dataset(&dir)
}

pub fn ensure_encoders(cfg: &RunConfig, layout: &Layout, data: &Dataset) -> Result<Encoders<f32>> {
    let dir = layout.encoders();
    let hash = cfg.stage_hash(Stage::Encoders);
    if stage_matches(&dir, &hash) {
        return Encoders::load(&dir, Vocab::shape_stories());
    }
    let t = Instant::now();
    let mut enc = Encoders::<f32>::new(cfg.encoders, Vocab::shape_stories(), cfg.encoder_training.seed)?;
    let report = enc.train_contrastive(data, &cfg.encoder_training)?;
    log::info!("encoders trained in {:.0}s; validation retrieval {:?}", t.elapsed().as_secs_f64(), report.retrieval);
    let seconds = t.elapsed().as_secs_f64();
    enc.save(&dir, cfg.encoder_training.seed)?;
    write_stage(&dir, &hash, serde_json::json!({ "seconds": seconds, "training": report }))?;
    Ok(enc)
}

pub fn ensure_classifier(cfg: &RunConfig, layout: &Layout, data: &Dataset) -> Result<CharacterClassifier> {
    let dir = layout.classifier();
    let hash = cfg.stage_hash(Stage::Classifier);
    if stage_matches(&dir, &hash) {
        return CharacterClassifier::load(&dir);
    }
    let t = Instant::now();
    let mut clf = CharacterClassifier::new(data.roster().len(), cfg.classifier.seed);
    let report = clf.train(data, &cfg.classifier)?;
    log::info!("classifier trained in {:.0}s; validation F1 {:.4}", t.elapsed().as_secs_f64(), report.valid_f1);
    let seconds = t.elapsed().as_secs_f64();
    clf.save(&dir, cfg.classifier.seed)?;
    write_stage(&dir, &hash, serde_json::json!({ "seconds": seconds, "steps": report.steps, "valid_f1": report.valid_f1 }))?;
    Ok(clf)
}

fn matching_checkpoint(dir: &Path, hash: &str) -> Option<PathBuf> {
    let p = denoiser::latest_checkpoint(dir)?;
    let state: denoiser::CheckpointState = checkpoint::load_json(&p.join("state.json")).ok()?;
    (state.config_hash == hash).then_some(p)
}

/// Train (or resume) the denoiser for `cfg`'s ablation; returns EMA weights.
pub fn ensure_denoiser(cfg: &RunConfig, layout: &Layout, data: &Dataset, enc: &Encoders<f32>) -> Result<Denoiser<f32>> {
    let dir = layout.denoiser(&cfg.ablation);
    let hash = cfg.stage_hash(Stage::Denoiser);
    let mut state = match matching_checkpoint(&dir, &hash) {
        Some(p) => {
            let (s, _) = TrainState::load(&p)?;
            log::info!("resuming denoiser from {}", p.display());
            s
        }
        None => {
            if dir.exists() {
                log::info!("discarding stale checkpoints in {}", dir.display());
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            TrainState::new(Denoiser::new(cfg.effective_denoiser(), cfg.training.seed)?, &cfg.training)
        }
    };
    let digest = enc.digest();
    let meta = CheckpointMeta { schedule: cfg.schedule, options: &cfg.training, config_hash: &hash, encoder_digest: &digest };
    let per_epoch = (cfg.data.n_train * cfg.data.story_len).div_ceil(cfg.training.batch);
    let total = (cfg.training.epochs * per_epoch).min(cfg.training.max_steps.unwrap_or(usize::MAX));
    if state.step < total || denoiser::latest_checkpoint(&dir).is_none() {
        let t = Instant::now();
        let items = denoiser::prepare_items(data, Split::Train, enc, &cfg.denoiser.codec)?;
        log::info!(
            "training {} denoiser ({} parameters) on {} frames, steps {}..{}",
            system_name(&cfg.ablation),
            state.model.trainable_parameters(),
            items.len(),
            state.step,
            total
        );
        let schedule = cfg.schedule.build()?;
        denoiser::train(&mut state, &items, enc, &schedule, &cfg.training, Some((&dir, &meta)))?;
        state.save(&dir, &meta)?;
        log::info!("denoiser training finished in {:.0}s", t.elapsed().as_secs_f64());
    }
    state.ema_model()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub retrieval: Option<f64>,
    pub classifier_f1: Option<f64>,
    pub denoiser_parameters: usize,
    pub encoder_digest: String,
}

pub fn train(cfg: &RunConfig, layout: &Layout) -> Result<TrainSummary> {
    let data = ensure_data(cfg, layout)?;
    let enc = ensure_encoders(cfg, layout, &data)?;
    let clf = ensure_classifier(cfg, layout, &data)?;
    let model = ensure_denoiser(cfg, layout, &data, &enc)?;
    Ok(TrainSummary {
        retrieval: Some(enc.retrieval_accuracy(&data, Split::Valid, (cfg.data.n_valid * cfg.data.story_len).min(64))?),
        classifier_f1: Some(clf.split_f1(&data, Split::Valid)?),
        denoiser_parameters: model.trainable_parameters(),
        encoder_digest: enc.digest(),
    })
}

/// Loaded weights for sampling.
pub struct Models {
    pub data: Dataset,
    pub encoders: Encoders<f32>,
    pub denoiser: Denoiser<f32>,
    pub schedule: NoiseSchedule,
}

pub fn load_models(cfg: &RunConfig, layout: &Layout) -> Result<Models> {
    let data = ensure_data(cfg, layout)?;
    let enc_dir = layout.encoders();
    if !stage_matches(&enc_dir, &cfg.stage_hash(Stage::Encoders)) {
        return Err(Error::Invalid(format!("no encoders for this config under {}; run train first", enc_dir.display())));
    }
    let encoders = Encoders::load(&enc_dir, Vocab::shape_stories())?;
    let dir = layout.denoiser(&cfg.ablation);
    let ck = matching_checkpoint(&dir, &cfg.stage_hash(Stage::Denoiser))
        .ok_or_else(|| Error::Invalid(format!("no denoiser checkpoint for this config under {}; run train first", dir.display())))?;
    let (state, _) = TrainState::load(&ck)?;
    Ok(Models { data, encoders, denoiser: state.ema_model()?, schedule: cfg.schedule.build()? })
}

/// Test stories to generate: the listed ids, else the first `eval_stories`.
pub fn select_stories<'a>(cfg: &RunConfig, data: &'a Dataset, ids: Option<&[String]>) -> Result<Vec<&'a StoryRecord>> {
    match ids {
        Some(ids) => ids.iter().map(|id| data.story(id)).collect(),
        None => {
            let test = data.split(Split::Test);
            let n = cfg.eval_stories.unwrap_or(test.len()).min(test.len());
            Ok(test.into_iter().take(n).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub config_hash: String,
    pub system: String,
    pub task: Task,
    pub stories: Vec<String>,
}

pub fn generate(cfg: &RunConfig, layout: &Layout, out: &Path, task: Task, ids: Option<&[String]>) -> Result<Vec<StoryGenerationResult>> {
    let models = load_models(cfg, layout)?;
    let stories = select_stories(cfg, &models.data, ids)?;
    let guidance = cfg.effective_guidance();
    let sampler = Sampler { model: &models.denoiser, encoders: &models.encoders, schedule: &models.schedule, cfg: &guidance };
    let t = Instant::now();
    let mut results = Vec::with_capacity(stories.len());
    for chunk in stories.chunks(guidance.batch) {
        let done = sampler.generate_stories(chunk, task)?;
        for r in &done {
            r.write(out, cfg)?;
        }
        results.extend(done);
        log::info!("generated {}/{} stories ({:.0}s)", results.len(), stories.len(), t.elapsed().as_secs_f64());
    }
    let manifest = GenerationManifest {
        config_hash: cfg.hash(),
        system: system_name(&cfg.ablation),
        task,
        stories: stories.iter().map(|s| s.story_id.clone()).collect(),
    };
    checkpoint::save_json(&manifest, &out.join("manifest.json"))?;
    Ok(results)
}

/// Generate into the system's default directory unless a complete output
/// for the same config already exists there.
pub fn ensure_generated(cfg: &RunConfig, layout: &Layout, task: Task) -> Result<PathBuf> {
    let out = layout.generated(&system_name(&cfg.ablation), task);
    if let Ok(m) = checkpoint::load_json::<GenerationManifest>(&out.join("manifest.json")) {
        if m.config_hash == cfg.hash() {
            return Ok(out);
        }
    }
    generate(cfg, layout, &out, task, None)?;
    Ok(out)
}

fn read_logs(dir: &Path, id: &str) -> Result<Vec<FrameLog>> {
    let v: serde_json::Value = checkpoint::load_json(&dir.join(id).join("log.json"))?;
    serde_json::from_value(v["frames"].clone()).map_err(|e| Error::Data(format!("{id}/log.json: {e}")))
}

/// Fraction of frames with an earlier same-scene frame whose anchor fired.
pub fn firing_rate(stories: &[&StoryRecord], logs: &[Vec<FrameLog>]) -> Option<f64> {
    let (mut fired, mut total) = (0usize, 0usize);
    for (s, log) in stories.iter().zip(logs) {
        for l in log.iter().filter(|l| !l.given) {
            let k = l.frame_index;
            if s.frames[..k].iter().any(|f| f.scene_id == s.frames[k].scene_id) {
                total += 1;
                fired += l.anchor.as_ref().is_some_and(|a| a.fired()) as usize;
            }
        }
    }
    (total > 0).then(|| fired as f64 / total as f64)
}

pub fn evaluate(cfg: &RunConfig, layout: &Layout, generated: &Path, clf: Option<&CharacterClassifier>) -> Result<MetricReport> {
    let data = ensure_data(cfg, layout)?;
    let owned;
    let clf = match clf {
        Some(c) => c,
        None => {
            owned = ensure_classifier(cfg, layout, &data)?;
            &owned
        }
    };
    let manifest: GenerationManifest = checkpoint::load_json(&generated.join("manifest.json"))?;
    let stories: Vec<&StoryRecord> = manifest.stories.iter().map(|id| data.story(id)).collect::<Result<_>>()?;
    let mut items = Vec::with_capacity(stories.len());
    let mut logs = Vec::with_capacity(stories.len());
    for s in &stories {
        let frames = load_generated(generated, &s.story_id, s.len())?;
        let log = read_logs(generated, &s.story_id)?;
        let scored = log.iter().filter(|l| !l.given).map(|l| l.frame_index).collect();
        items.push(Scored { story: s, generated: frames, scored });
        logs.push(log);
    }
    let mut report = evaluate_stories(&items, clf, &manifest.system)?;
    report.firing_rate = firing_rate(&stories, &logs);
    report.config_hash = manifest.config_hash;
    report.dataset_seed = data.manifest.seed;
    checkpoint::save_json(&report, &generated.join("report.json"))?;
    std::fs::write(generated.join("report.txt"), MetricReport::table(std::slice::from_ref(&report))).map_err(|e| Error::io(generated, e))?;
    Ok(report)
}

/// Ablation rows (any of `full`, `no-guidance`, `no-attention`) on the same
/// test stories, training and generating whatever is missing.
pub fn sweep(cfg: &RunConfig, layout: &Layout, names: &[&str]) -> Result<Vec<MetricReport>> {
    let systems = sweep_systems();
    let mut chosen = Vec::new();
    for n in names {
        let s = systems.iter().find(|(name, _)| name == n).ok_or_else(|| {
            Error::Invalid(format!("unknown sweep row {n:?}; expected full, no-guidance or no-attention"))
        })?;
        chosen.push(s.clone());
    }
    let data = ensure_data(cfg, layout)?;
    let enc = ensure_encoders(cfg, layout, &data)?;
    let clf = ensure_classifier(cfg, layout, &data)?;
    let mut reports = Vec::new();
    for (name, ablation) in chosen {
        let c = RunConfig { ablation, ..cfg.clone() };
        ensure_denoiser(&c, layout, &data, &enc)?;
        let out = ensure_generated(&c, layout, c.task)?;
        let mut r = evaluate(&c, layout, &out, Some(&clf))?;
        r.system = name;
        reports.push(r);
    }
    let dir = layout.reports();
    checkpoint::save_json(&reports, &dir.join(format!("sweep-{}.json", cfg.task)))?;
    std::fs::write(dir.join(format!("sweep-{}.txt", cfg.task)), MetricReport::table(&reports)).map_err(|e| Error::io(&dir, e))?;
    Ok(reports)
}

/// Write the real test frames in the generated-output layout, so they can be
/// scored like a system.
pub fn export_ground_truth(cfg: &RunConfig, layout: &Layout, out: &Path, task: Task, ids: Option<&[String]>) -> Result<()> {
    let data = ensure_data(cfg, layout)?;
    let stories = select_stories(cfg, &data, ids)?;
    for s in &stories {
        let log = s
            .frames
            .iter()
            .enumerate()
            .map(|(k, f)| FrameLog {
                frame_index: k,
                prompt: f.prompt.clone(),
                given: task == Task::Continuation && k == 0,
                anchor: None,
                guided: false,
                seed: 0,
                anchor_similarity: None,
            })
            .collect();
        let r = StoryGenerationResult { story_id: s.story_id.clone(), task, frames: s.frames.iter().map(|f| f.image.clone()).collect(), log };
        r.write(out, cfg)?;
    }
    let manifest = GenerationManifest {
        config_hash: cfg.hash(),
        system: "ground-truth".into(),
        task,
        stories: stories.iter().map(|s| s.story_id.clone()).collect(),
    };
    checkpoint::save_json(&manifest, &out.join("manifest.json"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignProbeFrame {
    pub story_id: String,
    pub frame_index: usize,
    pub anchor_frame: usize,
    pub guided: f64,
    pub unguided: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignProbe {
    pub config_hash: String,
    pub g: f64,
    pub frames: Vec<SignProbeFrame>,
}

impl SignProbe {
    /// Share of frames where guidance raised the final anchor similarity.
    pub fn improved_fraction(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.frames.iter().filter(|f| f.guided > f.unguided).count() as f64 / self.frames.len() as f64
    }
}

/// On repeated-scene frames with ground-truth history, sample each frame
/// with the configured `g` and with `g = 0` from the same seed and compare
/// `f(x_0) . f(x_h)` at the end of the trajectory.
pub fn sign_probe(cfg: &RunConfig, models: &Models, max_frames: usize) -> Result<SignProbe> {
    let guided_cfg = cfg.effective_guidance();
    let plain_cfg = crate::sampler::GuidanceConfig { g: 0.0, ..guided_cfg.clone() };
    let ctx = models.denoiser.context().map(|c| (c, &models.denoiser.params));
    let mut reqs = Vec::new();
    let mut meta = Vec::new();
    'stories: for s in select_stories(cfg, &models.data, None)? {
        let mut history: Vec<HistoryEntry<f32>> = Vec::new();
        for (k, f) in s.frames.iter().enumerate() {
            let v = models.encoders.encode_text(&f.prompt)?;
            let repeated = s.frames[..k].iter().any(|p| p.scene_id == f.scene_id);
            let anchor = select_anchor(&v, &history, guided_cfg.tau_sim)?;
            if let (true, Some(h)) = (repeated, anchor.entry(&history)) {
                let cond = build_condition(&v, &attend_history(ctx, &v, &history)?)?;
                reqs.push(FrameRequest { condition: cond, anchor: Some(h.image.clone()), seed: seeds::derive(guided_cfg.seed, &s.story_id, k as u64) });
                meta.push((s.story_id.clone(), k, h.frame_index));
                if reqs.len() >= max_frames {
                    break 'stories;
                }
            }
            let image = f.image.to_tensor::<f32>();
            let pair = models.encoders.encode_pair(&f.prompt, &image)?;
            history.push(HistoryEntry { pair_embedding: pair, prompt_embedding: v, image, frame_index: k });
        }
    }
    let mut sims: BTreeMap<bool, Vec<f64>> = BTreeMap::new();
    for (is_guided, gc) in [(true, &guided_cfg), (false, &plain_cfg)] {
        let sampler = Sampler { model: &models.denoiser, encoders: &models.encoders, schedule: &models.schedule, cfg: gc };
        let mut out = Vec::with_capacity(reqs.len());
        for chunk in reqs.chunks(gc.batch) {
            for (req, frame) in chunk.iter().zip(sampler.sample_frames(chunk)?) {
                let img = story_data::Image::from_tensor(&frame.image)?.to_tensor::<f32>();
                let anchor = req.anchor.as_ref().expect("probe frames have anchors");
                let f = models.encoders.embed_images(&Tensor::stack(&[&img, anchor])?)?;
                out.push(f.index0(0).dot(&f.index0(1)) as f64);
            }
        }
        sims.insert(is_guided, out);
    }
    let frames = meta
        .into_iter()
        .enumerate()
        .map(|(i, (story_id, frame_index, anchor_frame))| SignProbeFrame { story_id, frame_index, anchor_frame, guided: sims[&true][i], unguided: sims[&false][i] })
        .collect();
    Ok(SignProbe { config_hash: cfg.hash(), g: guided_cfg.g, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LatentCodec;
    use crate::denoiser::DenoiserConfig;
    use crate::encoders::EncoderConfig;

    pub(crate) fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.data.n_train = 6;
        cfg.data.n_valid = 2;
        cfg.data.n_test = 2;
        cfg.encoders = EncoderConfig { d_model: 16, text_layers: 1, heads: 2, image_widths: [4, 8, 8, 8] };
        cfg.encoder_training.epochs = 1;
        cfg.encoder_training.batch = 8;
        cfg.classifier.epochs = 1;
        cfg.denoiser = DenoiserConfig { widths: vec![8, 16], res_blocks: 1, attn_levels: vec![1], heads: 2, d_model: 16, groups: 4, codec: LatentCodec::SpaceToDepth { factor: 2 }, ..DenoiserConfig::desk() };
        cfg.training.epochs = 1;
        cfg.training.batch = 16;
        cfg.training.checkpoint_every = Some(1);
        cfg.schedule.steps = 20;
        cfg.guidance.steps = Some(3);
        cfg.guidance.tau_sim = -1.0;
        cfg
    }

    #[test]
    fn system_names() {
        let names: Vec<String> = sweep_systems().iter().map(|(_, a)| system_name(a)).collect();
        assert_eq!(names, ["full", "no-guidance", "no-attention"]);
        assert_eq!(system_name(&Ablation { no_attention: true, ..Default::default() }), "no-attention-guided");
    }

    #[test]
    fn stages_are_cached_and_generation_is_reproducible() {
        let tmp = tempfile::tempdir().unwrap();
        let layout = Layout::new(tmp.path());
        let cfg = tiny_run();
        let summary = train(&cfg, &layout).unwrap();
        assert!(summary.denoiser_parameters > 0);
        let enc_stage = std::fs::read(layout.encoders().join("stage.json")).unwrap();
        let ck = denoiser::latest_checkpoint(&layout.denoiser(&cfg.ablation)).unwrap();
        // second run reuses everything
        let again = train(&cfg, &layout).unwrap();
        assert_eq!(again.encoder_digest, summary.encoder_digest);
        assert_eq!(std::fs::read(layout.encoders().join("stage.json")).unwrap(), enc_stage);
        assert_eq!(denoiser::latest_checkpoint(&layout.denoiser(&cfg.ablation)).unwrap(), ck);

        let a = tmp.path().join("gen-a");
        let b = tmp.path().join("gen-b");
        generate(&cfg, &layout, &a, Task::Continuation, None).unwrap();
        generate(&cfg, &layout, &b, Task::Continuation, None).unwrap();
        for id in ["test-00000", "test-00001"] {
            for k in 0..5 {
                let f = format!("{id}/frame-{k}.png");
                assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap());
            }
        }
        assert!(generate(&cfg, &layout, &a, Task::Continuation, Some(&["test-99999".to_string()])).is_err());

        let logs: Vec<Vec<FrameLog>> = ["test-00000", "test-00001"].iter().map(|id| read_logs(&a, id).unwrap()).collect();
        let data = ensure_data(&cfg, &layout).unwrap();
        let stories = select_stories(&cfg, &data, None).unwrap();
        if stories.iter().any(|s| !s.repeated_scene_pairs().is_empty()) {
            assert_eq!(firing_rate(&stories, &logs), Some(1.0));
        }

        let fresh = RunConfig { data: crate::story_data::DatasetParams { seed: 99, ..cfg.data }, ..cfg.clone() };
        assert!(ensure_data(&fresh, &layout).is_err());
        assert!(make_data(&cfg, &layout.data(), false).is_err());
    }
}
