//! Run configuration: one JSON document that, with its seeds, determines a
//! whole run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::denoiser::{DenoiserConfig, TrainOptions};
use crate::encoders::{ContrastiveOptions, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::ClassifierOptions;
use crate::sampler::{GuidanceConfig, Task};
use crate::schedule::ScheduleParams;
use crate::seeds::sha256_hex;
use crate::story_data::{DatasetParams, RosterProfile};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Sample with `g = 0`.
    pub no_guidance: bool,
    /// Pass history pair vectors straight into the condition.
    pub no_attention: bool,
    /// Drop the residual around history attention.
    pub no_attention_residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub data: DatasetParams,
    pub schedule: ScheduleParams,
    pub encoders: EncoderConfig,
    pub encoder_training: ContrastiveOptions,
    pub classifier: ClassifierOptions,
    pub denoiser: DenoiserConfig,
    pub training: TrainOptions,
    pub guidance: GuidanceConfig,
    pub ablation: Ablation,
    pub task: Task,
    /// Test stories to generate and score; `None` uses the whole split.
    pub eval_stories: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub const PROFILES: &[&str] = &["desk", "reference", "pororo-full", "flintstones-full"];

impl RunConfig {
    /// Single-CPU run: 2000/200/200 stories, T = 200, a small U-Net on a
    /// space-to-depth latent, strided sampling. The guidance weight is
    /// calibrated for the small image tower's gradient scale.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            data: DatasetParams::default(),
            schedule: ScheduleParams { steps: 200, beta_start: 5e-4, beta_end: 0.1 },
            encoders: EncoderConfig::default(),
            encoder_training: ContrastiveOptions { epochs: 3, target_retrieval: Some(0.95), ..Default::default() },
            classifier: ClassifierOptions { epochs: 2, ..Default::default() },
            denoiser: DenoiserConfig::desk(),
            training: TrainOptions { epochs: 8, lr: 1e-3, batch: 32, checkpoint_every: Some(250), ..Default::default() },
            guidance: GuidanceConfig { steps: Some(50), g: 8.0, ..Default::default() },
            ablation: Ablation::default(),
            task: Task::Continuation,
            eval_stories: None,
        }
    }

    /// Pixel-space U-Net (64/128/256, two blocks per level), 50 epochs at
    /// lr 1e-4, full-length sampling.
    pub fn reference() -> Self {
        Self {
            profile: "reference".into(),
            denoiser: DenoiserConfig::default(),
            training: TrainOptions { checkpoint_every: Some(1000), ..Default::default() },
            guidance: GuidanceConfig::default(),
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        let mut cfg = match name {
            "desk" => Self::desk(),
            "reference" => Self::reference(),
            "pororo-full" => Self { data: DatasetParams { n_train: 10191, n_valid: 2334, n_test: 2208, ..DatasetParams::default() }, ..Self::reference() },
            "flintstones-full" => Self {
                data: DatasetParams { n_train: 20132, n_valid: 2071, n_test: 2309, roster: RosterProfile::Flintstones, ..DatasetParams::default() },
                ..Self::reference()
            },
            _ => return Err(Error::Invalid(format!("unknown profile {name:?}; expected one of {}", PROFILES.join(", ")))),
        };
        cfg.profile = name.to_string();
        Ok(cfg)
    }

    /// Put one seed into every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.encoder_training.seed = seed;
        self.classifier.seed = seed;
        self.training.seed = seed;
        self.guidance.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule.build()?;
        self.denoiser.validate()?;
        self.guidance.validate()?;
        if self.encoders.d_model != self.denoiser.d_model {
            return Err(Error::Invalid(format!("encoder d_model {} differs from denoiser d_model {}", self.encoders.d_model, self.denoiser.d_model)));
        }
        if let Some(steps) = self.guidance.steps {
            if steps > self.schedule.steps {
                return Err(Error::Invalid(format!("{steps} sampling steps exceed the {}-step schedule", self.schedule.steps)));
            }
        }
        if self.training.batch == 0 || !(0.0..1.0).contains(&self.training.dropout_p) || !(self.training.lr > 0.0) {
            return Err(Error::Invalid("training needs batch > 0, dropout in [0, 1) and lr > 0".into()));
        }
        if self.eval_stories == Some(0) {
            return Err(Error::Invalid("eval_stories must be positive".into()));
        }
        Ok(())
    }

    /// Model config with the ablation flags applied.
    pub fn effective_denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            history_attention: self.denoiser.history_attention && !self.ablation.no_attention,
            attention_residual: self.denoiser.attention_residual && !self.ablation.no_attention_residual,
            ..self.denoiser.clone()
        }
    }

    pub fn effective_guidance(&self) -> GuidanceConfig {
        GuidanceConfig { g: if self.ablation.no_guidance { 0.0 } else { self.guidance.g }, ..self.guidance.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of the parts that shape `stage`'s trained weights.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let v = match stage {
            Stage::Data => serde_json::json!([self.data]),
            Stage::Encoders => serde_json::json!([self.data, self.encoders, self.encoder_training]),
            Stage::Classifier => serde_json::json!([self.data, self.classifier]),
            Stage::Denoiser => serde_json::json!([
                self.data,
                self.encoders,
                self.encoder_training,
                self.schedule,
                self.effective_denoiser(),
                TrainOptions { checkpoint_every: None, ..self.training.clone() }
            ]),
        };
        sha256_hex(v.to_string().as_bytes())
    }

    /// Parse a possibly partial config: keys given override the profile
    /// named by `"profile"` (default `desk`), recursively.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        let name = patch.get("profile").and_then(|p| p.as_str()).unwrap_or("desk");
        let mut base = serde_json::to_value(Self::profile(name)?)?;
        merge(&mut base, patch);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_json(self, path)
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Encoders,
    Classifier,
    Denoiser,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LatentCodec;

    #[test]
    fn profiles_validate_and_round_trip() {
        for name in PROFILES {
            let cfg = RunConfig::profile(name).unwrap();
            cfg.validate().unwrap();
            let tmp = tempfile::tempdir().unwrap();
            cfg.save(&tmp.path().join("c.json")).unwrap();
            let back = RunConfig::load(&tmp.path().join("c.json")).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        let full = RunConfig::profile("pororo-full").unwrap();
        assert_eq!((full.data.n_train, full.data.n_valid, full.data.n_test), (10191, 2334, 2208));
        let d = RunConfig::desk();
        assert_eq!((d.data.n_train, d.data.n_valid, d.data.n_test), (2000, 200, 200));
        assert_eq!(d.schedule.steps, 200);
        assert_eq!((d.guidance.gamma, d.guidance.g, d.guidance.tau_sim), (7.5, 8.0, 0.65));
        let r = RunConfig::reference().guidance;
        assert_eq!((r.gamma, r.g, r.tau_sim, r.steps), (7.5, 0.15, 0.65, None));
        assert_eq!(RunConfig::reference().training.lr, 1e-4);
        assert_eq!(RunConfig::reference().training.dropout_p, 0.1);
        assert_eq!(RunConfig::reference().denoiser.codec, LatentCodec::Identity);
        assert!(RunConfig::profile("imagenet").is_err());
    }

    #[test]
    fn partial_json_fills_defaults_and_bad_values_fail() {
        let cfg = RunConfig::from_json(r#"{"guidance": {"g": 0.3}, "training": {"epochs": 2}}"#).unwrap();
        assert_eq!(cfg.guidance.g, 0.3);
        assert_eq!(cfg.guidance.gamma, 7.5);
        assert_eq!((cfg.training.epochs, cfg.training.lr), (2, RunConfig::desk().training.lr));
        let r = RunConfig::from_json(r#"{"profile": "reference", "data": {"n_test": 10}}"#).unwrap();
        assert_eq!((r.data.n_test, r.denoiser.widths.clone()), (10, vec![64, 128, 256]));
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"guidance": {"gamma": 0.2}}"#).is_err());
        let bad = RunConfig { guidance: GuidanceConfig { gamma: 0.5, ..Default::default() }, ..RunConfig::desk() };
        assert!(bad.validate().is_err());
        let mut mismatch = RunConfig::desk();
        mismatch.encoders.d_model = 64;
        assert!(mismatch.validate().is_err());
    }

    #[test]
    fn ablation_flags_shape_effective_configs_and_hashes() {
        let base = RunConfig::desk();
        let no_attn = RunConfig { ablation: Ablation { no_attention: true, ..Default::default() }, ..base.clone() };
        assert!(!no_attn.effective_denoiser().history_attention);
        assert_ne!(base.stage_hash(Stage::Denoiser), no_attn.stage_hash(Stage::Denoiser));
        assert_eq!(base.stage_hash(Stage::Encoders), no_attn.stage_hash(Stage::Encoders));
        let no_guid = RunConfig { ablation: Ablation { no_guidance: true, ..Default::default() }, ..base.clone() };
        assert_eq!(no_guid.effective_guidance().g, 0.0);
        assert_eq!(base.stage_hash(Stage::Denoiser), no_guid.stage_hash(Stage::Denoiser));
        let seeded = base.clone().with_seed(42);
        assert_eq!((seeded.data.seed, seeded.training.seed, seeded.guidance.seed), (42, 42, 42));
    }
}
