#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod context;
pub mod denoiser;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod schedule;
pub mod sampler;
pub mod seeds;
pub mod story_data;
pub mod tensor;

pub use autograd::Graph;
pub use codec::LatentCodec;
pub use config::{Ablation, RunConfig};
pub use context::{AnchorSelection, ConditionBundle, HistoryEntry};
pub use denoiser::{Denoiser, DenoiserConfig, TrainOptions};
pub use encoders::{EncoderConfig, Encoders, Vocab};
pub use metrics::{CharacterClassifier, MetricReport};
pub use nn::ParamStore;
pub use pipeline::Layout;
pub use sampler::{GuidanceConfig, Sampler, Task};
pub use error::{Error, Result};
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use story_data::{Dataset, DatasetManifest, DatasetParams, Frame, Image, Split, StoryRecord};
pub use tensor::{Real, Tensor};
