//! Fixtures shared by the benchmarks: an untrained desk-sized model with
//! conditions built from real dataset prompts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use storydiff::context::{attend_history, build_condition, ConditionBundle, HistoryEntry};
use storydiff::denoiser::{Denoiser, DenoiserConfig};
use storydiff::encoders::{EncoderConfig, Encoders, Vocab};
use storydiff::story_data::{generate_dataset, Dataset, DatasetParams};
use storydiff::{NoiseSchedule, ScheduleParams, Split, Tensor};

pub struct Fixture {
    pub data: Dataset,
    pub encoders: Encoders<f32>,
    pub model: Denoiser<f32>,
    pub schedule: NoiseSchedule,
    pub conds: Vec<ConditionBundle<f32>>,
    pub anchors: Vec<Tensor<f32>>,
    pub xt: Tensor<f32>,
}

/// `batch` conditions, each the last frame of a test story with the earlier
/// frames as history.
pub fn desk_fixture(batch: usize) -> Fixture {
    let data = generate_dataset(&DatasetParams { n_train: 1, n_valid: 1, n_test: batch, ..Default::default() }).expect("dataset");
    let encoders = Encoders::<f32>::new(EncoderConfig::default(), Vocab::shape_stories(), 0).expect("encoders");
    let model = Denoiser::<f32>::new(DenoiserConfig::desk(), 0).expect("denoiser");
    let schedule = ScheduleParams { steps: 200, beta_start: 5e-4, beta_end: 0.1 }.build().expect("schedule");
    let ctx = model.context().map(|c| (c, &model.params));
    let mut conds = Vec::new();
    let mut anchors = Vec::new();
    for story in data.split(Split::Test) {
        let last = story.len() - 1;
        let history: Vec<HistoryEntry<f32>> = story.frames[..last]
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let image = f.image.to_tensor::<f32>();
                HistoryEntry {
                    pair_embedding: encoders.encode_pair(&f.prompt, &image).expect("pair"),
                    prompt_embedding: encoders.encode_text(&f.prompt).expect("text"),
                    image,
                    frame_index: k,
                }
            })
            .collect();
        let v = encoders.encode_text(&story.frames[last].prompt).expect("text");
        conds.push(build_condition(&v, &attend_history(ctx, &v, &history).expect("attend")).expect("condition"));
        anchors.push(history[0].image.clone());
    }
    let lat = model.config().latent_shape().expect("latent");
    let xt = Tensor::randn([batch, lat[0], lat[1], lat[2]], &mut ChaCha8Rng::seed_from_u64(1));
    Fixture { data, encoders, model, schedule, conds, anchors, xt }
}
