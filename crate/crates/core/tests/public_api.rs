use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use storydiff::metrics::{character_f1, frame_accuracy};
use storydiff::pipeline::dataset_checksum;
use storydiff::story_data::{generate_dataset, load_dataset, save_dataset};
use storydiff::{DatasetParams, NoiseSchedule, RunConfig, Split, Tensor};

fn small() -> DatasetParams {
    DatasetParams { n_train: 12, n_valid: 4, n_test: 4, seed: 21, ..Default::default() }
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let data = generate_dataset(&small()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_dataset(&data, tmp.path()).unwrap();
    let back = load_dataset(tmp.path()).unwrap();
    assert_eq!(dataset_checksum(&data), dataset_checksum(&back));
    assert_eq!(back.split(Split::Test).len(), 4);
    for (id, s) in &data.stories {
        let b = &back.stories[id];
        for (f, g) in s.frames.iter().zip(&b.frames) {
            assert_eq!(f.prompt, g.prompt);
            assert_eq!(f.characters, g.characters);
            assert_eq!(f.image, g.image);
        }
    }
}

#[test]
fn dataset_seed_changes_the_checksum() {
    let a = generate_dataset(&small()).unwrap();
    let b = generate_dataset(&DatasetParams { seed: 22, ..small() }).unwrap();
    assert_eq!(dataset_checksum(&a), dataset_checksum(&generate_dataset(&small()).unwrap()));
    assert_ne!(dataset_checksum(&a), dataset_checksum(&b));
}

#[test]
fn every_profile_serializes_back_to_itself() {
    for name in ["desk", "reference", "pororo-full", "flintstones-full"] {
        let cfg = RunConfig::profile(name).unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back, "{name}");
        assert_eq!(cfg.hash(), back.hash());
    }
    assert!(RunConfig::profile("imaginary").is_err());
}

fn char_sets(max: usize) -> impl Strategy<Value = Vec<BTreeSet<usize>>> {
    prop::collection::vec(prop::collection::btree_set(0..max, 0..4), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_then_recover_is_identity(t in 1usize..=200, seed in any::<u64>()) {
        let s = NoiseSchedule::linear(200, 5e-4, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0: Tensor<f64> = Tensor::randn([3, 4, 4], &mut rng);
        let eps: Tensor<f64> = Tensor::randn([3, 4, 4], &mut rng);
        let xt = s.forward_sample(&x0, t, &eps).unwrap();
        let back = s.recover_x0(&xt, t, &eps).unwrap();
        prop_assert!(back.max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn alpha_bar_decreases_and_posterior_variance_is_bounded(steps in 2usize..300, lo in 1e-5f64..1e-3, span in 1e-3f64..0.05) {
        let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        for t in 2..=steps {
            let p = s.posterior(t, t - 1).unwrap();
            prop_assert!(p.variance >= 0.0 && p.variance <= s.beta(t).unwrap() + 1e-15);
        }
    }

    #[test]
    fn perfect_f1_implies_perfect_frame_accuracy(gold in char_sets(9)) {
        let f1 = character_f1(&gold, &gold).unwrap();
        prop_assert_eq!(f1, 1.0);
        prop_assert_eq!(frame_accuracy(&gold, &gold).unwrap(), 1.0);
    }

    #[test]
    fn f1_is_symmetric_and_bounded(pairs in prop::collection::vec((prop::collection::btree_set(0usize..9, 0..4), prop::collection::btree_set(0usize..9, 0..4)), 1..12)) {
        let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let a = character_f1(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, character_f1(&g, &p).unwrap());
        if a == 1.0 {
            prop_assert_eq!(frame_accuracy(&p, &g).unwrap(), 1.0);
        }
    }
}
