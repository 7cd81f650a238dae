//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.
//!
//! The end-to-end criteria train the desk configuration under an acceptance
//! home (`STORYDIFF_ACCEPTANCE_HOME`, default `target/acceptance-home`).
//! Trained stages, generated stories and the sign-probe samples are reused
//! when their config hash matches; every metric is recomputed from the files
//! on disk on each run.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use storydiff::checkpoint;
use storydiff::config::Stage;
use storydiff::context::{attend_history, build_condition, select_from_scores, AdaptiveEncoder};
use storydiff::denoiser::{self, CheckpointState};
use storydiff::metrics::{self, character_f1, fid, fid_from_features, frame_accuracy, random_pair_consistency, scene_consistency, split_half_floor};
use storydiff::pipeline::{self, Layout, SignProbe};
use storydiff::schedule::reparam_with_weight;
use storydiff::{
    ConditionBundle, Dataset, Denoiser, DenoiserConfig, EncoderConfig, Encoders, Graph, GuidanceConfig, HistoryEntry, Image, NoiseSchedule, ParamStore, RunConfig, Sampler, Split, Tensor, Vocab,
};

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { pass: true, summary: String::new(), details: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        self.details.push(format!("  [{}] {what}", if ok { "ok" } else { "FAILED" }));
        self.pass &= ok;
    }

    fn note(&mut self, what: impl Into<String>) {
        self.details.push(format!("  {}", what.into()));
    }
}

fn run(id: usize, name: &str, f: impl FnOnce(&mut Outcome)) -> bool {
    let t = Instant::now();
    let mut out = Outcome::new();
    let res = catch_unwind(AssertUnwindSafe(|| f(&mut out)));
    if let Err(e) = res {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
        out.check(false, format!("aborted: {msg}"));
    }
    for d in &out.details {
        println!("{d}");
    }
    println!(
        "criterion {id} {}: {name}{}{} ({:.1}s)",
        if out.pass { "PASS" } else { "FAIL" },
        if out.summary.is_empty() { "" } else { " - " },
        out.summary,
        t.elapsed().as_secs_f64()
    );
    out.pass
}

fn acceptance_home() -> PathBuf {
    std::env::var_os("STORYDIFF_ACCEPTANCE_HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-home"))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn diffusion_algebra(o: &mut Outcome) {
    let t0 = Instant::now();
    let desk = RunConfig::desk().schedule.build().unwrap();
    let reference = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for s in [&desk, &reference] {
        for t in [1, 2, s.steps() / 2, s.steps()] {
            let x0: Tensor<f64> = Tensor::uniform([3, 32, 32], 1.0, &mut rng);
            let eps: Tensor<f64> = Tensor::randn([3, 32, 32], &mut rng);
            let back = s.recover_x0(&s.forward_sample(&x0, t, &eps).unwrap(), t, &eps).unwrap();
            worst = worst.max(back.max_abs_diff(&x0));
        }
    }
    o.check(worst < 1e-5, format!("forward/recover round trip, max error {worst:.2e} (tol 1e-5)"));

    // iterated one-step corruption vs the closed form at t = 20 of the desk schedule
    let (t, x0, n) = (20usize, 0.8f64, 10_000usize);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut x = x0;
        for k in 1..=t {
            let a = desk.alpha(k).unwrap();
            let e: f64 = StandardNormal.sample(&mut rng);
            x = a.sqrt() * x + (1.0 - a).sqrt() * e;
        }
        sum += x;
        sq += x * x;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let ab = desk.alpha_bar(t).unwrap();
    let (em, ev) = (rel(mean, ab.sqrt() * x0), rel(var, 1.0 - ab));
    o.check(em < 0.02 && ev < 0.05, format!("Monte-Carlo moments at t={t}, N={n}: mean rel err {em:.4} (< 0.02), var rel err {ev:.4} (< 0.05)"));

    let xt: Tensor<f64> = Tensor::randn([3, 32, 32], &mut rng);
    let x0h: Tensor<f64> = Tensor::randn([3, 32, 32], &mut rng);
    let w0 = reparam_with_weight(&xt, &x0h, 0.0).unwrap() == xt;
    let w1 = reparam_with_weight(&xt, &x0h, 1.0).unwrap() == x0h;
    let quarter = NoiseSchedule::from_betas(vec![0.25]).unwrap();
    let half = quarter.reparam_input(&xt, &x0h, 1).unwrap();
    let want = xt.zip_map(&x0h, |a, b| 0.5 * a + 0.5 * b).unwrap();
    let mid = half.max_abs_diff(&want) < 1e-12;
    o.check(w0 && w1 && mid, "x_in limits: w=0 gives x_t, w=1 gives x0_hat, alpha_bar=0.75 gives the even blend");
    let secs = t0.elapsed().as_secs_f64();
    o.check(secs < 60.0, format!("runtime {secs:.1}s (< 60s)"));
    o.summary = format!("round trip {worst:.1e}, MC mean/var {em:.3}/{ev:.3}");
}

fn guidance_identities(o: &mut Outcome) {
    let t0 = Instant::now();
    let cfg = RunConfig::desk();
    let sched = cfg.schedule.build().unwrap();
    let model = Denoiser::<f32>::new(DenoiserConfig::desk(), 5).unwrap();
    let enc = Encoders::<f32>::new(EncoderConfig::default(), Vocab::shape_stories(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data = storydiff::story_data::generate_dataset(&storydiff::DatasetParams { n_train: 1, n_valid: 1, n_test: 1, ..Default::default() }).unwrap();
    let story = data.split(Split::Test)[0].clone();
    let cond = |m: &Denoiser<f64>, e: &Encoders<f64>| -> (ConditionBundle<f64>, Tensor<f64>) {
        let ctx = m.context().map(|c| (c, &m.params));
        let hist: Vec<HistoryEntry<f64>> = story.frames[..2]
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let image = f.image.to_tensor::<f64>();
                HistoryEntry { pair_embedding: e.encode_pair(&f.prompt, &image).unwrap(), prompt_embedding: e.encode_text(&f.prompt).unwrap(), image, frame_index: k }
            })
            .collect();
        let v = e.encode_text(&story.frames[2].prompt).unwrap();
        (build_condition(&v, &attend_history(ctx, &v, &hist).unwrap()).unwrap(), hist[0].image.clone())
    };
    let m64 = model.cast::<f64>();
    let e64 = enc.cast::<f64>();
    let (c, anchor) = cond(&m64, &e64);
    let lat = model.config().latent_shape().unwrap();
    let xt: Tensor<f64> = Tensor::randn([1, lat[0], lat[1], lat[2]], &mut rng);
    let t = 100;

    let one = GuidanceConfig { gamma: 1.0, ..cfg.guidance.clone() };
    let s = Sampler { model: &m64, encoders: &e64, schedule: &sched, cfg: &one };
    let exact1 = s.cfg_noise(&xt, t, &[&c]).unwrap() == m64.predict_noise(&xt, &[t], &[&c]).unwrap();
    o.check(exact1, "gamma = 1: CFG equals the conditional prediction bit for bit");
    let g0 = GuidanceConfig { g: 0.0, ..cfg.guidance.clone() };
    let s = Sampler { cfg: &g0, ..s };
    let exact0 = s.adaptive_noise(&xt, t, &[&c], &[&anchor]).unwrap() == s.cfg_noise(&xt, t, &[&c]).unwrap();
    o.check(exact0, "g = 0: adaptive noise equals CFG noise bit for bit");

    let gc = cfg.guidance.clone();
    let s = Sampler { cfg: &gc, ..s };
    let (_, grad) = s.guidance_gradient(&xt, t, &[&c], &[&anchor]).unwrap();
    let h = 1e-5;
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..100 {
        let i = rng.random_range(0..xt.numel());
        let mut p = xt.clone();
        p.data_mut()[i] += h;
        let mut m = xt.clone();
        m.data_mut()[i] -= h;
        let fd = (s.guidance_objective(&p, t, &[&c], &[&anchor]).unwrap() - s.guidance_objective(&m, t, &[&c], &[&anchor]).unwrap()) / (2.0 * h);
        num += (fd - grad.data()[i]).powi(2);
        den += fd * fd;
    }
    let r = (num / den).sqrt();
    o.check(r < 1e-3, format!("guidance gradient vs central differences on 100 coordinates: relative error {r:.2e} (< 1e-3)"));
    let secs = t0.elapsed().as_secs_f64();
    o.check(secs < 120.0, format!("runtime {secs:.1}s (< 120s)"));
    o.summary = format!("FD relative error {r:.1e}");
}

fn context_suite(o: &mut Outcome) {
    let t0 = Instant::now();
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut p = ParamStore::<f64>::new();
    let m = AdaptiveEncoder::new(&mut p, "ctx", d, 4, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let g = Graph::inference();
    let valid = vec![vec![true; 5], vec![true, true, true, false, false]];
    let (attn, _) = m.forward(&p, g.constant(Tensor::randn([2, d], &mut rng)), g.constant(Tensor::randn([2, 5, d], &mut rng)), Some(&valid)).unwrap();
    let worst = attn.tensor().data().chunks(5).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    o.check(worst < 1e-6, format!("attention rows sum to 1, worst deviation {worst:.1e} (tol 1e-6)"));

    let enc = Encoders::<f64>::new(EncoderConfig { d_model: d, text_layers: 1, heads: 2, image_widths: [4, 8, 8, 8] }, Vocab::shape_stories(), 1).unwrap();
    let v = enc.encode_text("pip and rox are in the forest").unwrap();
    let entry = |k: usize, prompt: &str, rng: &mut ChaCha8Rng| {
        let image: Tensor<f64> = Tensor::uniform([3, 32, 32], 1.0, rng);
        HistoryEntry { pair_embedding: enc.encode_pair(prompt, &image).unwrap(), prompt_embedding: enc.encode_text(prompt).unwrap(), image, frame_index: k }
    };
    let mut q = ParamStore::<f64>::new();
    let ident = AdaptiveEncoder::new(&mut q, "ctx", d, 4, false, &mut rng).unwrap();
    ident.set_identity(&mut q);
    let h = entry(0, "tam is at the beach", &mut rng);
    let single = attend_history(Some((&ident, &q)), &v, std::slice::from_ref(&h)).unwrap();
    let pass = single[0].max_abs_diff(&h.pair_embedding.vector);
    o.check(pass < 1e-12, format!("single key with identity projections passes through, error {pass:.1e}"));

    let hs: Vec<HistoryEntry<f64>> = ["pip is in the forest", "rox is at the beach", "tam is in the cave", "pip and tam are in the forest"]
        .iter()
        .enumerate()
        .map(|(k, s)| entry(k, s, &mut rng))
        .collect();
    let perm = [2, 0, 3, 1];
    let shuffled: Vec<HistoryEntry<f64>> = perm.iter().map(|&i| hs[i].clone()).collect();
    let a = attend_history(Some((&m, &p)), &v, &hs).unwrap();
    let b = attend_history(Some((&m, &p)), &v, &shuffled).unwrap();
    let perm_err = perm.iter().enumerate().map(|(k, &i)| b[k].max_abs_diff(&a[i])).fold(0.0, f64::max);
    o.check(perm_err < 1e-12, format!("permuting history permutes the outputs, error {perm_err:.1e}"));

    let c = build_condition(&v, &a).unwrap();
    let n_tok = v.tokens.dim(0);
    let mut round = c.condition.narrow(0, 0, n_tok).unwrap() == v.tokens;
    for (j, hj) in a.iter().enumerate() {
        round &= c.condition.narrow(0, n_tok + j, 1).unwrap().reshape([d]).unwrap() == *hj;
    }
    o.check(round && c.n_history() == 4, "condition is the prompt tokens followed by the updated history, recoverable exactly");

    let hi = select_from_scores(&[0.9, 0.3], &[0, 1], 0.65).unwrap();
    let lo = select_from_scores(&[0.5, 0.6], &[0, 1], 0.65).unwrap();
    let tie = select_from_scores(&[0.8, 0.8, 0.2], &[0, 1, 2], 0.65).unwrap();
    let edge = select_from_scores(&[0.65], &[0], 0.65).unwrap();
    o.check(hi.selected_frame == Some(0), "gating at 0.65: score 0.9 fires");
    o.check(!lo.fired(), "gating at 0.65: best score 0.6 does not fire");
    o.check(tie.selected_frame == Some(1), "gating at 0.65: tie goes to the most recent frame");
    o.check(edge.fired(), "gating at 0.65: a score equal to the threshold fires");
    let secs = t0.elapsed().as_secs_f64();
    o.check(secs < 60.0, format!("runtime {secs:.1}s (< 60s)"));
}

fn encoder_suite(o: &mut Outcome, layout: &Layout, cfg: &RunConfig, data: &Dataset, enc: &Encoders<f32>) {
    let stories = data.split(Split::Valid);
    let frames: Vec<&Image> = stories.iter().take(8).flat_map(|s| s.frames.iter().map(|f| &f.image)).collect();
    let imgs = metrics::stack_images(&frames).unwrap();
    let emb = enc.embed_images(&imgs).unwrap();
    let mut worst = 0.0f64;
    for i in 0..emb.dim(0) {
        worst = worst.max((emb.index0(i).norm() as f64 - 1.0).abs());
    }
    for s in stories.iter().take(8) {
        for f in &s.frames {
            let t = enc.encode_text(&f.prompt).unwrap();
            worst = worst.max((t.pooled.norm() as f64 - 1.0).abs());
            let pair = enc.encode_pair(&f.prompt, &f.image.to_tensor()).unwrap();
            worst = worst.max((pair.vector.norm() as f64 - 1.0).abs());
        }
    }
    o.check(worst < 1e-5, format!("text, image and pair embeddings are unit norm, worst deviation {worst:.1e}"));

    let acc = enc.retrieval_accuracy(data, Split::Valid, 64).unwrap();
    o.check(acc >= 0.9, format!("validation text-to-image retrieval top-1 at batch 64: {acc:.4} (>= 0.9)"));
    let secs = pipeline::stage_record(&layout.encoders()).and_then(|r| r.report["seconds"].as_f64()).unwrap_or(f64::NAN);
    o.check(secs <= 600.0, format!("contrastive training took {secs:.0}s (<= 600s)"));

    let digest = enc.digest();
    for ablation in [Default::default(), pipeline::sweep_systems()[2].1] {
        let c = RunConfig { ablation, ..cfg.clone() };
        let dir = layout.denoiser(&c.ablation);
        let ck = denoiser::latest_checkpoint(&dir).expect("denoiser checkpoint");
        let state: CheckpointState = checkpoint::load_json(&ck.join("state.json")).unwrap();
        o.check(state.encoder_digest == digest, format!("encoder hash recorded by {} equals the loaded encoders", dir.file_name().unwrap().to_string_lossy()));
    }
    o.summary = format!("retrieval {acc:.3} in {secs:.0}s");
}

fn metric_oracles(o: &mut Outcome, data: &Dataset, clf: &storydiff::CharacterClassifier) {
    let t0 = Instant::now();
    let real: Vec<&Image> = data.split(Split::Test).iter().flat_map(|s| s.frames.iter().map(|f| &f.image)).collect();
    let same = fid(&real, &real, clf).unwrap();
    o.check(same.abs() < 1e-4, format!("FID(X, X) = {same:.2e} (tol 1e-4)"));
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let noisy = |sigma: f64, rng: &mut ChaCha8Rng| -> Vec<Image> {
        real.iter()
            .map(|img| {
                let mut t = img.to_tensor::<f32>();
                // sigma is in [0, 1] pixel units; tensors span [-1, 1]
                t.data_mut().iter_mut().for_each(|v| *v += (2.0 * sigma * rng.sample::<f64, _>(StandardNormal)) as f32);
                Image::from_tensor(&t.clamp(-1.0, 1.0)).unwrap()
            })
            .collect()
    };
    let low = noisy(0.05, &mut rng);
    let high = noisy(0.2, &mut rng);
    let f_low = fid(&real, &low.iter().collect::<Vec<_>>(), clf).unwrap();
    let f_high = fid(&real, &high.iter().collect::<Vec<_>>(), clf).unwrap();
    o.check(f_high > f_low && f_low > 0.0, format!("FID grows with noise: sigma 0.05 -> {f_low:.3}, sigma 0.2 -> {f_high:.3}"));
    let floor = split_half_floor(&real, clf).unwrap();
    o.note(format!("split-half FID floor on {} real test frames: {floor:.3}", real.len()));

    let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<usize>>();
    let f1 = character_f1(&[set(&[0, 1])], &[set(&[0, 2])]).unwrap();
    o.check((f1 - 0.5).abs() < 1e-12, format!("predicted {{A,B}} vs gold {{A,C}}: F1 {f1}"));
    let gold: Vec<_> = [[0usize], [1], [2], [3], [4]].iter().map(|v| set(v)).collect();
    let mut pred = gold.clone();
    pred[3] = set(&[5]);
    pred[4] = set(&[4, 6]);
    let acc = frame_accuracy(&pred, &gold).unwrap();
    o.check((acc - 0.6).abs() < 1e-12, format!("exact sets in 3 of 5 frames: frame accuracy {acc}"));
    let empty = character_f1(&vec![BTreeSet::new(); 5], &gold).unwrap();
    o.check(empty == 0.0, "empty predictions: F1 0");
    let mut implication = true;
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let gold: Vec<BTreeSet<usize>> = (0..n).map(|_| (0..rng.random_range(1..4)).map(|_| rng.random_range(0..9)).collect()).collect();
        let mut pred = gold.clone();
        if rng.random_bool(0.5) {
            let i = rng.random_range(0..n);
            pred[i].insert(9);
        }
        let f = character_f1(&pred, &gold).unwrap();
        let a = frame_accuracy(&pred, &gold).unwrap();
        implication &= f < 1.0 || a == 1.0;
    }
    o.check(implication, "F1 = 1 implies frame accuracy = 1 on 200 random cases");
    let feats = Tensor::<f32>::randn([300, 64], &mut rng);
    o.check(fid_from_features(&feats, &feats).unwrap().abs() < 1e-4, "feature-level FID of a set with itself is 0");
    let secs = t0.elapsed().as_secs_f64();
    o.check(secs < 120.0, format!("runtime {secs:.1}s (< 120s)"));
    o.summary = format!("FID self {same:.1e}, noise {f_low:.2} < {f_high:.2}");
}

fn end_to_end(o: &mut Outcome, layout: &Layout, cfg: &RunConfig, data: &Dataset, clf: &storydiff::CharacterClassifier) {
    let t0 = Instant::now();
    let reports = pipeline::sweep(cfg, layout, &["full", "no-guidance", "no-attention"]).unwrap();
    for line in storydiff::MetricReport::table(&reports).lines() {
        o.note(line);
    }
    let (full, no_g, no_a) = (&reports[0], &reports[1], &reports[2]);
    o.check(full.n_stories == 200, format!("scored {} test stories, {} frames", full.n_stories, full.n_frames));
    o.check(full.char_f1 >= 0.7, format!("(a) Char-F1 of the full model {:.4} (>= 0.7)", full.char_f1));
    o.check(
        full.fid <= no_g.fid && no_g.fid <= no_a.fid,
        format!("(b) FID full {:.3} <= no-guidance {:.3} <= no-attention {:.3} (split-half floor {:.3})", full.fid, no_g.fid, no_a.fid, full.fid_floor),
    );
    let (sf, sg) = (full.scene_consistency.unwrap_or(f64::NAN), no_g.scene_consistency.unwrap_or(f64::NAN));
    o.check(sf > sg, format!("(c) scene consistency full {sf:.5} > no-guidance {sg:.5}"));
    let fr = full.firing_rate.unwrap_or(0.0);
    o.check(fr >= 0.5, format!("(d) anchor firing rate on frames with a same-scene predecessor {fr:.4} (>= 0.5)"));

    // reference points for the scene metric
    let test = data.split(Split::Test);
    let mut gt = Vec::new();
    let mut pooled = Vec::new();
    for s in &test {
        let f = clf.frame_features(&s.frames.iter().map(|f| &f.image).collect::<Vec<_>>()).unwrap();
        if let Some(c) = scene_consistency(&f, s) {
            gt.push(c);
        }
        pooled.push(f);
    }
    let all = Tensor::concat(&pooled.iter().collect::<Vec<_>>(), 0).unwrap();
    o.note(format!(
        "scene consistency references: ground truth {:.5}, random frame pairs {:.5}",
        gt.iter().sum::<f64>() / gt.len() as f64,
        random_pair_consistency(&all, 2000, 0)
    ));
    o.note(format!("dependency fraction of the test split {:.3}", data.dependency_fraction(Split::Test)));
    o.summary = format!("F1 {:.3}, FID {:.2}/{:.2}/{:.2}, scene {sf:.4} vs {sg:.4}, firing {fr:.3}", full.char_f1, full.fid, no_g.fid, no_a.fid);
    o.note(format!("wall time (cached stages reused) {:.0}s", t0.elapsed().as_secs_f64()));
}

fn cli(home: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_storydiff")).args(args).env("STORYDIFF_HOME", home).env("RUST_LOG", "warn").output().expect("storydiff runs")
}

fn determinism(o: &mut Outcome, layout: &Layout, data: &Dataset) {
    let tmp = tempfile::tempdir().unwrap();
    let mut sums = Vec::new();
    for name in ["a", "b"] {
        let out = cli(&layout.home, &["make-data", "--out", tmp.path().join(name).to_str().unwrap()]);
        assert!(out.status.success(), "make-data: {}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8_lossy(&out.stdout).into_owned();
        sums.push(text.lines().find(|l| l.starts_with("checksum ")).unwrap().trim_start_matches("checksum ").to_string());
    }
    let home_sum = pipeline::dataset_checksum(data);
    o.check(sums[0] == sums[1] && sums[0] == home_sum, format!("make-data twice with the default seed: checksum {} both times", &sums[0][..16]));

    let ids = "test-00000,test-00001,test-00002,test-00003";
    let dirs: Vec<PathBuf> = ["g1", "g2"].iter().map(|n| tmp.path().join(n)).collect();
    for d in &dirs {
        let out = cli(&layout.home, &["generate", "--stories", ids, "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "generate: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files = 0;
    let mut same = true;
    for id in ids.split(',') {
        for k in 0..5 {
            let f = format!("{id}/frame-{k}.png");
            same &= std::fs::read(dirs[0].join(&f)).unwrap() == std::fs::read(dirs[1].join(&f)).unwrap();
            files += 1;
        }
        same &= std::fs::read(dirs[0].join(id).join("grid.png")).unwrap() == std::fs::read(dirs[1].join(id).join("grid.png")).unwrap();
    }
    o.check(same, format!("generate twice with a fixed seed: {files} frames and grids byte-identical"));
    o.summary = "checksums and PNG bytes reproduce".into();
}

fn sign_probe(o: &mut Outcome, layout: &Layout, cfg: &RunConfig) {
    let path = layout.reports().join("sign-probe.json");
    let probe = match checkpoint::load_json::<SignProbe>(&path) {
        Ok(p) if p.config_hash == cfg.hash() => p,
        _ => {
            let models = pipeline::load_models(cfg, layout).unwrap();
            let p = pipeline::sign_probe(cfg, &models, 100).unwrap();
            checkpoint::save_json(&p, &path).unwrap();
            p
        }
    };
    let frac = probe.improved_fraction();
    let n = probe.frames.len();
    let mean_delta = probe.frames.iter().map(|f| f.guided - f.unguided).sum::<f64>() / n.max(1) as f64;
    o.check(n >= 50, format!("{n} repeated-scene frames with a fired anchor"));
    let ok = frac >= 0.7;
    o.check(ok, format!("guided final f(x0).f(x_h) beats g = 0 on {:.1}% of frames (>= 70%); mean change {mean_delta:+.5}", 100.0 * frac));
    if !ok {
        let report = layout.reports().join("sign-probe-discrepancy.txt");
        let mut text = format!(
            "Sign probe discrepancy\ng = {}, frames = {n}, improved = {:.3}, mean change = {mean_delta:+.6}\nstory frame anchor guided unguided\n",
            probe.g, frac
        );
        for f in &probe.frames {
            text.push_str(&format!("{} {} {} {:.6} {:.6}\n", f.story_id, f.frame_index, f.anchor_frame, f.guided, f.unguided));
        }
        std::fs::write(&report, text).unwrap();
        o.note(format!("discrepancy report written to {}", report.display()));
    }
    o.summary = format!("{:.1}% of {n} frames improved, mean {mean_delta:+.4}", 100.0 * frac);
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and similar harness probes
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut ok = Vec::new();
    ok.push(run(1, "diffusion algebra", diffusion_algebra));
    ok.push(run(2, "guidance identities", guidance_identities));
    ok.push(run(3, "history context", context_suite));

    let home = acceptance_home();
    println!("acceptance home {}", home.display());
    let layout = Layout::new(&home);
    let cfg = RunConfig::desk();
    let staged = catch_unwind(AssertUnwindSafe(|| {
        let data = pipeline::ensure_data(&cfg, &layout).unwrap();
        let enc = pipeline::ensure_encoders(&cfg, &layout, &data).unwrap();
        let clf = pipeline::ensure_classifier(&cfg, &layout, &data).unwrap();
        for (_, ablation) in pipeline::sweep_systems() {
            let c = RunConfig { ablation, ..cfg.clone() };
            if c.stage_hash(Stage::Denoiser) == cfg.stage_hash(Stage::Denoiser) && ablation.no_guidance {
                continue;
            }
            pipeline::ensure_denoiser(&c, &layout, &data, &enc).unwrap();
        }
        (data, enc, clf)
    }));
    match staged {
        Ok((data, enc, clf)) => {
            ok.push(run(4, "encoders", |o| encoder_suite(o, &layout, &cfg, &data, &enc)));
            ok.push(run(5, "metric oracles", |o| metric_oracles(o, &data, &clf)));
            ok.push(run(6, "end-to-end desk run", |o| end_to_end(o, &layout, &cfg, &data, &clf)));
            ok.push(run(7, "determinism", |o| determinism(o, &layout, &data)));
            ok.push(run(8, "guidance sign probe", |o| sign_probe(o, &layout, &cfg)));
        }
        Err(_) => {
            for (id, name) in [(4, "encoders"), (5, "metric oracles"), (6, "end-to-end desk run"), (7, "determinism"), (8, "guidance sign probe")] {
                println!("criterion {id} FAIL: {name} - desk training did not complete");
                ok.push(false);
            }
        }
    }
    let passed = ok.iter().filter(|&&b| b).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
