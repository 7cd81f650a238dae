use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {"n_train": 6, "n_valid": 2, "n_test": 2},
  "encoders": {"d_model": 16, "text_layers": 1, "heads": 2, "image_widths": [4, 8, 8, 8]},
  "encoder_training": {"epochs": 1, "batch": 8},
  "classifier": {"epochs": 1},
  "denoiser": {"widths": [8, 16], "res_blocks": 1, "attn_levels": [1], "heads": 2, "d_model": 16, "groups": 4},
  "training": {"epochs": 1, "batch": 16, "checkpoint_every": 1},
  "schedule": {"steps": 20},
  "guidance": {"steps": 3, "tau_sim": -1.0}
}"#;

fn storydiff(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storydiff"))
        .args(args)
        .env("STORYDIFF_HOME", home)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn checksum_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("checksum ")).expect("checksum printed").to_string()
}

#[test]
fn make_data_is_reproducible_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = storydiff(tmp.path(), &["make-data", "--config", &cfg, "--seed", "5", "--out", tmp.path().join("a").to_str().unwrap()]);
    let b = storydiff(tmp.path(), &["make-data", "--config", &cfg, "--seed", "5", "--out", tmp.path().join("b").to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(checksum_line(&a), checksum_line(&b));
    assert!(stdout(&a).contains("train") && stdout(&a).contains("test"));

    let c = storydiff(tmp.path(), &["make-data", "--config", &cfg, "--seed", "6", "--out", tmp.path().join("c").to_str().unwrap()]);
    assert_ne!(checksum_line(&a), checksum_line(&c));

    let again = storydiff(tmp.path(), &["make-data", "--config", &cfg, "--seed", "5", "--out", tmp.path().join("a").to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(2));
    let forced = storydiff(tmp.path(), &["make-data", "--config", &cfg, "--seed", "5", "--force", "--out", tmp.path().join("a").to_str().unwrap()]);
    assert!(forced.status.success());
    assert_eq!(checksum_line(&forced), checksum_line(&a));
}

#[test]
fn profiles_and_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let full = storydiff(tmp.path(), &["make-data", "--profile", "pororo-full", "--show-config"]);
    assert!(full.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&full)).unwrap();
    assert_eq!((v["data"]["n_train"].as_u64(), v["data"]["n_valid"].as_u64(), v["data"]["n_test"].as_u64()), (Some(10191), Some(2334), Some(2208)));

    let desk = storydiff(tmp.path(), &["train", "--show-config", "--seed", "3", "--no-attention"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&desk)).unwrap();
    assert_eq!(v["data"]["n_train"], 2000);
    assert_eq!(v["schedule"]["steps"], 200);
    assert_eq!(v["guidance"]["tau_sim"], 0.65);
    assert_eq!(v["training"]["seed"], 3);
    assert_eq!(v["ablation"]["no_attention"], true);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"guidance": {"gamma": 0.5}}"#).unwrap();
    assert_eq!(storydiff(tmp.path(), &["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&bad, r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(storydiff(tmp.path(), &["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(storydiff(tmp.path(), &["generate", "--task", "sideways"]).status.code(), Some(2));
    // nothing trained under this home
    assert_eq!(storydiff(tmp.path(), &["generate", "--config", &tiny_config(tmp.path())]).status.code(), Some(2));
}

#[test]
fn generate_is_byte_identical_for_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let t = storydiff(tmp.path(), &["train", "--config", &cfg, "--seed", "9"]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&t)).unwrap();
    assert!(summary["denoiser_parameters"].as_u64().unwrap() > 0);

    let outs: Vec<_> = ["g1", "g2"].iter().map(|n| tmp.path().join(n)).collect();
    for out in &outs {
        let g = storydiff(tmp.path(), &["generate", "--config", &cfg, "--seed", "9", "--task", "visualization", "--out", out.to_str().unwrap()]);
        assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    }
    for id in ["test-00000", "test-00001"] {
        let d = outs[0].join(id);
        assert!(d.join("grid.png").exists() && d.join("log.json").exists());
        for k in 0..5 {
            let f = format!("{id}/frame-{k}.png");
            assert_eq!(std::fs::read(outs[0].join(&f)).unwrap(), std::fs::read(outs[1].join(&f)).unwrap(), "{f}");
        }
        let log: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("log.json")).unwrap()).unwrap();
        assert_eq!(log["frames"][0]["given"], false);
        assert_eq!(log["config"]["task"], "visualization");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(outs[0].join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let cont = tmp.path().join("cont");
    let g = storydiff(tmp.path(), &["generate", "--config", &cfg, "--seed", "9", "--stories", "test-00001", "--out", cont.to_str().unwrap()]);
    assert!(g.status.success());
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(cont.join("test-00001/log.json")).unwrap()).unwrap();
    assert_eq!(log["frames"][0]["given"], true);
    assert!(!cont.join("test-00000").exists());

    let unknown = storydiff(tmp.path(), &["generate", "--config", &cfg, "--seed", "9", "--stories", "test-77777"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("test-77777"));
}
