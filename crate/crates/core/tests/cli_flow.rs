mod common;

use std::path::{Path, PathBuf};

use clap::Parser;
use serde_json::Value;
use tempfile::TempDir;

use tgdial::checkpoint::load_checkpoint;
use tgdial::cli::{run, Cli};
use tgdial::trainer::{BEST_DIR, EPOCH_LOG, LAST_DIR};

fn write_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join("tiny.toml");
    let text = format!(
        r#"dataset_dir = "{data}"
output_dir = "{out}"
max_decode_len = 24
seed = 3

[model]
d_model = 32
n_heads = 4
ffn_width = 64
max_src_len = 96
max_tgt_len = 32

[optimizer]
learning_rate = 3e-3
epochs = {epochs}
"#,
        data = common::fixture_dir().display(),
        out = dir.join("run").display(),
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn tgdial(args: &[&str]) -> tgdial::Result<()> {
    let mut full = vec!["tgdial"];
    full.extend_from_slice(args);
    run(Cli::try_parse_from(full).expect("arguments parse"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_with_zero_epochs_saves_the_initial_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 0);
    tgdial(&["train", "--config", s(&cfg)]).unwrap();
    let ckpt = load_checkpoint(&dir.path().join("run").join(BEST_DIR)).unwrap();
    assert_eq!(ckpt.state.unwrap().step, 0);
    assert!(dir
        .path()
        .join("run")
        .join(LAST_DIR)
        .join("weights.bin")
        .exists());
}

#[test]
fn resume_continues_the_step_counter() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 1);
    tgdial(&["train", "--config", s(&cfg)]).unwrap();
    let last = dir.path().join("run").join(LAST_DIR);
    let first = load_checkpoint(&last).unwrap().state.unwrap();
    assert_eq!(first.epoch, 1);
    assert!(first.step > 0);

    let cfg2 = write_config(dir.path(), 2);
    tgdial(&["train", "--config", s(&cfg2), "--checkpoint", s(&last)]).unwrap();
    let second = load_checkpoint(&last).unwrap().state.unwrap();
    assert_eq!(second.epoch, 2);
    assert_eq!(second.step, 2 * first.step);

    let log = std::fs::read_to_string(dir.path().join("run").join(EPOCH_LOG)).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["epoch"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(epochs, [1, 2]);
}

#[test]
fn out_of_range_delta_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 0);
    let err = tgdial(&["train", "--config", s(&cfg), "--delta", "1.5"])
        .unwrap_err()
        .to_string();
    assert!(err.contains("delta"), "{err}");
}

#[test]
fn unknown_split_is_a_usage_error() {
    let err = Cli::try_parse_from([
        "tgdial",
        "evaluate",
        "--checkpoint",
        "x",
        "--split",
        "validation",
    ])
    .unwrap_err();
    assert_eq!(err.kind(), clap::error::ErrorKind::ValueValidation);
}

#[test]
fn evaluate_inspect_and_generate_on_a_trained_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 1);
    tgdial(&["train", "--config", s(&cfg)]).unwrap();
    let best = dir.path().join("run").join(BEST_DIR);
    let data = common::fixture_dir();
    let out = dir.path().join("eval");

    for mode in ["hard", "soft"] {
        tgdial(&[
            "evaluate",
            "--checkpoint",
            s(&best),
            "--data",
            s(&data),
            "--split",
            "dev",
            "--mode",
            mode,
            "--out",
            s(&out),
        ])
        .unwrap();
    }
    let hard = read_json(&out.join("dev_hard.json"));
    let soft = read_json(&out.join("dev_soft.json"));
    assert_eq!(hard["mode"], "hard");
    assert_eq!(soft["mode"], "soft");
    for key in [
        "split",
        "n_samples",
        "n_final",
        "n_grounded",
        "m",
        "delta",
        "lambda",
        "ablation",
    ] {
        assert_eq!(hard[key], soft[key], "{key}");
    }
    let samples = std::fs::read_to_string(out.join("dev_hard_samples.jsonl")).unwrap();
    assert_eq!(
        samples.lines().count(),
        hard["n_samples"].as_u64().unwrap() as usize
    );

    tgdial(&[
        "evaluate",
        "--checkpoint",
        s(&best),
        "--data",
        s(&data),
        "--split",
        "dev",
        "--no-csm",
        "--no-ikb",
        "--out",
        s(&out),
    ])
    .unwrap();
    let bare = read_json(&out.join("dev_soft.json"));
    assert_eq!(bare["ablation"]["use_csm"], false);
    assert_eq!(bare["ablation"]["use_ikb"], false);
    assert!(bare["knowledge_f1"].is_null() || bare["knowledge_f1"].is_number());

    let inspect = dir.path().join("inspect.json");
    tgdial(&[
        "inspect",
        "--checkpoint",
        s(&best),
        "--data",
        s(&data),
        "--index",
        "3",
        "--k",
        "10",
        "--out",
        s(&inspect),
    ])
    .unwrap();
    let v = read_json(&inspect);
    let top = v["bias"]["top"].as_array().unwrap();
    assert_eq!(top.len(), 10);
    let probs: Vec<f64> = top.iter().map(|e| e["prob"].as_f64().unwrap()).collect();
    assert!(probs.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(v["keywords"]["type"].as_array().unwrap().len(), 8);
    assert!(!v["selection"]["topic"].as_array().unwrap().is_empty());
    assert!(!v["trace"].as_array().unwrap().is_empty());

    tgdial(&[
        "inspect",
        "--checkpoint",
        s(&best),
        "--data",
        s(&data),
        "--no-csm",
        "--out",
        s(&inspect),
    ])
    .unwrap();
    let v = read_json(&inspect);
    assert_eq!(v["bias"]["uniform"], true);
    let probs: Vec<f64> = v["bias"]["top"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["prob"].as_f64().unwrap())
        .collect();
    assert!(probs.iter().all(|p| (p - probs[0]).abs() < 1e-12));

    let err = tgdial(&[
        "inspect",
        "--checkpoint",
        s(&best),
        "--data",
        s(&data),
        "--index",
        "999",
    ])
    .unwrap_err();
    assert!(err.to_string().contains("out of range"), "{err}");

    let gen = dir.path().join("gen.jsonl");
    tgdial(&[
        "generate",
        "--checkpoint",
        s(&best),
        "--data",
        s(&data),
        "--split",
        "test_id",
        "--out",
        s(&gen),
    ])
    .unwrap();
    let lines = std::fs::read_to_string(&gen).unwrap();
    assert_eq!(lines.lines().count(), 8);
    for l in lines.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert!(v["generated"].is_string());
    }
}

#[test]
fn test_ood_evaluation_refuses_an_overlapping_split() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 0);
    tgdial(&["train", "--config", s(&cfg)]).unwrap();
    let best = dir.path().join("run").join(BEST_DIR);

    // Copy the fixtures, then make test_ood reuse the train split.
    let bad = dir.path().join("bad_data");
    std::fs::create_dir_all(&bad).unwrap();
    for f in [
        "train.jsonl",
        "dev.jsonl",
        "test_id.jsonl",
        "inventory.json",
    ] {
        std::fs::copy(common::fixture_dir().join(f), bad.join(f)).unwrap();
    }
    std::fs::copy(
        common::fixture_dir().join("train.jsonl"),
        bad.join("test_ood.jsonl"),
    )
    .unwrap();
    let err = tgdial(&[
        "evaluate",
        "--checkpoint",
        s(&best),
        "--data",
        s(&bad),
        "--split",
        "test_ood",
    ])
    .unwrap_err();
    assert!(err.to_string().contains("test_ood"), "{err}");

    tgdial(&[
        "evaluate",
        "--checkpoint",
        s(&best),
        "--data",
        s(&common::fixture_dir()),
        "--split",
        "test_ood",
    ])
    .unwrap();
}
