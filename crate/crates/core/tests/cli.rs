use std::path::Path;
use std::process::{Command, Output};

use dptfsnet::numerics::Tensor;
use dptfsnet::signal::{istft, read_wav, stft, write_wav, StftConfig};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dptfsnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the toy model for `steps` steps into `dir/name`.
fn train(dir: &Path, name: &str, steps: u64, seed: u64) -> Output {
    let ckpt = dir.join(name);
    let hist = dir.join(format!("{name}.jsonl"));
    bin(&[
        "train",
        "--preset",
        "desk",
        "--set",
        "train.crop_len=256",
        "--set",
        "train.eval_len=512",
        "--steps",
        &steps.to_string(),
        "--seed",
        &seed.to_string(),
        "--checkpoint-out",
        s(&ckpt),
        "--history-out",
        s(&hist),
    ])
}

fn tone(n: usize) -> Tensor {
    Tensor::from_fn(&[n], |i| 0.3 * (i as f64 * 0.05).sin() + 0.1 * (i as f64 * 0.71).cos())
}

#[test]
fn help_exits_zero_and_lists_commands() {
    let o = bin(&["--help"]);
    assert!(o.status.success());
    for cmd in ["train", "enhance", "verify", "info"] {
        assert!(stdout(&o).contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = bin(&["info", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_config_names_the_path() {
    let o = bin(&["train", "--config", "/nonexistent/run.cfg", "--checkpoint-out", "/tmp/x.ckpt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/run.cfg"), "{}", stderr(&o));
}

#[test]
fn bad_config_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "preset=desk\ntrain.batch=zero\n").unwrap();
    let o = bin(&["train", "--config", s(&cfg), "--checkpoint-out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.batch"), "{}", stderr(&o));
}

#[test]
fn zero_steps_writes_initial_checkpoint_and_empty_history() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "m.ckpt", 0, 3);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("steps: 0"));
    let net = dptfsnet::model::checkpoint::load(&dir.path().join("m.ckpt"), None).unwrap();
    let fresh = dptfsnet::model::DptFsNet::new(dptfsnet::model::ModelConfig::toy(), 3).unwrap();
    assert_eq!(net.params.tensors(), fresh.params.tensors());
    assert_eq!(std::fs::read_to_string(dir.path().join("m.ckpt.jsonl")).unwrap(), "");
}

#[test]
fn same_seed_gives_identical_checkpoints_and_history() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.ckpt", "b.ckpt"] {
        let o = train(dir.path(), name, 3, 5);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_eq!(read("a.ckpt.jsonl"), read("b.ckpt.jsonl"));
    let history = String::from_utf8(read("a.ckpt.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);
    for line in history.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["kind"], "step");
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn info_is_stable_and_reports_totals() {
    let a = bin(&["info", "--preset", "reference"]);
    let b = bin(&["info", "--preset", "reference"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    let text = stdout(&a);
    assert!(text.contains("1068098"), "{text}");
    assert!(text.contains("ratio to reference 0.88 M: 1.2137"), "{text}");
    assert!(text.contains("model.channels=64"), "{text}");
    assert!(text.contains("encoder.dense"), "{text}");
}

#[test]
fn info_reads_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "m.ckpt", 0, 0).status.success());
    let o = bin(&["info", "--checkpoint", s(&dir.path().join("m.ckpt"))]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("10546"));
}

#[test]
fn verify_fast_passes_and_tamper_fails() {
    let o = bin(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS grad conv2d"));

    let o = bin(&["verify", "--tamper", "conv2d"]);
    assert_eq!(o.status.code(), Some(3));
    let out = stdout(&o);
    assert!(out.contains("FAIL grad conv2d"), "{out}");
    assert!(out.contains("PASS grad layer_norm"), "{out}");

    assert_eq!(bin(&["verify", "--level", "medium"]).status.code(), Some(1));
}

#[test]
fn enhance_keeps_length_and_identity_mask_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "m.ckpt", 0, 1).status.success());
    let ckpt = dir.path().join("m.ckpt");
    let input = dir.path().join("in.wav");
    write_wav(&input, &tone(3001), 16_000).unwrap();
    let (quantised, _) = read_wav(&input).unwrap();

    let out = dir.path().join("out.wav");
    let o = bin(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (y, rate) = read_wav(&out).unwrap();
    assert_eq!((y.numel(), rate), (3001, 16_000));

    let ident = dir.path().join("ident.wav");
    let o = bin(&[
        "enhance",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&input),
        "--output",
        s(&ident),
        "--identity-mask",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (y, _) = read_wav(&ident).unwrap();
    let expect = istft(&stft(&quantised, &StftConfig::toy()).unwrap()).unwrap();
    assert!(y.max_abs_diff(&expect) <= 0.5 / 32768.0 + 1e-12);
}

#[test]
fn enhance_rejects_mismatched_config_and_rate() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "m.ckpt", 0, 1).status.success());
    let ckpt = dir.path().join("m.ckpt");
    let input = dir.path().join("in.wav");
    write_wav(&input, &tone(500), 16_000).unwrap();

    let cfg = dir.path().join("reference.cfg");
    std::fs::write(&cfg, "preset=reference\n").unwrap();
    let o = bin(&[
        "enhance",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&input),
        "--output",
        s(&dir.path().join("o.wav")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.channels"), "{}", stderr(&o));
    assert!(!dir.path().join("o.wav").exists());

    let slow = dir.path().join("slow.wav");
    write_wav(&slow, &tone(500), 8_000).unwrap();
    let o = bin(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&slow), "--output", s(&dir.path().join("p.wav"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("8000"), "{}", stderr(&o));
}
