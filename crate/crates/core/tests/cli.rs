use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use micromotion::data_io::load_model;
use micromotion::network::init_params;
use micromotion::training::TrainConfig;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_micromotion"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8 output")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed with {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn synth(dir: &TempDir, name: &str, tracks: usize, seed: u64) -> PathBuf {
    let path = dir.path().join(name);
    ok(&["synth", "--out", path_str(&path), "--tracks", &tracks.to_string(), "--seed", &seed.to_string()]);
    path
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).collect()
}

#[test]
fn synth_is_reproducible_and_has_both_labels() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir, "a.csv", 6, 11);
    let b = synth(&dir, "b.csv", 6, 11);
    let (ta, tb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let text = String::from_utf8(ta).unwrap();
    assert!(text.contains(",walking,"));
    assert!(text.contains(",standing,"));
}

#[test]
fn zero_tracks_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");
    assert_eq!(run(&["synth", "--out", path_str(&out), "--tracks", "0", "--seed", "1"]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.csv", 4, 1);
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "epochs=1\nlearning_rate=3\n").unwrap();
    let model = dir.path().join("m.bin");
    let o = run(&["train", "--data", path_str(&data), "--out", path_str(&model), "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_one_history_line_per_epoch() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.csv", 10, 3);
    let model = dir.path().join("m.bin");
    let text = ok(&["train", "--data", path_str(&data), "--out", path_str(&model), "--epochs", "2", "--seed", "5"]);
    let history = json_lines(&text);
    assert_eq!(history.len(), 2);
    assert_eq!(data_lines(&text).len(), 2);
    assert!(text.starts_with("# micromotion train v1\n"));
    assert!(text.contains("# epochs=2"));
    assert!(model.exists());
    assert!(dir.path().join("m.bin.final").exists());
    for (i, h) in history.iter().enumerate() {
        assert_eq!(h["epoch"].as_u64(), Some(i as u64));
        assert!(h["train_loss"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.csv", 4, 3);
    let model = dir.path().join("m.bin");
    ok(&["train", "--data", path_str(&data), "--out", path_str(&model), "--epochs", "0", "--seed", "9"]);
    let loaded = load_model(&model).unwrap();
    let cfg = TrainConfig {
        seed: 9,
        ..TrainConfig::default()
    };
    assert_eq!(loaded, init_params(&cfg.arch(), 9));
}

#[test]
fn eval_rejects_empty_data_and_foreign_versions() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.csv", 4, 3);
    let model = dir.path().join("m.bin");
    ok(&["train", "--data", path_str(&data), "--out", path_str(&model), "--epochs", "0"]);

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "# micromotion-tracks v1\n").unwrap();
    let o = run(&["eval", "--data", path_str(&empty), "--model", path_str(&model)]);
    assert_eq!(o.status.code(), Some(4));

    let missing = dir.path().join("nope.csv");
    let o = run(&["eval", "--data", path_str(&missing), "--model", path_str(&model)]);
    assert_eq!(o.status.code(), Some(3));

    let bytes = fs::read(&model).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    assert!(text.contains("format_version 1\n"));
    let patched = replace_once(&bytes, b"format_version 1\n", b"format_version 7\n");
    let future = dir.path().join("future.bin");
    fs::write(&future, patched).unwrap();
    let o = run(&["eval", "--data", path_str(&data), "--model", path_str(&future)]);
    assert_eq!(o.status.code(), Some(5));

    let mut flipped = bytes.clone();
    let last = flipped.len() - 40;
    flipped[last] ^= 1;
    let corrupt = dir.path().join("corrupt.bin");
    fs::write(&corrupt, flipped).unwrap();
    let o = run(&["eval", "--data", path_str(&data), "--model", path_str(&corrupt)]);
    assert_eq!(o.status.code(), Some(4));
}

fn replace_once(haystack: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
    let at = haystack
        .windows(from.len())
        .position(|w| w == from)
        .expect("pattern present");
    let mut out = haystack[..at].to_vec();
    out.extend_from_slice(to);
    out.extend_from_slice(&haystack[at + from.len()..]);
    out
}

#[test]
fn eval_reports_metrics_json() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.csv", 6, 3);
    let model = dir.path().join("m.bin");
    ok(&["train", "--data", path_str(&data), "--out", path_str(&model), "--epochs", "1"]);
    let text = ok(&["eval", "--data", path_str(&data), "--model", path_str(&model)]);
    let records = json_lines(&text);
    assert_eq!(records.len(), 1);
    let acc = records[0]["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(records[0]["transitions"]["accuracy"].as_f64().is_some());
}

#[test]
fn infer_stream_matches_batch() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.csv", 5, 4);
    let model = dir.path().join("m.bin");
    ok(&["train", "--data", path_str(&data), "--out", path_str(&model), "--epochs", "1"]);
    let batch = ok(&["infer", "--data", path_str(&data), "--model", path_str(&model)]);
    let stream = ok(&["infer", "--data", path_str(&data), "--model", path_str(&model), "--stream"]);
    let frames = data_lines(&fs::read_to_string(&data).unwrap()).len();
    let (b, s) = (data_lines(&batch), data_lines(&stream));
    assert_eq!(b.len(), frames);
    assert_eq!(s.len(), frames);
    for (x, y) in b.iter().zip(&s) {
        let (xs, ys): (Vec<&str>, Vec<&str>) = (x.split(',').collect(), y.split(',').collect());
        assert_eq!(xs[..2], ys[..2]);
        let (p, q): (f64, f64) = (xs[2].parse().unwrap(), ys[2].parse().unwrap());
        assert!((0.0..=1.0).contains(&p));
        assert!((p - q).abs() <= 1e-6, "{x} vs {y}");
    }
}

#[test]
fn gradcheck_is_deterministic_and_names_the_worst_entry() {
    let a = ok(&["gradcheck", "--seed", "3"]);
    let b = ok(&["gradcheck", "--seed", "3"]);
    let strip = |s: &str| {
        s.lines()
            .filter(|l| !l.starts_with("max relative error"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&a), strip(&b));
    let summary = a.lines().find(|l| l.starts_with("max relative error")).unwrap();
    assert!(summary.contains(" at "), "{summary}");
    assert!(a.trim_end().ends_with("PASS"));
    let report = &json_lines(&a)[0];
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn ablate_all_row_matches_train_then_eval() {
    let dir = TempDir::new().unwrap();
    let train = synth(&dir, "train.csv", 8, 21);
    let test = synth(&dir, "test.csv", 4, 22);
    let common = ["--epochs", "1", "--seed", "2", "--batch-size", "8"];
    let mut args = vec!["ablate", "--data", path_str(&train), "--test", path_str(&test)];
    args.extend(common);
    let text = ok(&args);
    let rows = json_lines(&text);
    let names: Vec<&str> = rows.iter().map(|r| r["selection"].as_str().unwrap()).collect();
    assert_eq!(names, ["no-position", "no-distance", "no-angle", "no-dynamic", "all"]);
    let widths: Vec<u64> = rows.iter().map(|r| r["input_width"].as_u64().unwrap()).collect();
    assert_eq!(widths, [56, 48, 40, 44, 72]);

    let model = dir.path().join("m.bin");
    let mut args = vec!["train", "--data", path_str(&train), "--out", path_str(&model)];
    args.extend(common);
    ok(&args);
    let eval = ok(&["eval", "--data", path_str(&test), "--model", path_str(&model)]);
    let metrics = &json_lines(&eval)[0]["metrics"];
    assert_eq!(&rows[4]["report"], metrics);
}
