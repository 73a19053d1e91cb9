use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const MODEL: &str = r#"{
    "patch_size": 8, "embed_dim": 16, "encoder_layers": 1, "decoder_layers": 1,
    "heads": 2, "mlp_ratio": 2, "prompt_len": 4, "width": 32, "height": 32
}"#;

fn ttr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttr"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("spawn ttr")
}

fn ok(args: &[&str]) -> Output {
    let out = ttr(args);
    assert!(
        out.status.success(),
        "ttr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64, views: usize) -> PathBuf {
    let out = dir.join(format!("scene_{seed}_{views}"));
    ok(&[
        "synth",
        "--out",
        s(&out),
        "--seed",
        &seed.to_string(),
        "--views",
        &views.to_string(),
        "--width",
        "32",
        "--height",
        "32",
    ]);
    out
}

fn pretrain_config(dir: &Path) -> PathBuf {
    let path = dir.join("pretrain.json");
    let text = format!(
        r#"{{
            "model": {MODEL},
            "data": {{"scene": {{"views": 3, "width": 32, "height": 32}}, "pool": 4, "refresh_steps": 50}},
            "train": {{"batch_pairs": 2, "lr": 1e-3}},
            "checkpoint_every": 10
        }}"#
    );
    fs::write(&path, text).unwrap();
    path
}

/// Untrained micro backbone checkpoint.
fn micro_weights(dir: &Path) -> PathBuf {
    let cfg = pretrain_config(dir);
    let out = dir.join("weights");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--steps", "0"]);
    out.join("weights.ckpt")
}

fn losses(csv: &Path) -> Vec<(usize, f64)> {
    let mut r = csv::Reader::from_path(csv).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap())
        })
        .collect()
}

fn read_rows(csv: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(csv).unwrap().records().map(|r| r.unwrap()).collect()
}

fn column(csv: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(csv).unwrap();
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    r.records().map(|rec| rec.unwrap()[i].to_string()).collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "config.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_deterministic() {
    let t = TempDir::new().unwrap();
    let a = synth(t.path(), 7, 3);
    let b = t.path().join("again");
    ok(&["synth", "--out", s(&b), "--seed", "7", "--views", "3", "--width", "32", "--height", "32"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let c = synth(t.path(), 8, 3);
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let t = TempDir::new().unwrap();
    let a = synth(t.path(), 11, 2);
    let b = t.path().join("replay");
    ok(&["synth", "--config", s(&a.join("config.json")), "--out", s(&b)]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn single_view_scene() {
    let t = TempDir::new().unwrap();
    let a = synth(t.path(), 3, 1);
    let scene = ttr_core::scene::read_archive(&a).unwrap();
    assert_eq!(scene.num_views(), 1);
}

#[test]
fn output_collision_needs_force() {
    let t = TempDir::new().unwrap();
    let a = synth(t.path(), 5, 2);
    let before = dir_bytes(&a);
    let args = ["synth", "--out", s(&a), "--seed", "6", "--views", "2", "--width", "32", "--height", "32"];
    let out = ttr(&args);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    assert_eq!(dir_bytes(&a), before);
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
    assert_ne!(dir_bytes(&a), before);
}

#[test]
fn bad_inputs_exit_with_one() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("bad.json");
    fs::write(&cfg, r#"{"seed": 1, "sed": 2}"#).unwrap();
    let out = ttr(&["synth", "--config", s(&cfg), "--out", s(&t.path().join("x"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sed"));
    assert_eq!(code(&ttr(&["synth", "--bogus-flag"])), 1);
    assert_eq!(code(&ttr(&["synth"])), 1);
    assert_eq!(code(&ttr(&["eval", "--pred", "/nonexistent", "--gt", "/nonexistent", "--out", s(&t.path().join("e"))])), 1);
}

#[test]
fn pretrain_overfits_one_scene() {
    let t = TempDir::new().unwrap();
    let scene = synth(t.path(), 21, 2);
    let cfg = pretrain_config(t.path());
    let out = t.path().join("run");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--overfit", s(&scene), "--steps", "300"]);
    let l = losses(&out.join("loss.csv"));
    assert_eq!(l.len(), 300);
    let head: f64 = l[..20].iter().map(|x| x.1).sum::<f64>() / 20.0;
    let tail: f64 = l[280..].iter().map(|x| x.1).sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");
    assert!(out.join("weights.ckpt").is_file());
    assert!(out.join("optimizer.ckpt").is_file());
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let t = TempDir::new().unwrap();
    let cfg = pretrain_config(t.path());
    let full = t.path().join("full");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&full), "--steps", "30"]);
    let split = t.path().join("split");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&split), "--steps", "20"]);
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&split), "--steps", "30", "--resume"]);
    let a = losses(&full.join("loss.csv"));
    let b = losses(&split.join("loss.csv"));
    assert_eq!(a.len(), 30);
    assert_eq!(a, b);
    assert_eq!(fs::read(full.join("weights.ckpt")).unwrap(), fs::read(split.join("weights.ckpt")).unwrap());
    let before = b[19].1;
    assert!(b[20].1 < 2.0 * before);
}

#[test]
fn diverging_pretraining_exits_with_two() {
    let t = TempDir::new().unwrap();
    let cfg = pretrain_config(t.path());
    let out = ttr(&["pretrain", "--config", s(&cfg), "--out", s(&t.path().join("run")), "--steps", "50", "--lr", "1e30"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn adapt_leaves_the_backbone_alone() {
    let t = TempDir::new().unwrap();
    let weights = micro_weights(t.path());
    let before = fs::read(&weights).unwrap();
    let scene = synth(t.path(), 31, 2);
    let out = t.path().join("adapt");
    ok(&["adapt", "--weights", s(&weights), "--scene", s(&scene), "--out", s(&out), "--lr", "0.00001", "--prompt-len", "4"]);
    assert_eq!(fs::read(&weights).unwrap(), before);
    assert!(out.join("prompts.ckpt").is_file());
    assert_eq!(column(&out.join("summary.csv"), "triplets"), ["8"]);
    assert_eq!(read_rows(&out.join("trace.csv")).len(), 8);
    let resolved: serde_json::Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["ttt"]["lr"].as_f64(), Some(1e-5));
    // per-layer prompts: one encoder layer of 4 tokens of width 16
    assert_eq!(column(&out.join("summary.csv"), "prompt_params"), ["64"]);
}

#[test]
fn reconstruct_and_evaluate() {
    let t = TempDir::new().unwrap();
    let weights = micro_weights(t.path());
    let scene = synth(t.path(), 41, 3);
    let run = |name: &str| {
        let out = t.path().join(name);
        ok(&["reconstruct", "--weights", s(&weights), "--scene", s(&scene), "--out", s(&out), "--iterations", "50"]);
        out
    };
    let a = run("rec_a");
    let b = run("rec_b");
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let ply = fs::read_to_string(a.join("cloud.ply")).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0\nelement vertex 3072\n"));
    assert_eq!(read_rows(&a.join("trace.csv")).len(), 51);

    let no_align = ttr(&["eval", "--pred", s(&a), "--gt", s(&scene), "--out", s(&t.path().join("e0"))]);
    assert_eq!(code(&no_align), 1);
    assert!(String::from_utf8_lossy(&no_align.stderr).contains("pose"));

    let e = t.path().join("e1");
    ok(&["eval", "--pred", s(&a), "--gt", s(&scene), "--out", s(&e), "--cloud-align", "pose", "--name", "s41"]);
    assert_eq!(read_rows(&e.join("depth_metrics.csv")).len(), 3);
    assert_eq!(column(&e.join("cloud_metrics.csv"), "scene"), ["s41"]);
}

#[test]
fn disconnected_pairs_are_rejected() {
    let t = TempDir::new().unwrap();
    let weights = micro_weights(t.path());
    let scene = synth(t.path(), 43, 3);
    let out = ttr(&[
        "reconstruct",
        "--weights",
        s(&weights),
        "--scene",
        s(&scene),
        "--out",
        s(&t.path().join("rec")),
        "--pairs",
        "0-1,1-0",
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("disconnected"));
}

#[test]
fn ground_truth_scores_perfectly() {
    let t = TempDir::new().unwrap();
    let scene = synth(t.path(), 51, 2);
    let e = t.path().join("eval");
    ok(&["eval", "--pred", s(&scene), "--gt", s(&scene), "--out", s(&e)]);
    for r in column(&e.join("depth_metrics.csv"), "rel") {
        assert_eq!(r.parse::<f64>().unwrap(), 0.0);
    }
    for r in column(&e.join("depth_metrics.csv"), "tau") {
        assert_eq!(r.parse::<f64>().unwrap(), 100.0);
    }
    assert_eq!(column(&e.join("cloud_metrics.csv"), "acc_mean")[0].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn diagnose_tabulates_source_pairs() {
    let t = TempDir::new().unwrap();
    let weights = micro_weights(t.path());
    let scene = synth(t.path(), 61, 3);
    let one = t.path().join("one");
    ok(&["diagnose", "--weights", s(&weights), "--scene", s(&scene), "--out", s(&one), "--ref", "1"]);
    assert_eq!(read_rows(&one.join("consistency.csv")).len(), 1);
    assert!(one.join("diff_r1_a0_b2.svg").is_file());
    assert!(one.join("diff_r1_a0_b2.bin").is_file());
    let all = t.path().join("all");
    ok(&["diagnose", "--weights", s(&weights), "--scene", s(&scene), "--out", s(&all), "--all-refs"]);
    assert_eq!(read_rows(&all.join("consistency.csv")).len(), 3);
}
