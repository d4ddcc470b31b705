use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use viewbridge::domain::ClipDims;
use viewbridge::gradcheck::tiny_config;
use viewbridge::synth::GeneratorSpec;
use viewbridge::TrainConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_viewbridge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn viewbridge")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_files(dir: &Path) -> (PathBuf, PathBuf) {
    let mut spec = GeneratorSpec::benchmark(0);
    spec.num_classes = 3;
    spec.n_clips_per_class = 8;
    spec.dims = ClipDims { frames: 2, height: 8, width: 8, channels: 3 };
    let spec_path = dir.join("spec.toml");
    std::fs::write(&spec_path, spec.to_toml_string().unwrap()).unwrap();
    let cfg = TrainConfig {
        num_classes: 3,
        epochs_phase1: 1,
        epochs_phase2: 1,
        batch_phase2: 8,
        ..tiny_config()
    };
    let cfg_path = dir.join("config.toml");
    cfg.save(&cfg_path).unwrap();
    (spec_path, cfg_path)
}

#[test]
fn sync_matches_golden_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("groups.jsonl");
    let o = run(&["sync", "--data", s(&fixture("sync_manifest.jsonl")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = std::fs::read_to_string(&out).unwrap();
    let want = std::fs::read_to_string(fixture("sync_groups.golden.jsonl")).unwrap();
    assert_eq!(got, want);
}

#[test]
fn unknown_flag_writes_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let o = run(&["gen-data", "--out", s(&out), "--frames-per-second", "30"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--frames-per-second"));
    assert!(!out.exists());
}

#[test]
fn invalid_config_is_rejected_before_anything_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "tau = 0.0\n").unwrap();
    let out = dir.path().join("run");
    let o = run(&["baseline", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"));
    assert!(!out.exists());

    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = run(&["baseline", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".lock"), "").unwrap();
    let (spec, _) = tiny_files(dir.path());
    let o = run(&["gen-data", "--spec", s(&spec), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
    assert!(!out.join("manifest.jsonl").exists());
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (spec, cfg) = tiny_files(root);
    let data = root.join("data");
    let ok = |o: Output| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    ok(run(&["gen-data", "--spec", s(&spec), "--seed", "2", "--out", s(&data)]));
    ok(run(&["gen-foreign", "--spec", s(&spec), "--seed", "2", "--out", s(&root.join("foreign"))]));
    ok(run(&["sync", "--data", s(&data), "--out", s(&root.join("groups.jsonl"))]));
    ok(run(&["split", "--data", s(&data), "--seed", "2", "--out", s(&root.join("split.jsonl"))]));
    let p1 = root.join("p1");
    ok(run(&["train-phase1", "--config", s(&cfg), "--data", s(&data), "--out", s(&p1)]));
    let p2 = root.join("p2");
    let ckpt = p1.join("model.ckpt");
    ok(run(&["train-phase2", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&p2)]));
    for f in ["model.ckpt", "optimizer.ckpt", "metrics.jsonl", "config.toml"] {
        assert!(p2.join(f).exists(), "{f}");
    }
    let ev = root.join("eval");
    let ckpt2 = p2.join("model.ckpt");
    ok(run(&[
        "evaluate", "--config", s(&cfg), "--data", s(&data), "--foreign", s(&root.join("foreign")),
        "--checkpoint", s(&ckpt2), "--out", s(&ev),
    ]));
    let table = std::fs::read_to_string(ev.join("table.txt")).unwrap();
    assert!(table.contains("checkpoint") && table.contains("foreign"), "{table}");
    assert!(!p1.join(".lock").exists());
}

#[test]
fn phase2_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p2");
    let o = run(&["train-phase2", "--data", s(dir.path()), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint"));
    assert!(!out.exists());
}
