use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use motiondiff::checkpoint::Checkpoint;
use motiondiff::denoiser::Denoiser;
use motiondiff::diffusion::init_seed;
use motiondiff::motion::{load_motion, parse_trajectory_csv, save_motion, Motion};
use tempfile::TempDir;

const SPEC: &str = r#"{"joints": 2, "frames": 16, "fps": 20.0, "families": [
    {"caption": "walk fast", "speed": [1.6, 2.0], "heading": [-0.2, 0.2],
     "swing": [0.1, 0.3], "cadence": [1.0, 2.0]},
    {"caption": "walk slow", "speed": [0.3, 0.6], "heading": [-0.2, 0.2],
     "swing": [0.1, 0.3], "cadence": [1.0, 2.0]}]}"#;

fn motiondiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motiondiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = motiondiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(tree(&path));
        } else {
            out.push((
                path.strip_prefix(dir).unwrap().to_path_buf(),
                fs::read(&path).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

/// A dataset plus a config for a small, quick model.
fn setup(steps: usize) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    ok(&[
        "gen-data",
        "--spec",
        s(&spec),
        "--out",
        s(&dir.path().join("data")),
        "--n",
        "40",
        "--seed",
        "3",
    ]);
    let config = dir.path().join("train.toml");
    fs::write(
        &config,
        format!(
            "dataset = \"data/manifest.jsonl\"\nout_dir = \"run\"\nseed = 7\nschedule = \"linear\"\n\
             beta_start = 1e-3\nbeta_end = 0.2\ndiffusion_steps = 50\nseq_len = 16\nbatch_size = 16\n\
             steps = {steps}\nlr = 2e-3\ntext_dim = 32\nembed_dim = 16\nhidden = [16, 32]\n"
        ),
    )
    .unwrap();
    (dir, config)
}

/// One trained toy model shared by the sampling and evaluation tests.
fn trained() -> &'static (TempDir, PathBuf) {
    static CELL: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    CELL.get_or_init(|| {
        let (dir, config) = setup(400);
        ok(&["train", "--config", s(&config)]);
        let ck = dir.path().join("run/checkpoint.json");
        (dir, ck)
    })
}

#[test]
fn gen_data_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let empty = dir.path().join("empty");
    let printed = ok(&[
        "gen-data",
        "--spec",
        s(&spec),
        "--out",
        s(&empty),
        "--n",
        "0",
        "--seed",
        "1",
    ]);
    assert_eq!(printed.trim(), s(&empty.join("manifest.jsonl")));
    assert_eq!(fs::read_to_string(empty.join("manifest.jsonl")).unwrap(), "");

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "gen-data",
            "--spec",
            s(&spec),
            "--out",
            s(out),
            "--n",
            "100",
            "--seed",
            "9",
        ]);
    }
    assert_eq!(
        fs::read_to_string(a.join("manifest.jsonl"))
            .unwrap()
            .lines()
            .count(),
        100
    );
    assert_eq!(tree(&a), tree(&b));
    assert!(a.join("gen_data_config.json").is_file());
}

#[test]
fn gen_data_rejects_bad_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"joints": 0, "frames": 16, "fps": 20.0, "families": []}"#,
    )
    .unwrap();
    let out = motiondiff(&[
        "gen-data",
        "--spec",
        s(&spec),
        "--out",
        s(dir.path()),
        "--n",
        "1",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let missing = motiondiff(&[
        "gen-data",
        "--spec",
        "/no/such/spec.json",
        "--out",
        s(dir.path()),
        "--n",
        "1",
        "--seed",
        "1",
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn zero_step_training_is_initialization_and_reruns_are_identical() {
    let (dir, config) = setup(0);
    ok(&["train", "--config", s(&config)]);
    let run = dir.path().join("run");
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap(), "step,loss\n");
    let ck = Checkpoint::load(run.join("checkpoint.json")).unwrap();
    let net = Denoiser::new(ck.denoiser.clone()).unwrap();
    assert_eq!(ck.model().unwrap().params, net.init_params(init_seed(7)));

    let first = fs::read(run.join("checkpoint.json")).unwrap();
    ok(&[
        "train",
        "--config",
        s(&config),
        "--steps",
        "3",
        "--out-dir",
        s(&dir.path().join("r1")),
    ]);
    ok(&[
        "train",
        "--config",
        s(&config),
        "--steps",
        "3",
        "--out-dir",
        s(&dir.path().join("r2")),
    ]);
    let r1 = fs::read(dir.path().join("r1/checkpoint.json")).unwrap();
    assert_eq!(r1, fs::read(dir.path().join("r2/checkpoint.json")).unwrap());
    assert_ne!(r1, first);
    let losses = fs::read_to_string(dir.path().join("r1/loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 4);
    let resolved = fs::read_to_string(dir.path().join("r1/train_config.toml")).unwrap();
    assert!(resolved.contains("steps = 3"), "{resolved}");
    assert!(resolved.contains("p_uncond = 0.1"), "{resolved}");
}

#[test]
fn train_validation_failures_exit_1() {
    let (dir, config) = setup(1);
    let out = motiondiff(&[
        "train",
        "--config",
        s(&config),
        "--dataset",
        "/no/such/manifest.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "out_dir = \"x\"\nseq_len = 16\nlr = -1.0\nbatch_size = 0\n").unwrap();
    let out = motiondiff(&["train", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["dataset is required", "seed is required"] {
        assert!(err.contains(needle), "{err}");
    }

    fs::write(&bad, "seed = 1\nunknown_key = 3\n").unwrap();
    assert_eq!(motiondiff(&["train", "--config", s(&bad)]).status.code(), Some(1));
}

#[test]
fn divergence_exits_2() {
    let (_dir, config) = setup(100);
    let out = motiondiff(&["train", "--config", s(&config), "--lr", "1e150"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn sampling_is_reproducible_and_records_defaults() {
    let (dir, ck) = trained();
    let a = dir.path().join("sa");
    let b = dir.path().join("sb");
    for out in [&a, &b] {
        ok(&[
            "sample",
            "--checkpoint",
            s(ck),
            "--text",
            "walk fast",
            "--count",
            "1",
            "--seed",
            "5",
            "--out",
            s(out),
        ]);
    }
    assert_eq!(tree(&a), tree(&b));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("sample_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["w"], 2.0);
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["text"], "walk fast");
    let m = load_motion(a.join("sample_000.json")).unwrap();
    assert_eq!(m.frames().dim(), (16, 6));
}

#[test]
fn unseen_caption_samples_finite_motions() {
    let (dir, ck) = trained();
    let out = dir.path().join("zero_shot");
    ok(&[
        "sample",
        "--checkpoint",
        s(ck),
        "--text",
        "walk very fast",
        "--count",
        "3",
        "--w",
        "1.5",
        "--seed",
        "6",
        "--out",
        s(&out),
    ]);
    for i in 0..3 {
        let m = load_motion(out.join(format!("sample_{i:03}.json"))).unwrap();
        assert!(m.frames().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn sampling_rejects_bad_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.json");
    fs::write(&ck, r#"{"format_version": 99}"#).unwrap();
    let out = motiondiff(&[
        "sample",
        "--checkpoint",
        s(&ck),
        "--text",
        "x",
        "--seed",
        "1",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 99"));
}

#[test]
fn eval_report_schema_and_degenerate_case() {
    let (dir, ck) = trained();
    let spec = dir.path().join("spec.json");
    let degenerate = dir.path().join("degenerate.json");
    ok(&[
        "eval",
        "--checkpoint",
        s(ck),
        "--spec",
        s(&spec),
        "--out",
        s(&degenerate),
        "--seed",
        "1",
        "--samples-per-text",
        "2",
        "--subset-size",
        "1",
        "--variance-pairs",
        "1",
        "--shared-noise",
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&degenerate).unwrap()).unwrap();
    assert_eq!(report["diversity"], 0.0);
    for key in ["diversity", "variance", "conditional_accuracy"] {
        assert!(report[key].is_number(), "{key}");
    }
    assert_eq!(report["config"]["seed"], 1);
    assert_eq!(report["config"]["w"], 2.0);
}

#[test]
fn eval_diversity_stable_across_seeds() {
    let (dir, ck) = trained();
    let spec = dir.path().join("spec.json");
    let mut values = Vec::new();
    for seed in ["11", "12"] {
        let out = dir.path().join(format!("report_{seed}.json"));
        ok(&[
            "eval",
            "--checkpoint",
            s(ck),
            "--spec",
            s(&spec),
            "--out",
            s(&out),
            "--seed",
            seed,
        ]);
        let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        values.push(report["diversity"].as_f64().unwrap());
    }
    let rel = (values[0] - values[1]).abs() / values[0].max(values[1]);
    assert!(rel < 0.1, "diversities {values:?}");
}

#[test]
fn eval_rejects_mismatched_spec() {
    let (dir, ck) = trained();
    let spec = dir.path().join("spec3.json");
    fs::write(&spec, SPEC.replace("\"joints\": 2", "\"joints\": 3")).unwrap();
    let out = motiondiff(&[
        "eval",
        "--checkpoint",
        s(ck),
        "--spec",
        s(&spec),
        "--out",
        s(&dir.path().join("r.json")),
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn export_traj_rows_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let single = dir.path().join("one.json");
    save_motion(
        &Motion::new(ndarray::array![[0.25, 1.0, -3.5]], 20.0).unwrap(),
        &single,
    )
    .unwrap();
    let csv = dir.path().join("one.csv");
    ok(&["export-traj", "--motion", s(&single), "--out", s(&csv)]);
    assert_eq!(
        fs::read_to_string(&csv).unwrap(),
        "frame,joint,x,y,z\n0,0,0.25,1.0,-3.5\n"
    );

    let frames = ndarray::Array2::from_shape_fn((9, 12), |(t, c)| ((t * 12 + c) as f64).sin() / 3.0);
    let m = Motion::new(frames, 20.0).unwrap();
    let path = dir.path().join("m.json");
    save_motion(&m, &path).unwrap();
    let csv = dir.path().join("m.csv");
    ok(&["export-traj", "--motion", s(&path), "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 9 * 4);
    assert_eq!(parse_trajectory_csv(&text, 20.0).unwrap(), m);

    fs::write(&path, "{\"fps\": 20.0}").unwrap();
    let out = motiondiff(&["export-traj", "--motion", s(&path), "--out", s(&csv)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(motiondiff(&["sample", "--text", "x"]).status.code(), Some(1));
    assert_eq!(motiondiff(&["--help"]).status.code(), Some(0));
}
