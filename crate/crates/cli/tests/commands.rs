use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use vsalign::datasets::{load_descriptions, load_manifest, synth_generate, MANIFEST_FILE};
use vsalign::evaluation::{ConditionResult, EvalReport};
use vsalign_cli::{resolve_config, GlobalOptions};

/// A quick profile: small images and short schedules.
const SMALL: &str = r#"
[dataset.synth]
base_classes = 8
val_classes = 2
novel_classes = 6
examples_per_class = 20
latent_dim = 8
semantic_dim = 8
image_shape = { height = 4, width = 4, channels = 1 }

[train.encoder]
output_dim = 16
hidden_width = 16

[train.stage1]
epochs = 3
decay_epochs = [2]

[train.stage2]
epochs = 3
steps_per_epoch = 4
tasks_per_batch = 2
q_per_class = 5

[eval]
episodes = 60
q_per_class = 10
"#;

fn vsalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsalign"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vsalign(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_data_round_trips_through_the_loaders() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("data");
    ok(&["synth-data", "--config", s(&cfg), "--seed", "4", "--out", s(&out)]);

    let resolved = resolve_config(&GlobalOptions {
        config: Some(cfg),
        seed: Some(4),
        ..Default::default()
    })
    .unwrap();
    let expected = synth_generate(&resolved.dataset.synth, 4).unwrap();
    let dataset = load_manifest(&out.join(MANIFEST_FILE), 1).unwrap();
    assert_eq!(dataset, expected.dataset);
    assert_eq!(load_descriptions(&out.join("descriptions.jsonl"), &dataset).unwrap(), expected.corpus);
    assert!(out.join("synth-data.config.toml").is_file());
}

fn assert_same_files(a: &[(String, Vec<u8>)], b: &[(String, Vec<u8>)]) {
    let names = |v: &[(String, Vec<u8>)]| v.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    assert_eq!(names(a), names(b));
    for ((name, x), (_, y)) in a.iter().zip(b) {
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth-data", "--config", s(&cfg), "--seed", "2", "--out", s(&data)]);
    let first = dir_bytes(&data);
    ok(&["synth-data", "--config", s(&cfg), "--seed", "2", "--out", s(&data), "--force"]);
    assert_same_files(&first, &dir_bytes(&data));

    let run = tmp.path().join("run");
    let pipeline = |force: bool| {
        for cmd in ["pretrain", "meta-train", "eval"] {
            let mut args = vec![cmd, "--config", s(&cfg), "--out", s(&run)];
            if force {
                args.push("--force");
            }
            ok(&args);
        }
        (dir_bytes(&run), dir_bytes(&run.join("checkpoints")))
    };
    let (files, ckpts) = pipeline(false);
    let (files2, ckpts2) = pipeline(true);
    assert_same_files(&files, &files2);
    assert_same_files(&ckpts, &ckpts2);
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("data");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let r = vsalign(&["synth-data", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8(r.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[output-exists]:"), "{err}");
    assert_eq!(fs::read_to_string(out.join("keep.txt")).unwrap(), "x");
    ok(&["synth-data", "--config", s(&cfg), "--out", s(&out), "--force"]);
}

#[test]
fn eval_without_checkpoint_is_a_prerequisite_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let r = vsalign(&["eval", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8(r.stderr).unwrap();
    assert!(err.starts_with("error[missing-prerequisite]:"), "{err}");
    let r = vsalign(&["meta-train", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn bad_config_keys_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let r = vsalign(&["pretrain", "--out", s(tmp.path()), "train.stage1.epoch=3"]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8(r.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[invalid-config]:"), "{err}");
}

#[test]
fn compare_rows_equal_separate_eval_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mut evals = Vec::new();
    for (name, flags) in [("base", vec!["--no-vs"]), ("vs", vec![])] {
        let dir = tmp.path().join(name);
        for cmd in ["pretrain", "meta-train", "eval"] {
            let mut args = vec![cmd, "--config", s(&cfg), "--seed", "5", "--out", s(&dir)];
            args.extend(&flags);
            ok(&args);
        }
        let report: EvalReport = serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
        evals.push(report);
    }
    let cmp = tmp.path().join("cmp");
    let table = ok(&["compare", "--config", s(&cfg), "--seed", "5", "--out", s(&cmp)]);
    assert!(table.contains("meta-baseline+vs"));
    let rows: Vec<ConditionResult> = fs::read_to_string(cmp.join("compare.jsonl"))
        .unwrap()
        .lines()
        .take(2)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows[0].report, evals[0]);
    assert_eq!(rows[1].report, evals[1]);
}

#[test]
fn commands_leave_their_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth-data", "--config", s(&cfg), "--out", s(&data)]);
    let before = dir_bytes(&data);
    let cfg_before = fs::read(&cfg).unwrap();
    let run = tmp.path().join("run");
    let manifest = format!("dataset.manifest=\"{}\"", s(&data.join(MANIFEST_FILE)));
    let descriptions = format!("descriptions.path=\"{}\"", s(&data.join("descriptions.jsonl")));
    for cmd in ["pretrain", "meta-train", "eval"] {
        ok(&[cmd, "--config", s(&cfg), "--out", s(&run), &manifest, &descriptions]);
    }
    assert_eq!(dir_bytes(&data), before);
    assert_eq!(fs::read(&cfg).unwrap(), cfg_before);
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    assert!(metrics.contains("\"meta\"") && metrics.contains("\"classification\""));
}

#[test]
fn desk_pipeline_runs_within_five_minutes() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    let t0 = Instant::now();
    ok(&["synth-data", "--out", s(&data)]);
    let manifest = format!("dataset.manifest=\"{}\"", s(&data.join(MANIFEST_FILE)));
    let descriptions = format!("descriptions.path=\"{}\"", s(&data.join("descriptions.jsonl")));
    ok(&["pretrain", "--out", s(&run), &manifest, &descriptions]);
    ok(&["meta-train", "--out", s(&run), &manifest, &descriptions]);
    let summary = ok(&["eval", "--out", s(&run), &manifest, &descriptions]);
    let elapsed = t0.elapsed();
    assert!(summary.contains("5-way 1-shot on 600 episodes"), "{summary}");
    assert!(elapsed < Duration::from_secs(300), "{elapsed:?}");
}
