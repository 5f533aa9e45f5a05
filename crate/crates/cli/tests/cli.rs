use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: [&str; 8] = [
    "--set=seeds=[0]",
    "--set=pretrain.epochs=5",
    "--set=tasks.0.n_train=21",
    "--set=tasks.1.n_train=21",
    "--set=tasks.0.n_eval=6",
    "--set=tasks.1.n_eval=6",
    "--set=experiment.betas=[0.1]",
    "--set=experiment.strategies=[\"periodic\"]",
];

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

fn lwf(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lwf"))
        .env("LWF_OUTPUT_ROOT", out)
        .arg("--config")
        .arg(config())
        .args(SMALL)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = lwf(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).into_owned();
    assert_eq!(s.trim_end().lines().count(), 1, "diagnostic spans lines: {s:?}");
    s
}

fn file_hash(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap()))
}

fn prepare(out: &Path) {
    for args in [
        &["gen"][..],
        &["pretrain"],
        &["fit-target", "--learning", "add-a"],
        &["elicit", "--forgetting", "add-b"],
        &["fisher", "--learning", "add-a"],
    ] {
        ok(out, args);
    }
}

#[test]
fn score_writes_one_row_per_self_generated_candidate() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let printed = ok(dir.path(), &["score", "--learning", "add-a", "--forgetting", "add-b"]);
    let csv = PathBuf::from(printed.trim());
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count() - 1;
    let selfs = dir.path().join("seed-0/self/add-b-self.jsonl");
    let candidates = std::fs::read_to_string(selfs).unwrap().lines().count();
    assert_eq!(rows, candidates);
    assert_eq!(candidates, 21);
}

#[test]
fn vanilla_training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let ckpt = dir.path().join("seed-0/learn-add-a/runs/vanilla/model.ckpt");
    ok(dir.path(), &["train", "--learning", "add-a", "--strategy", "vanilla"]);
    let first = file_hash(&ckpt);
    ok(dir.path(), &["train", "--learning", "add-a", "--strategy", "vanilla"]);
    assert_eq!(file_hash(&ckpt), first);
}

#[test]
fn full_pipeline_then_report() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    ok(dir.path(), &["score", "--learning", "add-a", "--forgetting", "add-b"]);
    for f in [&[][..], &["--forgetting", "add-b"]] {
        let mut train = vec!["train", "--learning", "add-a"];
        train.extend(f);
        ok(dir.path(), &train);
        let mut eval = vec!["eval", "--learning", "add-a"];
        eval.extend(f);
        ok(dir.path(), &eval);
    }
    let text = ok(dir.path(), &["report"]);
    assert!(text.contains("add-a"), "{text}");
    for f in ["report.json", "report.txt", "report-learning_acc_change_pct.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(dir
        .path()
        .join("seed-0/learn-add-a/runs/periodic-highest-add-b-b0.1/selection.json")
        .exists());

    // a different config must not reuse these artifacts
    let o = lwf(dir.path(), &["report", "--set", "train.n_u=5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).contains("config"));
}

#[test]
fn missing_inputs_name_their_producer() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen"]);
    let o = lwf(dir.path(), &["train", "--learning", "add-a"]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr_line(&o);
    assert!(msg.contains("base.ckpt") && msg.contains("pretrain"), "{msg}");
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["gen", "--set", "train.nope=1"],
        &["gen", "--set", "train.beta=-1"],
        &["gen", "--set", "experiment.learning=[\"add-z\"]"],
        &["pretrain", "--seed", "9"],
        &["train", "--learning", "add-a", "--strategy", "sideways"],
    ] {
        let o = lwf(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        stderr_line(&o);
    }
    let o = Command::new(env!("CARGO_BIN_EXE_lwf"))
        .args(["--config", "/nonexistent/lwf.toml", "gen"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    stderr_line(&o);
}

#[test]
fn set_overrides_the_environment_output_root() {
    let env_dir = tempfile::tempdir().unwrap();
    let set_dir = tempfile::tempdir().unwrap();
    let target = format!("--set=output_dir=\"{}\"", set_dir.path().display());
    ok(env_dir.path(), &["gen", &target]);
    assert!(set_dir.path().join("data/add-a.train.jsonl").exists());
    assert!(!env_dir.path().join("data").exists());
}
