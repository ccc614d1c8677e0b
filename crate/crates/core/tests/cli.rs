use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use coevo_core::checkpoint::Checkpoint;

fn coevo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coevo"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run coevo")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = coevo(tmp.path(), &["gen-data", "--dataset", name, "--seed", "5", "--clips", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")));
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
    let o = coevo(tmp.path(), &["gen-data", "--dataset", "c", "--seed", "6", "--clips", "3"]);
    assert!(o.status.success());
    assert_ne!(files(&tmp.path().join("c")), a);
}

#[test]
fn eval_without_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = coevo(tmp.path(), &["eval", "--checkpoint", "nowhere.bin"]);
    assert!(!o.status.success());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("kind=missing-checkpoint"), "{err}");
    assert!(err.contains("missing checkpoint"), "{err}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = coevo(tmp.path(), &["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_override_reports_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = coevo(tmp.path(), &["gen-data", "--set", "bogus_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=config"), "{}", stderr(&o));
    let o = coevo(tmp.path(), &["train", "--stage", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=config"), "{}", stderr(&o));
}

#[test]
fn train_eval_and_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let run = |args: &[&str]| {
        let o = coevo(dir, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };
    run(&["gen-data", "--dataset", "data", "--seed", "3", "--clips", "2"]);
    let out = run(&[
        "train",
        "--stage",
        "1",
        "--dataset",
        "data",
        "--checkpoint",
        "s1.bin",
        "--set",
        "steps=4",
        "--set",
        "log_every=1",
        "--curve",
        "curve.csv",
    ]);
    assert_eq!(out.lines().filter(|l| l.starts_with("step=")).count(), 4);
    assert!(out.contains("done steps=4"));
    assert_eq!(fs::read_to_string(dir.join("curve.csv")).unwrap().lines().count(), 5);
    assert!(dir.join("s1.bin.manifest").exists());

    let out = run(&[
        "train",
        "--stage",
        "2",
        "--init",
        "s1.bin",
        "--dataset",
        "data",
        "--checkpoint",
        "s2.bin",
        "--set",
        "steps=3",
    ]);
    assert!(out.contains("terms mesh="), "{out}");

    let out = run(&[
        "eval",
        "--dataset",
        "data",
        "--checkpoint",
        "s2.bin",
        "--json",
        "report.json",
        "--report",
        "report.txt",
    ]);
    for key in ["mpjpe", "pa_mpjpe", "pve", "accel"] {
        assert!(out.contains(&format!("{key} = ")), "{out}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert!(json.is_object());
    assert!(dir.join("report.txt").exists());

    run(&[
        "export-obj",
        "--dataset",
        "data",
        "--checkpoint",
        "s2.bin",
        "--clip",
        "1",
        "--out",
        "pred.obj",
    ]);
    run(&[
        "export-obj",
        "--dataset",
        "data",
        "--clip",
        "1",
        "--out",
        "gt.obj",
        "--ground-truth",
    ]);
    let count = |f: &str, p: &str| {
        fs::read_to_string(dir.join(f))
            .unwrap()
            .lines()
            .filter(|l| l.starts_with(p))
            .count()
    };
    assert_eq!(count("pred.obj", "v "), count("gt.obj", "v "));
    assert_eq!(count("pred.obj", "f "), count("gt.obj", "f "));
    assert!(count("gt.obj", "f ") > 0);

    run(&["export-attn", "--dataset", "data", "--checkpoint", "s2.bin", "--out", "attn"]);
    let maps = fs::read_dir(dir.join("attn")).unwrap().count();
    assert!(maps >= 4 && maps % 4 == 0, "{maps}");

    let o = coevo(
        dir,
        &["export-obj", "--dataset", "data", "--clip", "9", "--out", "x.obj", "--ground-truth"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let run = |args: &[&str]| {
        let o = coevo(dir, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    run(&["gen-data", "--dataset", "data", "--seed", "4", "--clips", "2"]);
    run(&[
        "train",
        "--dataset",
        "data",
        "--checkpoint",
        "full.bin",
        "--set",
        "steps=6",
        "--set",
        "schedule=constant",
    ]);
    run(&[
        "train",
        "--dataset",
        "data",
        "--checkpoint",
        "half.bin",
        "--set",
        "steps=3",
        "--set",
        "schedule=constant",
    ]);
    run(&[
        "train",
        "--dataset",
        "data",
        "--checkpoint",
        "half.bin",
        "--resume",
        "half.bin",
        "--set",
        "steps=6",
        "--set",
        "schedule=constant",
    ]);
    let load = |f: &str| Checkpoint::load(&dir.join(f)).unwrap();
    let (full, half) = (load("full.bin"), load("half.bin"));
    assert_eq!(half.step, 6);
    assert_eq!(full.params, half.params);
    assert_eq!(full.optimizer, half.optimizer);
}

#[test]
fn grad_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = coevo(tmp.path(), &["grad-check", "--probes", "2"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("passed = true"), "{}", stdout(&o));
}
