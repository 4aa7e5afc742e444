use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cbamnet::cli::{gradcam_file_name, seed_dir, CHECKPOINT_FILE, EXIT_DATA, EXIT_USAGE, HISTORY_FILE, SEED_REPORT_FILE};

fn cbamnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbamnet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cbamnet(args);
    assert!(out.status.success(), "`cbamnet {}` failed:\n{}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, per_class: &str) {
    ok(&["synth", "--out", s(dir), "--per-class", per_class, "--side", "32", "--seed", "5"]);
}

#[test]
fn synth_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "6");
    synth(&b, "6");
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert!(!fa.is_empty());
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{} differs", x.display());
    }
}

#[test]
fn ingest_names_pneumonia_files_without_a_subtype() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "10");
    let pneumonia = data.join("train").join("PNEUMONIA");
    let donor = files_under(&pneumonia).into_iter().next().unwrap();
    fs::copy(&donor, pneumonia.join("person9_mystery.png")).unwrap();
    let out = cbamnet(&["ingest", "--data", s(&data), "--out", s(&tmp.path().join("index.tsv"))]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("person9_mystery.png"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "per_class = 4\nlearning_rate = 0.1\n").unwrap();
    let out = cbamnet(&["--config", s(&cfg), "synth", "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains(":2:"), "{err}");
}

#[test]
fn train_evaluate_report_and_gradcam() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run, cams) = (tmp.path().join("data"), tmp.path().join("run"), tmp.path().join("cams"));
    synth(&data, "12");
    ok(&[
        "train", "--data", s(&data), "--out", s(&run), "--side", "32", "--seeds", "1,2", "--phase1-epochs", "1", "--phase2-epochs", "1",
        "--batch-size", "8",
    ]);
    for seed in [1, 2] {
        let d = seed_dir(&run, seed);
        for f in [CHECKPOINT_FILE, HISTORY_FILE] {
            assert!(d.join(f).is_file(), "missing {}", d.join(f).display());
        }
    }
    let evaluated = ok(&["evaluate", "--run", s(&run)]);
    assert!(!evaluated.stdout.is_empty());
    for seed in [1, 2] {
        assert!(seed_dir(&run, seed).join(SEED_REPORT_FILE).is_file());
    }
    let report = ok(&["report", "--run", s(&run)]);
    assert!(String::from_utf8_lossy(&report.stdout).contains('±'));
    assert!(run.join("report.json").is_file() && run.join("report.txt").is_file());

    let image = files_under(&data.join("test").join("PNEUMONIA")).into_iter().next().unwrap();
    let ckpt = seed_dir(&run, 1).join(CHECKPOINT_FILE);
    ok(&["gradcam", "--checkpoint", s(&ckpt), "--out", s(&cams), "--class", "viral", s(&image)]);
    let written = files_under(&cams);
    assert_eq!(written.len(), 1);
    let name = written[0].file_name().unwrap().to_string_lossy().into_owned();
    let stem = image.file_stem().unwrap().to_string_lossy().into_owned();
    let predicted = ["normal", "bacterial", "viral"].into_iter().find(|p| name == gradcam_file_name(&stem, p, "viral"));
    assert!(predicted.is_some(), "unexpected file name {name}");
}
