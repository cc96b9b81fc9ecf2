use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn coattn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coattn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("COATTN_DATA")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(&path, r#"{"train": {"subset_sizes": [24, 8, 8], "epochs": 1, "batch": 8}}"#).unwrap();
    path
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn quick_verify_on_p4_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = coattn(&["verify", "--group", "p4", "--quick", "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("Circulant"));
    assert!(out.join("verify.json").is_file());
}

#[test]
fn quick_verify_on_p4m_reports_block_circulant_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = coattn(&["verify", "--group", "p4m", "--quick", "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("BlockCirculant"));
}

#[test]
fn unknown_group_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = coattn(&["verify", "--group", "bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_arch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = coattn(&["train", "--arch", "resnet", "--synthetic", "quarter"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nowhere");
    let o = coattn(
        &["train", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no dataset found"));
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = coattn(
            &["gen-data", "--synthetic", "quarter", "--seed", "3", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(["train", "valid", "test"].map(|s| fs::read(out.join(format!("{s}.amat"))).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(String::from_utf8_lossy(&outputs[0][0]).lines().count(), 24);
}

#[test]
fn train_is_deterministic_and_eval_reads_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut histories = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = coattn(
            &["train", "--arch", "a-p4cnn", "--synthetic", "uniform", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
        for f in ["history.csv", "params.bin", "params.json", "equicheck.json", "summary.json", "config-train.json"] {
            assert!(out.join(f).is_file(), "missing {f}");
        }
        histories.push((fs::read(out.join("history.csv")).unwrap(), fs::read(out.join("params.bin")).unwrap()));
    }
    assert_eq!(histories[0], histories[1]);
    let header = String::from_utf8_lossy(&histories[0].0).lines().next().unwrap().to_string();
    assert_eq!(header, "epoch,train_loss,valid_error");

    let out = dir.path().join("a");
    let o = coattn(&["eval", "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let err: f64 = stdout(&o).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&err));
}

#[test]
fn eval_rejects_truncated_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = coattn(
        &["train", "--synthetic", "quarter", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let blob = out.join("params.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    let o = coattn(&["eval", "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn nothing_is_written_outside_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path().join("cwd");
    fs::create_dir(&cwd).unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let before = files_under(dir.path());
    let o = coattn(
        &["train", "--synthetic", "quarter", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &cwd,
    );
    assert_eq!(o.status.code(), Some(0));
    let new: Vec<PathBuf> = files_under(dir.path()).into_iter().filter(|p| !before.contains(p)).collect();
    assert!(!new.is_empty());
    assert!(new.iter().all(|p| p.starts_with(&out)), "{new:?}");
}
