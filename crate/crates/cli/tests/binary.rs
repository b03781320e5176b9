use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_calibratemix"))
}

fn tiny_config() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny-moons.toml")
}

#[test]
fn dry_run_prints_resolved_config() {
    let out = bin()
        .args(["run", "--dry-run"])
        .arg(tiny_config())
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("unlabeled_batch = 56"), "{text}");
    assert!(text.contains("warmup_steps = 20"), "{text}");
}

#[test]
fn bad_config_exits_nonzero_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = fs::read_to_string(tiny_config())
        .unwrap()
        .replace("steps = 200", "steps = 200\nk = 150.0");
    fs::write(&path, text).unwrap();
    let out = bin().args(["run", "--dry-run"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("trainer.k"), "{err}");
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "--seed-override", "5"])
        .arg(tiny_config())
        .env("CALIBRATEMIX_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("summary.csv").is_file());
    assert!(dir.path().join("seed-5/metrics.csv").is_file());
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .starts_with("metric,mean,std,n"));
}

#[test]
fn suite_with_a_failing_arm_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "suite",
            "--arms",
            "fixmatch,calibratemix",
            "--seed-override",
            "1",
            "--out",
        ])
        .arg(dir.path())
        .arg(tiny_config())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("comparison.csv").is_file());

    let path = dir.path().join("diverge.toml");
    let text = fs::read_to_string(tiny_config())
        .unwrap()
        .replace("steps = 200", "steps = 200\nlearning_rate = 1e300");
    fs::write(&path, text).unwrap();
    let out = bin()
        .args([
            "suite",
            "--arms",
            "fixmatch,calibratemix",
            "--seed-override",
            "1",
            "--out",
        ])
        .arg(dir.path().join("diverge"))
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains(",failed,"));
}
