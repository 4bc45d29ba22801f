use std::fs;
use std::path::Path;
use std::process::Command;

use pilotsim::experiment::preset_source;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pilotsim"))
}

/// exp3 cut down to two small sizes and two repeats.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let text = preset_source("exp3")
        .unwrap()
        .replace("sizes = [8, 32, 256, 2048]", "sizes = [8, 32]")
        .replace("repeats = 20", "repeats = 2");
    let path = dir.join("small.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn presets_lists_all() {
    let out = bin().arg("presets").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>(), ["exp1", "exp2", "exp3", "exp4", "integrated"]);
}

#[test]
fn run_writes_report_and_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let out = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .arg("--keep-traces")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("experiment,8,32\n"), "{table}");
    for f in ["runs.csv", "summary.json", "pes_table.csv", "traces/n8_r000.ndjson", "traces/n32_r001.ndjson"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }

    // Regenerating from the stored traces gives the same bytes.
    let rebuilt = bin()
        .arg("report")
        .arg(&cfg)
        .arg("--dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(rebuilt.status.success());
    assert_eq!(rebuilt.stdout, fs::read(out_dir.join("runs.csv")).unwrap());
}

#[test]
fn bad_config_names_field() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(small_config(tmp.path()))
        .unwrap()
        .replace("task_duration_s = 1200.0", "task_duration_s = -1.0");
    let path = tmp.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let out = bin().arg("run").arg(&path).arg("--validate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("workload.task_duration_s"), "{err}");

    let unknown = fs::read_to_string(small_config(tmp.path()))
        .unwrap()
        .replace("repeats = 2", "repeats = 2\nrepeatz = 3");
    fs::write(&path, unknown).unwrap();
    let out = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("repeatz"));
}

#[test]
fn validate_only_does_not_write() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("never");
    let out = bin()
        .args(["run", "--preset", "exp1", "--validate", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "exp1: ok\n");
    assert!(!out_dir.exists());
}

#[test]
fn incomplete_runs_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(small_config(tmp.path())).unwrap().replace(
        "kind = \"aimes\"\npilots_per_site = 1",
        "kind = \"fixed\"\npilots_per_site = 1\ncores_per_pilot = 8\nwalltime_s = 300.0\nbinding = \"late_to_pilot\"",
    );
    let path = tmp.path().join("short.toml");
    fs::write(&path, text).unwrap();
    let out = bin().arg("run").arg(&path).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stdout));
}
