use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flocbal"))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

const BASE: &str = r#"
[grid]
lambda_min = 1.0
lambda_max = 16.0
bins = 12

[kernels]
d = 1
aggregation = { family = "constant", beta0 = 0.2 }
fragmentation = { family = "constant", k_f = 0.1 }

[fluid]
k = 0.01
eps = 0.01

[initial]
kind = "exponential"
mass = 1.0
scale = 2.0

[scenario]
mode = "zero_d_aggfrag"
t_end = 2.0
dt = 0.1
"#;

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn valid_config_runs_and_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "ok.toml", BASE);
    let out = tmp.path().join("out");
    let o = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let series = fs::read_to_string(out.join("series.csv")).unwrap();
    assert!(series.starts_with("t,"));
    assert!(series.lines().count() > 2);
    assert!(out.join("report.txt").exists());
    let dists = fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name();
            name.to_string_lossy().starts_with("dist_")
        })
        .count();
    assert!(dists >= 2);
}

#[test]
fn negative_relaxation_time_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let body = BASE.replace(
        "[scenario]",
        "[relaxation]\nT_eq = -1.0\nsigma0 = 1.0\n\n[scenario]",
    );
    let cfg = write(tmp.path(), "neg.toml", &body);
    let o = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("T_eq"), "{}", text(&o));
    let o = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("T_eq"), "{}", text(&o));
}

#[test]
fn unknown_family_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let body = BASE.replace(
        "family = \"constant\", beta0",
        "family = \"brownian\", beta0",
    );
    let cfg = write(tmp.path(), "fam.toml", &body);
    let o = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("brownian"), "{}", text(&o));
}

#[test]
fn inverted_grid_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let body = BASE.replace("lambda_max = 16.0", "lambda_max = 0.5");
    let cfg = write(tmp.path(), "grid.toml", &body);
    let o = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("grid.lambda_max"), "{}", text(&o));
}

#[test]
fn missing_file_is_a_config_error() {
    let o = bin()
        .arg("validate")
        .arg("/nonexistent/cfg.toml")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn conservation_check_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "ok.toml", BASE);
    let out = tmp.path().join("out");
    let o = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--check-conservation")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("conservation"), "{report}");
}

#[test]
fn raw_tables_fail_a_strict_conservation_check() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "ok.toml", BASE);
    let o = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .args(["--check-conservation", "--mode", "raw", "--quad-order", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
}

#[test]
fn shipped_configs_validate() {
    for e in fs::read_dir(configs()).unwrap() {
        let p = e.unwrap().path();
        let o = bin().arg("validate").arg(&p).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}: {}", p.display(), text(&o));
    }
}
