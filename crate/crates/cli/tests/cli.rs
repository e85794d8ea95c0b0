use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "schema_version = 1\nname = \"small\"\nseed = 3\n\n[bundle]\nnodes = 12\nkind = \"mobius\"\n\n[covariance]\nlength_scale = 0.1\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bundlelab"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    fs::write(&p, text).unwrap();
    p
}

fn stage(name: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(name)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn two_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = stage("run", &cfg, out, &[]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let (fa, fb) = (artifacts(&a), artifacts(&b));
    assert!(
        fa.len() >= 14,
        "{:?}",
        fa.iter().map(|f| &f.0).collect::<Vec<_>>()
    );
    for ((na, ca), (nb, cb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ca == cb, "{na} differs between runs");
    }
}

#[test]
fn verify_before_reconstruct_names_the_missing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = stage("verify", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let msg = text(&o);
    assert!(
        msg.contains("stage input missing") && msg.contains("recovered_model.json"),
        "{msg}"
    );
    assert!(msg.contains("run `reconstruct` first"), "{msg}");
}

#[test]
fn changed_config_invalidates_downstream_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    assert!(stage("reconstruct", &cfg, &out, &[]).status.success());
    let o = stage("verify", &cfg, &out, &["--seed", "4"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("reconstruct"));
}

#[test]
fn unknown_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = stage("simulate", &cfg, &out, &["--set", "bundle.nodez=10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("bundle.nodez"), "{}", text(&o));

    let bad = write_config(tmp.path(), &format!("{SMALL}\n[oracle]\nbudget = 3\n"));
    let o = stage("simulate", &bad, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("oracle.budget"), "{}", text(&o));
}

#[test]
fn rerun_with_unchanged_inputs_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    assert!(stage("simulate", &cfg, &out, &[]).status.success());
    let before = artifacts(&out);
    let o = stage("simulate", &cfg, &out, &[]);
    assert!(o.status.success());
    assert!(text(&o).contains("simulate: up to date"), "{}", text(&o));
    assert_eq!(before, artifacts(&out));

    // a damaged output forces the stage to run again
    fs::write(out.join("model.json"), "{}").unwrap();
    let o = stage("simulate", &cfg, &out, &[]);
    assert!(!text(&o).contains("up to date"));
    assert_eq!(before, artifacts(&out));
}

#[test]
fn bundled_trivial_line_passes_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/trivial_line.toml");
    let out = tmp.path().join("out");
    let o = stage("run", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(rows.len() >= 9);
    assert!(rows.iter().all(|r| r.ends_with(",true")), "{csv}");
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.ends_with("overall PASS\n"));
    let resid = fs::read_to_string(out.join("residual_vs_n.csv")).unwrap();
    let vals: Vec<f64> = resid
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(vals.windows(2).all(|w| w[1] <= w[0]));
}
