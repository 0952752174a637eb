use std::path::Path;
use std::process::{Command, Output};

fn cascade(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade-seg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cascade-seg")
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

const SMALL: &str = r#"
seed = 11
[split]
test_cases = 2
[coarse]
spacing = [4.0, 4.0, 8.0]
dims = [16, 16, 8]
levels = 2
[refine]
patch_dims = [8, 8, 4]
levels = 2
[phantom]
cases = 6
dims = [32, 32, 16]
spacing = [2.0, 2.0, 4.0]
radius_min_mm = [8.0, 8.0, 12.0]
radius_max_mm = [10.0, 10.0, 14.0]
min_organs = 2
max_organs = 3
organ_pool = [{ id = 1, mean = 150.0 }, { id = 3, mean = 210.0 }, { id = 6, mean = 100.0 }]
"#;

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = cascade(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "phantom",
        "cv-split",
        "preprocess",
        "train-coarse",
        "infer-coarse",
        "build-patches",
        "train-refine",
        "infer",
        "evaluate",
    ] {
        assert!(text.contains(sub), "missing {sub} in help");
    }
}

#[test]
fn failures_print_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = cascade(&["--config", "missing.toml", "phantom"], dir.path());
    let v = error_json(&out);
    assert_eq!(v["kind"], "io");
    assert!(v["message"].as_str().unwrap().contains("missing.toml"));

    std::fs::write(dir.path().join("bad.toml"), "[coarse]\ndims = [100, 168, 64]\n").unwrap();
    let v = error_json(&cascade(&["--config", "bad.toml", "phantom"], dir.path()));
    assert_eq!(v["kind"], "config");

    // Training before any split exists.
    let v = error_json(&cascade(&["--out", "work", "train-coarse"], dir.path()));
    assert!(v["kind"].is_string());
}

#[test]
fn front_stages_and_evaluate_run_on_a_small_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("small.toml"), SMALL).unwrap();
    for cmd in ["phantom", "cv-split", "preprocess"] {
        let out = cascade(&["--config", "small.toml", "--threads", "1", cmd], p);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read_dir(p.join("data/images")).unwrap().count(), 6);
    let splits: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("work/splits.json")).unwrap()).unwrap();
    assert_eq!(splits["test"].as_array().unwrap().len(), 2);
    assert_eq!(splits["folds"].as_array().unwrap().len(), 4);

    // Ground truth scored against itself.
    let out = cascade(
        &[
            "evaluate",
            "--pred",
            "data/labels",
            "--gt",
            "data/labels",
            "--out",
            "rep",
        ],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout);
    let row = csv.lines().nth(1).unwrap();
    assert!(row.ends_with("1.0000"), "{row}");
    assert!(p.join("rep/dice.csv").exists() && p.join("rep/dice.json").exists());
}
