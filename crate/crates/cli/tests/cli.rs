use std::path::Path;
use std::process::{Command, Output};

fn infkan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infkan"))
        .args(args)
        .current_dir(dir)
        .env_remove("INFKAN_SEED")
        .output()
        .expect("spawn infkan")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_spiral_rows_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate", "spiral", "--n", "2000", "--k", "2", "--seed", "7", "--out", "a.csv"];
    let o = infkan(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(dir.path().join("a.csv")).unwrap();
    let meta = std::fs::read(dir.path().join("a.csv.meta.json")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 2001);

    assert!(infkan(dir.path(), &args).status.success());
    assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), first);
    assert_eq!(std::fs::read(dir.path().join("a.csv.meta.json")).unwrap(), meta);
}

#[test]
fn generate_unknown_dataset_lists_names() {
    let dir = tempfile::tempdir().unwrap();
    let o = infkan(dir.path(), &["generate", "circles"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    for name in ["double_moons", "spiral", "spiral_hard"] {
        assert!(e.contains(name), "{e}");
    }
}

#[test]
fn train_rejects_zero_epochs_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = infkan(dir.path(), &["train", "--optim.epochs", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("optim.epochs"));

    let o = infkan(dir.path(), &["train", "--optim.learning_rate", "0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("optim.learning_rate"));

    std::fs::write(dir.path().join("bad.toml"), "[model]\nkind = \"transformer\"\n").unwrap();
    let o = infkan(dir.path(), &["train", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.kind"));
}

#[test]
fn missing_config_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = infkan(dir.path(), &["train", "absent.toml"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = infkan(
        dir.path(),
        &["train", "--data.n", "200", "--optim.epochs", "5", "--optim.lr", "1e300", "--out", "r"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(dir.path().join("r/manifest.json").exists());
}

#[test]
fn train_double_moons_defaults_reaches_full_test_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("moons.toml"),
        "seed = 0\n[data]\ngenerator = \"double_moons\"\nn = 1000\n",
    )
    .unwrap();
    let o = infkan(dir.path(), &["train", "moons.toml", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert!(!lines.is_empty() && lines.len() <= 1000);
    let tail: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
    assert_eq!(tail["schema_version"], 1);
    assert_eq!(tail["test_metric"], 1.0);
}

#[test]
fn run_directory_evaluates_and_probes() {
    let dir = tempfile::tempdir().unwrap();
    let o = infkan(
        dir.path(),
        &["train", "--data.n", "300", "--optim.epochs", "20", "--optim.patience", "0", "--out", "r"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("r/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 20);
    for f in ["config.toml", "manifest.json", "checkpoint.json", "summary.json", "timings.jsonl"] {
        assert!(dir.path().join("r").join(f).exists(), "{f}");
    }

    let o = infkan(dir.path(), &["evaluate", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let splits: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(splits.len(), 3);
    assert_eq!(splits[2]["split"], "test");

    let o = infkan(dir.path(), &["probe", "gradcheck", "--checkpoint", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    assert!(row[1].parse::<f64>().unwrap() < 1e-4, "{out}");

    let o = infkan(dir.path(), &["probe", "lipschitz", "--checkpoint", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().count() > 1);
    assert!(out.lines().skip(1).all(|l| l.ends_with(",true")), "{out}");

    let o = infkan(dir.path(), &["probe", "window-shape", "--checkpoint", "r/checkpoint.json"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("layer0"));
}

#[test]
fn explicit_seed_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_infkan"));
        c.args(args).current_dir(dir.path()).env_remove("INFKAN_SEED");
        if let Some(s) = env {
            c.env("INFKAN_SEED", s);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let base = ["train", "--data.n", "120", "--optim.epochs", "2"];
    run(&[&base[..], &["--out", "env"]].concat(), Some("11"));
    run(&[&base[..], &["--out", "flag", "--seed", "12"]].concat(), Some("11"));
    let seed = |d: &str| {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(d).join("manifest.json")).unwrap()).unwrap();
        m["seed"].as_u64().unwrap()
    };
    assert_eq!(seed("env"), 11);
    assert_eq!(seed("flag"), 12);

    let o = Command::new(env!("CARGO_BIN_EXE_infkan"))
        .args(["train", "--optim.epochs", "1"])
        .current_dir(dir.path())
        .env("INFKAN_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("INFKAN_SEED"));
}

#[test]
fn probe_window_shape_center_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = infkan(
        dir.path(),
        &["probe", "window-shape", "--lambda", "3", "--beta", "2", "--gamma", "1"],
    );
    assert!(o.status.success());
    let out = stdout(&o);
    let center = out
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|r| r[6] == "0.0")
        .expect("center row");
    let w: f64 = center[7].parse().unwrap();
    assert!((w - 0.997527).abs() < 1e-6, "{w}");
}

#[test]
fn probe_suites_and_orthogonality() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["convergence", "firstorder"] {
        let o = infkan(dir.path(), &["probe", kind]);
        assert!(o.status.success());
        let out = stdout(&o);
        assert!(out.starts_with("property,params,passed,measured,comparison,bound"));
        assert!(out.lines().skip(1).all(|l| l.contains(",true,")), "{out}");
    }
    let o = infkan(dir.path(), &["probe", "basis-orthogonality", "--family", "chebyshev", "--n", "6"]);
    assert!(o.status.success());
    let rows: Vec<Vec<String>> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 36);
    for r in rows.iter().filter(|r| r[2] != r[3]) {
        assert!(r[4].parse::<f64>().unwrap().abs() < 1e-10, "{r:?}");
    }
}

#[test]
fn unknown_probe_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = infkan(dir.path(), &["probe", "hessian"]);
    assert_eq!(o.status.code(), Some(2));
    let o = infkan(dir.path(), &["probe", "gradcheck"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--checkpoint"));
}

#[test]
fn sweep_aggregates_seeds_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let o = infkan(
        dir.path(),
        &[
            "sweep", "--data.n", "160", "--optim.epochs", "3", "--grid", "seed=0,1", "--grid", "prior.eta=2,5",
            "--out", "sw", "--jobs", "2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let runs = std::fs::read_to_string(dir.path().join("sw/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    for i in 0..4 {
        assert!(dir.path().join(format!("sw/run-{i:03}/metrics.jsonl")).exists());
    }
    let summary = std::fs::read_to_string(dir.path().join("sw/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{summary}");
    assert_eq!(rows.iter().filter(|r| r.ends_with(",*")).count(), 1);
}

#[test]
fn sweep_duplicate_seeds_have_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let o = infkan(
        dir.path(),
        &["sweep", "--data.n", "160", "--optim.epochs", "3", "--grid", "seed=4,4,4", "--out", "sw"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("sw/summary.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "3");
    for std_col in [4, 6, 8] {
        assert_eq!(row[std_col].parse::<f64>().unwrap(), 0.0, "{summary}");
    }
}

#[test]
fn sweep_needs_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = infkan(dir.path(), &["sweep", "--optim.epochs", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = infkan(dir.path(), &["sweep", "--grid", "optim.lr="]);
    assert_eq!(o.status.code(), Some(2));
}
