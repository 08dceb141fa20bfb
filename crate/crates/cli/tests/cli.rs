use std::path::Path;
use std::process::{Command, Output};

/// Small enough that the whole pipeline runs in a few seconds.
const TINY: &[&str] = &[
    "model.n_layers=1",
    "model.n_heads=2",
    "model.d_model=16",
    "train.steps=5",
    "train.batch=4",
    "sense.pairs=3",
    "sense.k=2",
    "bank.n_samples=6",
    "bank.clusters=2",
    "select.episodes=3",
    "select.samples=2",
    "select.reward_batch=2",
    "eval.max_new_tokens=3",
];

fn stv(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stv"));
    cmd.arg("--out").arg(out);
    for s in TINY {
        cmd.args(["--set", s]);
    }
    cmd.args(args);
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pipeline(out: &Path) {
    for stage in ["train", "sense", "bank", "select", "eval"] {
        let o = stv(out, &[stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
}

#[test]
fn config_prints_effective_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = stv(dir.path(), &["--set", "sense.k=1", "config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let parsed: toml::Table = text.parse().unwrap();
    assert_eq!(parsed["sense"]["k"].as_integer(), Some(1));
    assert_eq!(parsed["model"]["d_model"].as_integer(), Some(16));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = stv(dir.path(), &["--set", "sense.bogus=1", "config"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = stv(dir.path(), &["--set", "sense.k=0", "config"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = stv(
        dir.path(),
        &[
            "--set",
            "ablate.k=[1,2]",
            "--set",
            "ablate.clusters=[1,2]",
            "ablate",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_upstream_exits_3_naming_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = stv(dir.path(), &["sense"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stv train"), "{}", stderr(&o));

    assert!(stv(dir.path(), &["train"]).status.success());
    let o = stv(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stv select"), "{}", stderr(&o));
}

#[test]
fn pipeline_writes_manifests_and_is_write_once() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    for (stage, files) in [
        ("train", &["checkpoint.bin", "losses.csv"][..]),
        ("sense", &["heatmap.csv", "locations.json"]),
        ("bank", &["bank.bin"]),
        ("select", &["plan.bin", "rewards.csv"]),
        ("eval", &["report.json", "summary.csv"]),
    ] {
        let d = dir.path().join(stage);
        for f in files.iter().chain(&["manifest.json", "config.toml"]) {
            assert!(d.join(f).is_file(), "{stage}/{f} missing");
        }
        let m: serde_json::Value =
            serde_json::from_slice(&std::fs::read(d.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["stage"], stage);
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    }
    let eval_manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("eval/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(eval_manifest["inputs"].as_array().unwrap().len(), 2);

    let o = stv(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stv(dir.path(), &["--force", "eval"]).status.success());
}

#[test]
fn fixed_seed_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "train/checkpoint.bin",
        "sense/heatmap.csv",
        "bank/bank.bin",
        "select/plan.bin",
        "eval/report.json",
        "eval/summary.csv",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    for stage in ["train", "sense", "bank", "select", "eval"] {
        assert!(stv(b.path(), &["--threads", "2", stage]).status.success());
    }
    assert_eq!(
        std::fs::read(a.path().join("eval/report.json")).unwrap(),
        std::fs::read(b.path().join("eval/report.json")).unwrap()
    );
}

#[test]
fn accounting_reports_fixed_and_linear_counts() {
    let dir = tempfile::tempdir().unwrap();
    let run = |r: &str| {
        let o = stv(dir.path(), &["accounting", "--candidates", r]);
        assert!(o.status.success(), "{}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    let (ten, twenty) = (run("10"), run("20"));
    assert!(ten.contains("pairs=3 stv_passes=6"), "{ten}");
    assert!(twenty.contains("pairs=3 stv_passes=6"));
    assert!(ten.contains("random_search_passes=20"), "{ten}");
    assert!(twenty.contains("random_search_passes=40"), "{twenty}");
}
