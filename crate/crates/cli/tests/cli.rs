use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lksde::generation::GenerateResponse;
use lksde::training::TrainConfig;
use tempfile::TempDir;

const TINY: &str = r#"
history_steps = 6
horizon = 5
feature_width = 8
hidden = 6
controller_hidden = 6
lane_points = 3
epochs = 2
batch_size = 4
seed = 3
"#;

fn lksde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lksde"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = lksde(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let cfg = self.path("tiny.toml");
        let mut args = vec![
            "gen-data",
            "--out",
            p(&out),
            "--config",
            p(&cfg),
            "--per-family",
            "4",
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }

    fn model(&self) -> PathBuf {
        let data = self.data("train.json", &[]);
        let out = self.path("run");
        let cfg = self.path("tiny.toml");
        ok(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&out),
        ]);
        out.join("best.json")
    }
}

#[test]
fn gen_data_is_seeded() {
    let f = Fixture::new();
    let a = std::fs::read(f.data("a.json", &["--seed", "4"])).unwrap();
    let b = std::fs::read(f.data("b.json", &["--seed", "4"])).unwrap();
    let c = std::fs::read(f.data("c.json", &["--seed", "5"])).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let only =
        lksde::scenario::load_dataset(&f.data("s.json", &["--families", "straight,left-turn"]))
            .unwrap();
    assert_eq!(only.len(), 8);
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let f = Fixture::new();
    let best = f.model();
    let run = best.parent().unwrap();
    for name in [
        "initial.json",
        "checkpoint_epoch_001.json",
        "checkpoint_epoch_002.json",
        "loss_history.csv",
        "config.toml",
    ] {
        assert!(run.join(name).exists(), "{name}");
    }
    // 20 scenarios, 18 after holding out 10%: 5 batches of 4 per epoch.
    let rows = std::fs::read_to_string(run.join("loss_history.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 1 + 2 * 5);

    let again = f.path("again");
    let cfg = f.path("tiny.toml");
    let data = f.path("train.json");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&again),
    ]);
    assert_eq!(
        std::fs::read(&best).unwrap(),
        std::fs::read(again.join("best.json")).unwrap()
    );
}

#[test]
fn print_config_round_trips() {
    let f = Fixture::new();
    let cfg = f.path("tiny.toml");
    let out = ok(&[
        "train",
        "--config",
        p(&cfg),
        "--print-config",
        "--epochs",
        "9",
    ]);
    let printed = TrainConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let expected = TrainConfig {
        epochs: 9,
        ..TrainConfig::from_toml(TINY).unwrap()
    };
    assert_eq!(printed, expected);
}

#[test]
fn constant_velocity_on_noiseless_straight_is_exact() {
    let f = Fixture::new();
    let data = f.data("straight.json", &["--families", "straight", "--noise", "0"]);
    let preds = f.path("preds.json");
    let out = ok(&[
        "predict",
        "--data",
        p(&data),
        "--out",
        p(&preds),
        "--method",
        "constant-velocity",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["ade"].as_f64().unwrap() < 1e-9, "{report}");
    assert!(report["fde"].as_f64().unwrap() < 1e-9, "{report}");

    let metrics = f.path("metrics.json");
    ok(&[
        "eval",
        "--predictions",
        p(&preds),
        "--data",
        p(&data),
        "--out",
        p(&metrics),
    ]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(metrics).unwrap()).unwrap();
    assert_eq!(m["jerk"]["violation_rate"].as_f64(), Some(0.0));
}

#[test]
fn model_commands() {
    let f = Fixture::new();
    let model = f.model();
    let data = f.data("straight.json", &["--families", "straight", "--noise", "0"]);

    let preds = f.path("preds.json");
    ok(&[
        "predict",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--out",
        p(&preds),
    ]);
    let file: serde_json::Value = serde_json::from_slice(&std::fs::read(&preds).unwrap()).unwrap();
    assert_eq!(file["predictions"].as_array().unwrap().len(), 4);

    let metrics = f.path("eval.json");
    ok(&[
        "eval",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--out",
        p(&metrics),
        "--bins",
        "10",
    ]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(metrics).unwrap()).unwrap();
    assert_eq!(m["ground_truth_jerk"]["violation_rate"].as_f64(), Some(0.0));
    assert_eq!(m["scenarios"].as_u64(), Some(4));

    let sweep = f.path("sweep");
    ok(&[
        "sweep",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--component",
        "psi",
        "--range",
        "-1:1:5",
        "--out",
        p(&sweep),
    ]);
    let s: serde_json::Value =
        serde_json::from_slice(&std::fs::read(sweep.join("sweep.json")).unwrap()).unwrap();
    let fans = s["fans"].as_array().unwrap();
    assert_eq!(fans.len(), 4);
    assert!(fans
        .iter()
        .all(|fan| fan["trajectories"].as_array().unwrap().len() == 5));
    for csv in [
        "jerk_histogram.csv",
        "u2_histogram.csv",
        "beta_histogram.csv",
    ] {
        assert!(std::fs::read_to_string(sweep.join(csv))
            .unwrap()
            .starts_with("bin_left,bin_right,count"));
    }

    let gen = |name: &str, extra: &[&str]| -> GenerateResponse {
        let out = f.path(name);
        let mut args = vec![
            "generate",
            "--model",
            p(&model),
            "--data",
            p(&data),
            "--out",
            p(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap()
    };
    let a = gen(
        "a.json",
        &[
            "--seed",
            "4",
            "--samples",
            "2",
            "--set",
            "psi=0.3",
            "--set",
            "sem1=-0.5",
        ],
    );
    let b = gen(
        "b.json",
        &[
            "--seed",
            "4",
            "--samples",
            "2",
            "--set",
            "psi=0.3",
            "--set",
            "sem1=-0.5",
        ],
    );
    assert_eq!(a, b);
    assert_eq!(a.trajectories.len(), 2);

    // The request-file path uses the same body as POST /generate.
    let req = f.path("req.json");
    std::fs::write(
        &req,
        format!(
            r#"{{"scenario_id": "{}", "noise_seed": 4, "num_samples": 2,
                "latent_overrides": {{"z0": [null, null, null, 0.3], "sem": [null, -0.5, null, null]}}}}"#,
            a.scenario_id
        ),
    )
    .unwrap();
    assert_eq!(gen("c.json", &["--request", p(&req)]), a);
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    assert_eq!(lksde(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lksde(&["predict", "--bogus"]).status.code(), Some(1));
    assert_eq!(lksde(&["--help"]).status.code(), Some(0));

    let missing = f.path("missing.json");
    let out = lksde(&[
        "predict",
        "--method",
        "constant-velocity",
        "--data",
        p(&missing),
        "--out",
        p(&f.path("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let bad = f.path("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "scenarios": [{"id": "x"}]}"#).unwrap();
    let out = lksde(&[
        "predict",
        "--method",
        "constant-velocity",
        "--data",
        p(&bad),
        "--out",
        p(&f.path("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let model = f.model();
    let data = f.path("train.json");
    let sweep = |range: &str, component: &str| {
        lksde(&[
            "sweep",
            "--model",
            p(&model),
            "--data",
            p(&data),
            "--component",
            component,
            "--range",
            range,
            "--out",
            p(&f.path("s")),
        ])
        .status
        .code()
    };
    assert_eq!(sweep("1:2", "psi"), Some(1));
    assert_eq!(sweep("-1:1:3", "yaw"), Some(1));

    let out = lksde(&[
        "generate",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--scenario",
        "nope",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
