use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn predcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_predcorr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = predcorr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Tiny networks and data so a whole pipeline runs in seconds.
const TINY: &[&str] = &[
    "--system", "fhn", "--trajectories", "12", "--timesteps", "30",
    "--set", "predictor_train_horizon=10", "--set", "node.width=8", "--set", "node.depth=1",
    "--predictor-epochs", "3", "--set", "predictor_training.batch_size=4",
    "--set", "hidden=3", "--set", "init=FC(8)_1", "--set", "field=FC(8)_1", "--decoder", "FC(8)_1",
    "--train-horizon", "12", "--corrector-epochs", "3", "--set", "corrector_training.batch_size=4",
    "--set", "interpolation_cutoff=10", "--kappa", "0.8",
];

fn with_output<'a>(cmd: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(TINY);
    v.extend_from_slice(&["--output", out]);
    v.extend_from_slice(extra);
    v
}

fn numeric_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            (name.ends_with(".csv") && !name.contains("timing")) || name == "predictor.json" || name == "corrector.json"
        })
        .map(|p| (p.file_name().unwrap().to_string_lossy().to_string(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn lists_presets() {
    let out = ok(&["presets"]);
    for name in ["fhn-100", "lorenz-20", "linear2-0", "weather-336", "desk"] {
        assert!(out.lines().any(|l| l == name), "{name} missing");
    }
}

#[test]
fn generate_fhn_matches_reference_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&["generate", "--system", "fhn", "--output", out.to_str().unwrap()]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), 350);
    assert_eq!(manifest["dim"], 2);
    assert_eq!(manifest["dt"], 0.5);
    assert_eq!(manifest["timesteps"], 400);
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["generate", "--system", "linear2", "--trajectories", "6", "--seed", "4", "--output", out.to_str().unwrap()]);
    }
    let first = fs::read_to_string(a.join("data/traj_00000.csv")).unwrap();
    assert_eq!(first.lines().next().unwrap().split(',').count(), 3, "time plus two states");
    assert_eq!(numeric_outputs(&a.join("data")), numeric_outputs(&b.join("data")));
}

#[test]
fn invalid_configs_exit_2_with_field_names() {
    let cases: &[(&[&str], &str)] = &[
        (&["train-corrector", "--kappa", "0"], "kappa"),
        (&["evaluate", "--set", "colour=3"], "colour"),
        (&["generate", "--preset", "fhn-30"], "preset"),
        (&["ablate", "--system", "fhn", "--sweep", "colour"], "sweep"),
        (&["train-predictor", "--predictor", "rnn", "--observed-fraction", "0.5"], "observed_fraction"),
    ];
    for (args, field) in cases {
        let out = predcorr(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(field), "{args:?}: {err}");
    }
}

#[test]
fn refuses_training_horizon_beyond_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = predcorr(&[
        "train-predictor", "--system", "fhn", "--trajectories", "5", "--timesteps", "20",
        "--output", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("predictor_train_horizon"));
}

#[test]
fn solver_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let mut args = with_output("train-predictor", out_dir, &[]);
    args.extend_from_slice(&["--set", "node.solver.max_steps=1"]);
    let out = predcorr(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut snapshots = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = out.to_str().unwrap();
        ok(&with_output("train-predictor", o, &[]));
        ok(&with_output("train-corrector", o, &[]));
        let report = ok(&with_output("evaluate", o, &["--stress", "25"]));
        assert!(report.contains("reduction"), "{report}");
        ok(&with_output("ablate", o, &["--sweep", "kappa", "0.5:1.0:0.5"]));
        for f in ["predictor.json", "corrector.json", "report.csv", "stress.csv", "stress.svg", "ablate.csv", "pareto.csv", "predictor_timing.csv"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        let log = fs::read_to_string(out.join("corrector_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 1 + 3, "one NFE row per epoch");
        let ablate = fs::read_to_string(out.join("ablate.csv")).unwrap();
        assert_eq!(ablate.lines().count(), 3);
        snapshots.push(numeric_outputs(&out));
    }
    assert_eq!(snapshots[0], snapshots[1]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["kappa"], 0.8, "report echoes the resolved config");
}

#[test]
fn config_file_layers_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("cfg.json");
    fs::write(&file, r#"{"presets": ["fhn-100"], "eta": 5, "train_horizon": 12}"#).unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train-predictor", "--config", file.to_str().unwrap()];
    args.extend_from_slice(&TINY[2..]);
    args.extend_from_slice(&["--output", out.to_str().unwrap(), "--eta", "3"]);
    ok(&args);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["eta"], 3);
    assert_eq!(cfg["kappa"], 0.8);
    assert_eq!(cfg["presets"][0], "fhn-100");
    assert_eq!(cfg["system"], "fhn");
}
