//! End-to-end tests of the `exolam` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exolam::config::{derived_seed, SeedPurpose};
use exolam_core::container::Container;
use exolam_core::exbmdp::{generate_from_seed, LinearEnvConfig};
use exolam_core::linear_lam::{LinearTrainConfig, TrainState};

const TINY_ENV: &str = r#""env": {"d_s": 4, "d_a": 4, "d_o": 16, "n_xi": 4, "n_traj": 60, "traj_len": 8, "alpha": 0.5}"#;
const TINY_EVAL: &str = r#""eval": {"heldout_traj": 30, "probe_rows": 150, "anchors": 16, "draws": 4}"#;

fn exolam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exolam")).args(args).env_remove("EXOLAM_SEED").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn tiny_linear(extra: &str) -> String {
    format!(r#"{{"experiment": "linear", {TINY_ENV}, {TINY_EVAL}, "model": {{"d_z": 2, "steps": 40, "batch_size": 16{extra}}}, "seeds": [0, 1]}}"#)
}

#[test]
fn gen_is_byte_identical_and_reports_zero_noise_without_switching() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny_linear(""));
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    let o1 = exolam(&["gen", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    let o2 = exolam(&["gen", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o1.status.success(), "{}", stderr(&o1));
    assert!(o2.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let line = stdout(&o1).lines().find(|l| l.starts_with("mean |eps|^2")).unwrap().to_string();
    assert!(line.ends_with(" 0.000000"), "{line}");

    let c = dir.path().join("c.bin");
    let o3 = exolam(&["gen", "--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap(), "--seed", "5"]);
    assert!(o3.status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn seed_flag_beats_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny_linear(""));
    let run = |env: Option<&str>, flag: Option<&str>, out: &str| {
        let out = dir.path().join(out);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_exolam"));
        cmd.args(["gen", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).env_remove("EXOLAM_SEED");
        if let Some(e) = env {
            cmd.env("EXOLAM_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(out).unwrap()
    };
    let env7 = run(Some("7"), None, "e.bin");
    let flag7 = run(None, Some("7"), "f.bin");
    let both = run(Some("3"), Some("7"), "b.bin");
    let none = run(None, None, "n.bin");
    assert_eq!(env7, flag7);
    assert_eq!(both, flag7);
    assert_ne!(none, flag7);
}

#[test]
fn schema_errors_exit_one_with_a_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", r#"{"experiment": "linear", "env": {"n_xi": 1, "p_switch": 0.3}}"#);
    let o = exolam(&["gen", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/env"), "{}", stderr(&o));
    let cfg = write(dir.path(), "typo.json", r#"{"experiment": "linear", "model": {"stepz": 3}}"#);
    let o = exolam(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/model/stepz"), "{}", stderr(&o));
    let o = exolam(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_linear("").replace(r#""steps": 40"#, r#""steps": 0"#);
    let cfg = write(dir.path(), "c.json", &text);
    let store = dir.path().join("store");
    let o = exolam(&["train", "--config", cfg.to_str().unwrap(), "--out", store.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let parsed = exolam::ExperimentConfig::load(&cfg).unwrap();
    let exolam::ExperimentConfig::Linear(e) = &parsed else { panic!() };
    let env = LinearEnvConfig { seed: derived_seed(0, 0, SeedPurpose::Env), ..e.env.clone() };
    let batch = generate_from_seed(&env).unwrap();
    let tcfg = LinearTrainConfig { seed: derived_seed(0, 0, SeedPurpose::Train), ..e.model.clone() };
    let init = TrainState::init(&tcfg, &batch).unwrap();
    let ck = Container::load(&store.join("checkpoints").join(format!("{}-0.bin", parsed.hash()))).unwrap();
    let (loaded, _) = TrainState::from_container(&ck).unwrap();
    assert_eq!(loaded.params, init.params);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = write(dir.path(), "full.json", &tiny_linear(""));
    let half = write(dir.path(), "half.json", &tiny_linear("").replace(r#""steps": 40"#, r#""steps": 20"#));
    let s_full = dir.path().join("full");
    let s_half = dir.path().join("half");
    let s_resumed = dir.path().join("resumed");
    assert!(exolam(&["train", "--config", full.to_str().unwrap(), "--out", s_full.to_str().unwrap()]).status.success());
    assert!(exolam(&["train", "--config", half.to_str().unwrap(), "--out", s_half.to_str().unwrap()]).status.success());
    let h_half = exolam::ExperimentConfig::load(&half).unwrap().hash();
    let h_full = exolam::ExperimentConfig::load(&full).unwrap().hash();
    let mid = s_half.join("checkpoints").join(format!("{h_half}-0.bin"));
    let one_seed = write(dir.path(), "one.json", &tiny_linear("").replace(r#""seeds": [0, 1]"#, r#""seeds": [0]"#));
    let o = exolam(&["train", "--config", one_seed.to_str().unwrap(), "--out", s_resumed.to_str().unwrap(), "--resume", mid.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let h_one = exolam::ExperimentConfig::load(&one_seed).unwrap().hash();
    let a = Container::load(&s_full.join("checkpoints").join(format!("{h_full}-0.bin"))).unwrap();
    let b = Container::load(&s_resumed.join("checkpoints").join(format!("{h_one}-0.bin"))).unwrap();
    let (ta, _) = TrainState::from_container(&a).unwrap();
    let (tb, _) = TrainState::from_container(&b).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn training_divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny_linear(r#", "lr": 1e300"#));
    let o = exolam(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(stdout(&o).contains("non-finite"), "{}", stdout(&o));
}

fn sweep_spec(dir: &Path) -> PathBuf {
    let base = tiny_linear("").replace(r#""seeds": [0, 1]"#, r#""seeds": [0, 1, 2, 3]"#);
    write(
        dir,
        "p_sweep.json",
        &format!(r#"{{"base": {base}, "axes": [{{"path": "env.p_switch", "values": [0.0, 0.1, 0.2, 0.3]}}]}}"#),
    )
}

#[test]
fn sweep_row_counts_and_order_independence() {
    let dir = tempfile::tempdir().unwrap();
    let spec = sweep_spec(dir.path());
    let mut aggregates = Vec::new();
    for (k, jobs) in ["1", "4", "1"].iter().enumerate() {
        let store = dir.path().join(format!("s{k}"));
        let o = exolam(&["sweep", "--config", spec.to_str().unwrap(), "--out", store.to_str().unwrap(), "--jobs", jobs, "--quiet"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("= 16 runs"), "{}", stdout(&o));
        let runs = std::fs::read_to_string(store.join("sweeps/p_sweep/runs.csv")).unwrap();
        let agg = std::fs::read_to_string(store.join("sweeps/p_sweep/aggregate.csv")).unwrap();
        assert_eq!(runs.lines().count(), 1 + 16);
        assert_eq!(agg.lines().count(), 1 + 4);
        aggregates.push(agg);
    }
    assert_eq!(aggregates[0], aggregates[1], "parallelism changed the aggregate");
    assert_eq!(aggregates[0], aggregates[2], "rerun changed the aggregate");

    let store = dir.path().join("s_other");
    assert!(exolam(&["sweep", "--config", spec.to_str().unwrap(), "--out", store.to_str().unwrap(), "--seed", "11", "--quiet"]).status.success());
    assert_ne!(std::fs::read_to_string(store.join("sweeps/p_sweep/aggregate.csv")).unwrap(), aggregates[0]);
}

#[test]
fn failed_sweep_jobs_are_recorded_and_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_linear("");
    let spec = write(
        dir.path(),
        "lr.json",
        &format!(r#"{{"base": {base}, "axes": [{{"path": "model.lr", "values": [0.001, 1e300], "labels": ["ok", "huge"]}}]}}"#),
    );
    let store = dir.path().join("s");
    let o = exolam(&["sweep", "--config", spec.to_str().unwrap(), "--out", store.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(2));
    let runs = std::fs::read_to_string(store.join("sweeps/lr/runs.csv")).unwrap();
    assert_eq!(runs.lines().filter(|l| l.contains(",failed,")).count(), 2, "{runs}");
    assert_eq!(runs.lines().filter(|l| l.contains(",ok,")).count(), 2, "{runs}");
}

#[test]
fn report_needs_coverage_then_writes_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let o = exolam(&["report", "--store", store.to_str().unwrap(), "--figure", "fig2c"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing data"), "{}", stderr(&o));

    let spec = sweep_spec(dir.path());
    assert!(exolam(&["sweep", "--config", spec.to_str().unwrap(), "--out", store.to_str().unwrap(), "--quiet"]).status.success());
    let o = exolam(&["report", "--store", store.to_str().unwrap(), "--figure", "fig2c"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("p_switch, 0.4") && err.contains("p_switch, 0.5") && !err.contains("p_switch, 0.3"), "{err}");

    let base = tiny_linear("").replace(r#""seeds": [0, 1]"#, r#""seeds": [0, 1, 2, 3]"#);
    let rest = write(dir.path(), "rest.json", &format!(r#"{{"base": {base}, "axes": [{{"path": "env.p_switch", "values": [0.4, 0.5]}}]}}"#));
    assert!(exolam(&["sweep", "--config", rest.to_str().unwrap(), "--out", store.to_str().unwrap(), "--quiet"]).status.success());
    let o = exolam(&["report", "--store", store.to_str().unwrap(), "--figure", "fig2c"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(store.join("reports/fig2c.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "series,x,metric,n,mean,stderr");
    assert_eq!(csv.lines().count(), 1 + 12);
    let svg = std::fs::read_to_string(store.join("reports/fig2c.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 2);

    let o = exolam(&["report", "--store", store.to_str().unwrap(), "--figure", "fig9"]);
    assert_eq!(o.status.code(), Some(1));
}

fn verify_config(alpha: f64) -> String {
    format!(
        r#"{{"experiment": "linear",
            "env": {{"d_s": 4, "d_a": 4, "d_o": 16, "n_xi": 4, "n_traj": 200, "traj_len": 8, "alpha": {alpha}, "p_switch": 0.3}},
            "model": {{"d_z": 2}},
            "verify": {{"prop1": {{"d_z": 2, "lr": 0.01, "max_steps": 20000, "window": 200, "rel_tol": 1e-7, "restarts": 2, "seed": 0}},
                        "prop1_grid": [0.0, 0.3],
                        "prop2": {{"samples": 5000, "seeds": [0, 1]}},
                        "prop3_draws": 20, "prop3_rows": 500, "prop3_train_steps": 200}},
            "seeds": [0, 1]}}"#
    )
}

#[test]
fn verify_passes_and_writes_a_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "v.json", &verify_config(0.5));
    let json = dir.path().join("bundle.json");
    let o = exolam(&["verify", "--config", cfg.to_str().unwrap(), "--out", json.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}\n{}", stdout(&o), stderr(&o));
    let bundle: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let ids: Vec<&str> = bundle["reports"].as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap()).collect();
    for id in ["noise_decomposition", "prop1", "prop1_monotone", "prop2", "cca_spectrum", "prop3", "eta_zero_for_actions"] {
        assert!(ids.contains(&id), "{id} missing from {ids:?}");
    }
    assert!(stdout(&o).contains("overall: PASS"));
}

#[test]
fn verify_flags_degenerate_checks_without_exogenous_effect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "v.json", &verify_config(0.0));
    let json = dir.path().join("bundle.json");
    let o = exolam(&["verify", "--config", cfg.to_str().unwrap(), "--out", json.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}\n{}", stdout(&o), stderr(&o));
    let bundle: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    for r in bundle["reports"].as_array().unwrap() {
        let id = r["id"].as_str().unwrap();
        if matches!(id, "noise_decomposition" | "prop3") || (id == "prop1" && r["inputs"]["p_switch"] != 0.0) {
            assert_eq!(r["status"], "degenerate", "{r}");
        }
    }
}
