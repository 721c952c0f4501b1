//! End-to-end tests of the compiled binary: argument handling, file
//! outputs, environment overrides, and determinism across worker counts.

use std::path::Path;
use std::process::{Command, Output};

use afcp::cli::{ColumnRoles, RunConfig, SourceConfig};
use afcp::evalharness::{ExperimentConfig, Method};
use afcp::model::MlpConfig;

fn afcp_bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_afcp"));
    cmd.env_remove("AFCP_SEED").env_remove("AFCP_OUT");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_config() -> RunConfig {
    RunConfig {
        experiment: ExperimentConfig {
            methods: vec![Method::Marginal, Method::Afcp],
            sample_sizes: vec![60],
            n_test: 20,
            n_reps: 2,
            model: MlpConfig {
                hidden_layers: vec![8],
                learning_rate: 0.05,
                epochs: 8,
                seed: 0,
            },
            seed: 5,
            ..ExperimentConfig::default()
        },
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn run_writes_tables_identically_for_any_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config());

    let mut outputs = Vec::new();
    for (jobs, sub) in [("1", "a"), ("3", "b")] {
        let out_dir = dir.path().join(sub);
        run_ok(afcp_bin().args([
            "run",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--jobs",
            jobs,
        ]));
        let csv = std::fs::read(out_dir.join("results.csv")).unwrap();
        assert!(!csv.is_empty());
        assert!(out_dir.join("results.md").exists());
        outputs.push(csv);
    }
    assert_eq!(outputs[0], outputs[1], "tables differ across --jobs");

    let header = String::from_utf8(outputs[0].clone()).unwrap();
    assert!(header.starts_with("method,sample_size,attribute,level,metric,value,se\n"));
}

#[test]
fn run_without_config_fails_with_a_diagnostic() {
    let out = afcp_bin().arg("run").output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--config"), "stderr was: {stderr}");
}

#[test]
fn unknown_subcommand_exits_nonzero() {
    let out = afcp_bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn gen_respects_the_seed_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (sub, seed) in [("a", "42"), ("b", "42"), ("c", "43")] {
        let out_dir = dir.path().join(sub);
        run_ok(
            afcp_bin()
                .args(["gen", "--generator", "medical", "--n", "30"])
                .env("AFCP_SEED", seed)
                .env("AFCP_OUT", out_dir.to_str().unwrap()),
        );
        bytes.push(std::fs::read(out_dir.join("synthetic_medical.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1], "same seed must give identical files");
    assert_ne!(bytes[0], bytes[2], "different seeds should differ");
}

#[test]
fn predict_emits_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(afcp_bin().args([
        "gen",
        "--generator",
        "medical",
        "--n",
        "80",
        "--seed",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]));
    let data_path = dir.path().join("synthetic_medical.csv");
    let roles: ColumnRoles = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("synthetic_medical.roles.json")).unwrap(),
    )
    .unwrap();

    let mut cfg = tiny_config();
    cfg.roles = Some(roles);
    let cfg_path = write_config(dir.path(), &cfg);

    let out = run_ok(afcp_bin().args([
        "predict",
        "--calib",
        data_path.to_str().unwrap(),
        "--test",
        data_path.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "1",
    ]));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 80 * 2, "one line per record and method");
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).expect("valid JSON line");
        assert!(v["row"].is_number());
        let set = v["set"].as_array().unwrap();
        assert!(set.len() <= 6);
        for name in v["selected"].as_array().unwrap() {
            let name = name.as_str().unwrap();
            assert!(["Color", "Age Group", "Region"].contains(&name), "{name}");
        }
    }
}

#[test]
fn run_with_csv_source_and_preprocessing() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(afcp_bin().args([
        "gen",
        "--generator",
        "medical",
        "--n",
        "120",
        "--seed",
        "8",
        "--out",
        dir.path().to_str().unwrap(),
    ]));
    let roles: ColumnRoles = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("synthetic_medical.roles.json")).unwrap(),
    )
    .unwrap();
    let mut cfg = tiny_config();
    cfg.source = SourceConfig::Csv {
        path: dir.path().join("synthetic_medical.csv"),
        roles,
    };
    cfg.experiment.sample_sizes = vec![60];
    cfg.experiment.n_test = 30;
    cfg.experiment.preprocess = vec![afcp::evalharness::PreprocessStep::Downsample {
        attribute: "Color".into(),
        level: "Grey".into(),
        fraction: 0.8,
    }];
    let cfg_path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("results");
    run_ok(afcp_bin().args([
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let table = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert!(table.contains("afcp"));
    assert!(table.contains("coverage"));
}
