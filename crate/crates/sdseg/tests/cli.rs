//! End-to-end checks of the `sdseg` binary: exit codes, the run-directory
//! lock, and a miniature generate/train/evaluate/plot pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn sdseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn sdseg_in(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sdseg"));
    cmd.current_dir(dir).args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_CONFIG: &str = r#"
[data]
depth = 4
height = 16
width = 16
num_classes = 3
num_source_samples = 10
num_target_samples = 2
target_presets = ["bright"]
seed = 5

[model]
base_channels = 4
depth = 2
x_channels = 8
delta_dim = 4
num_classes = 3

[training]
epochs = 2
learning_rate = 1e-3
batch_size = 4
seed = 1

[evaluation]
ablation_seeds = [1]
"#;

#[test]
fn help_exits_zero_with_usage() {
    let out = sdseg(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for sub in ["generate-data", "train", "evaluate", "ablate", "report-plots", "selftest"] {
        assert!(text.contains(sub), "help must list `{sub}`");
    }
}

#[test]
fn unknown_subcommand_exits_one() {
    let out = sdseg(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "usage text goes to stderr");
}

#[test]
fn missing_required_flag_exits_one() {
    let out = sdseg(&["train"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_exits_two_and_names_path() {
    let out = sdseg(&[
        "train",
        "--config",
        "/no/such/config.toml",
        "--data",
        "/tmp",
        "--out",
        "/tmp/never_created",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/no/such/config.toml"));
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[training]\nlerning_rate = 0.1\n").unwrap();
    let out = sdseg(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        "/tmp",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn locked_run_dir_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "held\n").unwrap();
    let out = sdseg(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        dir.path().join("nodata").to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("locked"));
}

#[test]
fn selftest_reports_all_green() {
    let out = sdseg(&["selftest"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("metric oracle"));
    assert!(text.contains("group law"));
    assert!(text.contains("all checks passed"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("cfg.toml"), TINY_CONFIG).unwrap();

    let out = sdseg_in(root, &["generate-data", "--config", "cfg.toml", "--out", "data"], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(root.join("data/manifest.toml").exists());

    let out = sdseg_in(
        root,
        &["train", "--config", "cfg.toml", "--data", "data", "--out", "run"],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(root.join("run/ckpt/best").exists());
    assert!(root.join("run/run_config.snapshot").exists());
    assert!(!root.join("run/.lock").exists(), "lock removed on completion");

    // Data root can come from the environment instead of --data.
    let out = sdseg_in(
        root,
        &["evaluate", "--ckpt", "run/ckpt/best", "--out", "run/report"],
        &[("SDSEG_DATA_ROOT", "data")],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(root.join("run/report.csv")).unwrap();
    assert!(csv.starts_with("domain_id,"));
    assert!(std::fs::read_to_string(root.join("run/report.txt"))
        .unwrap()
        .contains("target average"));

    // Same checkpoint, second evaluation: identical bytes.
    let out = sdseg_in(
        root,
        &["evaluate", "--ckpt", "run/ckpt/best", "--data", "data", "--out", "run/report2"],
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(csv, std::fs::read_to_string(root.join("run/report2.csv")).unwrap());

    let plot_args = [
        "report-plots",
        "--report",
        "run/report.csv",
        "--ckpt",
        "run/ckpt/best",
        "--data",
        "data",
        "--out",
    ];
    let out = sdseg_in(root, &[&plot_args[..], &["plots"]].concat(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(root.join("plots/dice_by_domain.svg").exists());
    assert!(root.join("plots/triptych_source.png").exists());
    assert!(root.join("plots/triptych_bright.png").exists());

    let out = sdseg_in(root, &[&plot_args[..], &["plots2"]].concat(), &[]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        std::fs::read(root.join("plots/dice_by_domain.svg")).unwrap(),
        std::fs::read(root.join("plots2/dice_by_domain.svg")).unwrap(),
        "vector plot bytes are deterministic"
    );

    // Ablation flag reaches the training config.
    let out = sdseg_in(
        root,
        &[
            "train",
            "--config",
            "cfg.toml",
            "--data",
            "data",
            "--out",
            "run_wo_de",
            "--ablate",
            "domain-encoder",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let snap = std::fs::read_to_string(root.join("run_wo_de/config.snapshot")).unwrap();
    assert!(snap.contains("disable_domain_encoder = true"));
}
