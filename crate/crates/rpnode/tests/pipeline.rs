//! End-to-end plumbing checks: the command-line binary from dataset
//! generation through attacked evaluation, and rerun determinism of the
//! experiment driver.

use std::path::Path;
use std::process::Command;

use rpnode::config::RunConfig;
use rpnode::episodes::load_dataset;
use rpnode::metrics::parse_csv;
use rpnode::model::ModelVariant;
use rpnode::train::run_experiment;

const TINY_TOML: &str = r#"
variant = "vanilla_cnn"
seeds = [5]

[encoder]
stage_channels = [4, 8]
downsample_factor = 2

[solver]
steps = 2

[optimizer]
learning_rate = 0.01
decay_every = 0

[episodes]
train_episodes = 12
test_episodes = 4

[synth]
image_size = [16, 16]
train_subjects = 3
val_subjects = 1
test_subjects = 2
slices_per_subject = 4

[[eval.attacks]]
family = "fgsm"
target = "query"
epsilon = 0.02
"#;

fn tiny_config() -> RunConfig {
    RunConfig::from_toml(TINY_TOML).unwrap()
}

fn rpnode_cmd(dir: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rpnode"));
    c.current_dir(dir).env("RPNODE_OUT", dir.join("default_out"));
    c
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn cli_pipeline_from_generation_to_attacked_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("tiny.toml"), TINY_TOML).unwrap();

    run_ok(rpnode_cmd(root).args(["generate-data", "--config", "tiny.toml", "--out", "data"]));
    let dataset = load_dataset(&root.join("data")).unwrap();
    assert_eq!(dataset.train.len(), 3);
    assert_eq!(dataset.test.len(), 2);
    assert!(root.join("data/config.toml").exists());

    run_ok(rpnode_cmd(root).args(["train", "--config", "tiny.toml", "--data", "data", "--out", "run"]));
    assert!(root.join("run/config.toml").exists());
    let ckpt = root.join("run/checkpoint_vanilla_cnn_5.ckpt");
    assert!(ckpt.exists());
    let metrics = std::fs::read_to_string(root.join("run/metrics_vanilla_cnn_5.csv")).unwrap();
    let rows = parse_csv(&metrics).unwrap();
    // One clean row and one attacked row for the single novel class.
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].attack, "none");
    assert_eq!(rows[1].attack, "fgsm");
    assert_eq!(rows[1].eps, 0.02);
    assert!(rows.iter().all(|r| r.organ_class == 3 && r.n_episodes == 4));

    // Evaluation appends to an existing table.
    let ckpt_s = ckpt.to_str().unwrap().to_string();
    for _ in 0..2 {
        run_ok(rpnode_cmd(root).args([
            "evaluate",
            "--checkpoint",
            &ckpt_s,
            "--data",
            "data",
            "--episodes",
            "3",
            "--attack",
            "fgsm",
            "--eps",
            "0.03",
            "--out",
            "eval.csv",
        ]));
    }
    let appended = parse_csv(&std::fs::read_to_string(root.join("eval.csv")).unwrap()).unwrap();
    assert_eq!(appended.len(), 2);
    assert_eq!(appended[0], appended[1]);
    assert_eq!(appended[0].n_episodes, 3);

    run_ok(rpnode_cmd(root).args([
        "attack-eval",
        "--checkpoint",
        &ckpt_s,
        "--data",
        "data",
        "--config",
        "tiny.toml",
        "--episodes",
        "3",
        "--out",
        "sweep.csv",
    ]));
    let sweep = parse_csv(&std::fs::read_to_string(root.join("sweep.csv")).unwrap()).unwrap();
    assert_eq!(sweep.len(), 2);

    run_ok(rpnode_cmd(root).args([
        "export-features",
        "--checkpoint",
        &ckpt_s,
        "--data",
        "data",
        "--episode-seed",
        "4",
        "--out",
        "protos.csv",
    ]));
    let protos = std::fs::read_to_string(root.join("protos.csv")).unwrap();
    let mut lines = protos.lines();
    assert!(lines.next().unwrap().starts_with("class_id,c0,"));
    // Background prototype plus the novel class.
    assert_eq!(lines.clone().count(), 2);
    assert!(lines.any(|l| l.starts_with("3,")));
}

#[test]
fn cli_rejects_a_broken_config_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("bad.toml"), "temperature = -3.0\n").unwrap();
    let out = rpnode_cmd(root)
        .args(["generate-data", "--config", "bad.toml", "--out", "data"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("temperature"), "stderr: {stderr}");
}

#[test]
fn experiment_rerun_writes_identical_bytes() {
    let cfg = tiny_config();
    let dataset = rpnode::episodes::generate_synthetic(&cfg.synth).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_experiment(&cfg, &dataset, &[ModelVariant::VanillaCnn], out).unwrap();
    }
    for name in ["metrics_vanilla_cnn_5.csv", "checkpoint_vanilla_cnn_5.ckpt"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between reruns");
    }
}
