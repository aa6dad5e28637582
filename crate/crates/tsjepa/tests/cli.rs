//! End-to-end checks of the command-line interface: a run writes its
//! artifacts, re-running the same config reproduces them byte for byte,
//! and `report` aggregates the results.

use std::fs;
use std::path::Path;
use std::process::Command;

fn tsjepa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tsjepa"))
}

fn write_config(dir: &Path, out_dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(
        &path,
        format!(
            r#"
task = "pretrain"
method = "jepa"
seed = 11
out_dir = "{}"

[dataset]
kind = "synthetic-classes"
n_series = 24
n_test = 24
series_length = 60
classes = 2

[patch]
num_patches = 6
embed_dim = 16
conv_channels = 4

[model]
embed_dim = 16
num_heads = 2
num_layers = 1
ffn_dim = 32

[optim]
epochs = 2
batch_size = 8
"#,
            out_dir.display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn run_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let config = write_config(dir.path(), &out_a);

    let status = tsjepa().arg("run").arg(&config).status().unwrap();
    assert!(status.success());
    for artifact in ["config.toml", "results.csv", "trace.csv", "model.ckpt"] {
        assert!(out_a.join(artifact).exists(), "missing artifact {artifact}");
    }

    // Same config, fresh directory: artifacts must be byte-identical.
    let out_b = dir.path().join("b");
    let status = tsjepa()
        .arg("run")
        .arg(&config)
        .arg("--out")
        .arg(&out_b)
        .status()
        .unwrap();
    assert!(status.success());
    for artifact in ["results.csv", "trace.csv", "model.ckpt"] {
        let a = fs::read(out_a.join(artifact)).unwrap();
        let b = fs::read(out_b.join(artifact)).unwrap();
        assert_eq!(a, b, "artifact {artifact} differs between identical runs");
    }

    // A different seed must change the checkpoint.
    let out_c = dir.path().join("c");
    let status = tsjepa()
        .arg("run")
        .arg(&config)
        .arg("--seed")
        .arg("12")
        .arg("--out")
        .arg(&out_c)
        .status()
        .unwrap();
    assert!(status.success());
    assert_ne!(
        fs::read(out_a.join("model.ckpt")).unwrap(),
        fs::read(out_c.join("model.ckpt")).unwrap(),
        "different seeds produced the same checkpoint"
    );

    // The echoed config is itself runnable.
    let out_d = dir.path().join("d");
    let status = tsjepa()
        .arg("run")
        .arg(out_a.join("config.toml"))
        .arg("--out")
        .arg(&out_d)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        fs::read(out_a.join("model.ckpt")).unwrap(),
        fs::read(out_d.join("model.ckpt")).unwrap(),
        "config echo did not reproduce the run"
    );

    // Report aggregates every results.csv under the directory.
    let output = tsjepa().arg("report").arg(dir.path()).output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("synthetic"), "report missing dataset name:\n{text}");
    assert!(text.contains("final_loss"), "report missing metric:\n{text}");
}

#[test]
fn run_rejects_invalid_config_with_remedy() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(
        &config,
        r#"
task = "probe"
method = "jepa"
out_dir = "unused"

[dataset]
kind = "synthetic-classes"
"#,
    )
    .unwrap();
    let output = tsjepa().arg("run").arg(&config).output().unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8(output.stderr).unwrap();
    assert!(err.contains("checkpoint"), "error lacks remedy hint:\n{err}");
}
