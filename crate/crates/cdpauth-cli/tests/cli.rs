//! End-to-end CLI checks on a reduced configuration, driving the real
//! binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cdpauth"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn tiny_config_toml(out_dir: &Path) -> String {
    format!(
        r#"
seed = 5
output_dir = "{}"

[dataset]
n_templates = 8
image_side = 16

[model]
base_width = 8
depth = 2
time_embed_dim = 16
class_embed_dim = 8
image_side = 16

[train]
epochs = 2
batch_size = 8
warmup_steps = 4

[classify]
n_trials = 3

[eval]
fractions = [0.5, 0.25, 0.25]

[eval.augment]
n_copies = 2
crop_side = 16
"#,
        out_dir.display()
    )
}

struct Workspace {
    dir: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("cdpauth_cli_{tag}"));
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        let config = dir.join("config.toml");
        std::fs::write(&config, tiny_config_toml(&dir)).unwrap();
        Workspace { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn config_arg(&self) -> String {
        self.config.display().to_string()
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        std::fs::remove_dir_all(&self.dir).ok();
    }
}

#[test]
fn synth_is_idempotent() {
    let ws = Workspace::new("synth");
    let out = run(&["synth", "--config", &ws.config_arg()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = ws.path("dataset/manifest.json");
    let first = std::fs::read(&manifest).unwrap();
    let sample = std::fs::read(ws.path("dataset/images/HP55/00000.png")).unwrap();

    let out = run(&["synth", "--config", &ws.config_arg()]);
    assert!(out.status.success());
    assert_eq!(first, std::fs::read(&manifest).unwrap());
    assert_eq!(
        sample,
        std::fs::read(ws.path("dataset/images/HP55/00000.png")).unwrap()
    );
    // Resolved config and fingerprint sit next to the outputs.
    assert!(ws.path("dataset/resolved-config.toml").exists());
    assert!(ws.path("dataset/config-fingerprint.txt").exists());
}

#[test]
fn malformed_config_names_the_field_and_exits_2() {
    let ws = Workspace::new("badcfg");
    std::fs::write(&ws.config, "bogus_field = 1\n").unwrap();
    let out = run(&["synth", "--config", &ws.config_arg()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_field"), "{stderr}");
}

#[test]
fn missing_manifest_exits_3_with_path() {
    let ws = Workspace::new("noman");
    let out = run(&[
        "train",
        "--config",
        &ws.config_arg(),
        "--manifest",
        &ws.arg("nowhere"),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nowhere"), "{stderr}");
}

#[test]
fn full_tiny_pipeline_through_the_binary() {
    let ws = Workspace::new("full");
    assert!(run(&["synth", "--config", &ws.config_arg()]).status.success());
    let manifest = ws.arg("dataset");

    let out = run(&[
        "train",
        "--config",
        &ws.config_arg(),
        "--manifest",
        &manifest,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ws.path("model.ckpt").exists());
    assert!(ws.path("model.loss.json").exists());

    let out = run(&[
        "eval",
        "--config",
        &ws.config_arg(),
        "--manifest",
        &manifest,
        "--checkpoint",
        &ws.arg("model.ckpt"),
        "--kind",
        "main",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report_path = ws.path("eval-main/report.json");
    assert!(report_path.exists());
    assert!(ws.path("eval-main/report.records.jsonl").exists());
    assert!(ws.path("eval-main/report.txt").exists());

    // Identical inputs give identical report bytes.
    let first = std::fs::read(&report_path).unwrap();
    assert!(run(&[
        "eval",
        "--config",
        &ws.config_arg(),
        "--manifest",
        &manifest,
        "--checkpoint",
        &ws.arg("model.ckpt"),
        "--kind",
        "main",
    ])
    .status
    .success());
    assert_eq!(first, std::fs::read(&report_path).unwrap());

    // The report subcommand renders it.
    let out = run(&["report", "--report", &report_path.display().to_string()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("confusion matrix"), "{stdout}");
    assert!(stdout.contains("P_err"), "{stdout}");

    // Unseen-counterfeit evaluation with the 6-class checkpoint: exit 5.
    let out = run(&[
        "eval",
        "--config",
        &ws.config_arg(),
        "--manifest",
        &manifest,
        "--checkpoint",
        &ws.arg("model.ckpt"),
        "--kind",
        "unseen-counterfeit",
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));

    // Single-probe classification against the trained checkpoint.
    let out = run(&[
        "classify",
        "--checkpoint",
        &ws.arg("model.ckpt"),
        "--template",
        &ws.arg("dataset/templates/00000.png"),
        "--probe",
        &ws.arg("dataset/images/HP55/00000.png"),
        "--expected",
        "HP55",
        "--n-trials",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("classify emits JSON");
    assert!(parsed.get("predicted_label").is_some());
    assert!(parsed.get("verdict").is_some());
    assert_eq!(parsed["scores"].as_object().unwrap().len(), 6);
}

#[test]
fn codec_commands_round_trip() {
    let ws = Workspace::new("codec");
    assert!(run(&["synth", "--config", &ws.config_arg()]).status.success());
    // Tiny side-16 dataset: codec defaults target side 32, so this also
    // exercises the config override path through the CLI.
    let out = run(&[
        "train-codec",
        "--config",
        &ws.config_arg(),
        "--manifest",
        &ws.arg("dataset"),
        "--corpus",
        "templates",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ws.path("codec-templates.ckpt").exists());
}
