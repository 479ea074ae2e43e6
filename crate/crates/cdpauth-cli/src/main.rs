//! Command-line front end: dataset synthesis, training, classification,
//! evaluation, and report rendering, all driven by a TOML config with a
//! single root seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cdpauth::classify::authenticate;
use cdpauth::codec::{generic_corpus, train_codec, CodecConfig, CodecHyperparams, CorpusTag};
use cdpauth::config::RunConfig;
use cdpauth::denoiser::{score_classes, DenoiserCheckpoint, IdentityMode};
use cdpauth::error::Error;
use cdpauth::eval::experiment::{render_report, ExperimentKind, MetricsReport};
use cdpauth::eval::Partition;
use cdpauth::pipeline;
use cdpauth::rng;
use cdpauth::synthcdp::Dataset;

#[derive(Parser)]
#[command(
    name = "cdpauth",
    about = "Diffusion-classifier authentication of Copy Detection Patterns on synthetic printer channels"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusArg {
    Templates,
    Generic,
}

#[derive(Clone, Copy, ValueEnum)]
enum IdentityArg {
    Index,
    Structured,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the synthetic dataset and write it with its manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: <output_dir>/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the denoiser on an existing dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint path (default: <output_dir>/model.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the identity mode (ablation convenience).
        #[arg(long)]
        identity_mode: Option<IdentityArg>,
    },
    /// Train the template/generic autoencoder study codec.
    TrainCodec {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        corpus: CorpusArg,
        /// Checkpoint path (default: <output_dir>/codec-<corpus>.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify a single probe image against a checkpoint's classes.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Template PNG (the ideal-print rendering).
        #[arg(long)]
        template: PathBuf,
        /// Probe PNG.
        #[arg(long)]
        probe: PathBuf,
        /// Expected printer label; adds an authentication verdict.
        #[arg(long)]
        expected: Option<String>,
        #[arg(long, default_value_t = 50)]
        n_trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an experiment and write its report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kind: String,
        /// Second checkpoint (index identity mode) for ablation-identity.
        #[arg(long)]
        index_checkpoint: Option<PathBuf>,
        /// Output directory (default: <output_dir>/eval-<kind>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretty-print a stored report.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::InvalidConfiguration(_)
        | Error::DegenerateInput(_)
        | Error::InsufficientData(_)
        | Error::Format { .. } => 2,
        Error::Io { .. } => 3,
        Error::TrainingDiverged(_) => 4,
        Error::Incompatible(_) => 5,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Synth { config, out } => {
            let config = RunConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| pipeline::default_manifest_dir(&config));
            let dataset = pipeline::cmd_synth(&config, &dir)?;
            println!(
                "wrote {} samples over {} classes to {}",
                dataset.manifest.samples.len(),
                dataset.manifest.classes.len(),
                dir.display()
            );
            Ok(())
        }
        Cmd::Train {
            config,
            manifest,
            out,
            identity_mode,
        } => {
            let config = RunConfig::load(&config)?;
            let dataset = Dataset::load_from_dir(&manifest)?;
            let mode = identity_mode.map(|m| match m {
                IdentityArg::Index => IdentityMode::Index,
                IdentityArg::Structured => IdentityMode::Structured,
            });
            let ckpt = pipeline::train_model(&config, &dataset, mode)?;
            let path =
                out.unwrap_or_else(|| PathBuf::from(&config.output_dir).join("model.ckpt"));
            ckpt.save(&path)?;
            write_loss_curve(&ckpt, &path)?;
            pipeline::write_resolved_config(&config, path.parent().unwrap_or(Path::new(".")))?;
            println!(
                "checkpoint at {} (val loss {:.4} -> {:.4} over {} steps)",
                path.display(),
                ckpt.meta.train_report.val_loss_init,
                ckpt.meta.train_report.val_loss_final,
                ckpt.meta.train_report.steps
            );
            Ok(())
        }
        Cmd::TrainCodec {
            config,
            manifest,
            corpus,
            out,
        } => {
            let config = RunConfig::load(&config)?;
            let dataset = Dataset::load_from_dir(&manifest)?;
            let split = pipeline::split_of(&config, &dataset)?;
            let side = dataset.manifest.image_side;
            let train_templates: Vec<_> = dataset
                .templates
                .iter()
                .filter(|t| split.partition_of(t.template_id) == Some(Partition::Train))
                .map(|t| t.to_ideal_print())
                .collect();
            let (tag, corpus_images, name) = match corpus {
                CorpusArg::Templates => (CorpusTag::Templates, train_templates, "templates"),
                CorpusArg::Generic => (
                    CorpusTag::Generic,
                    generic_corpus(
                        train_templates.len(),
                        side,
                        rng::derive_seed(config.seed, "codec-generic", &[]),
                    ),
                    "generic",
                ),
            };
            let hp = CodecHyperparams {
                seed: rng::derive_seed(config.seed, "codec", &[]),
                ..CodecHyperparams::default()
            };
            let codec_config = CodecConfig {
                image_side: side,
                ..CodecConfig::default()
            };
            let (codec, params, report) = train_codec(&corpus_images, tag, codec_config, &hp)?;
            let path = out.unwrap_or_else(|| {
                PathBuf::from(&config.output_dir).join(format!("codec-{name}.ckpt"))
            });
            codec.save(&params, &path)?;
            println!(
                "codec ({name}) at {}: loss {:.4} -> {:.4}",
                path.display(),
                report.loss_init,
                report.loss_final
            );
            Ok(())
        }
        Cmd::Classify {
            checkpoint,
            template,
            probe,
            expected,
            n_trials,
            seed,
        } => {
            let ckpt = DenoiserCheckpoint::load(&checkpoint)?;
            let (model, schedule) = ckpt.instantiate()?;
            let template_img = cdpauth::img::read_png(&template)?;
            let probe_img = cdpauth::img::read_png(&probe)?;
            let candidates: Vec<u32> = model.classes.iter().map(|c| c.class_id).collect();
            let (predicted, scores) = score_classes(
                &model,
                &ckpt.params,
                &schedule,
                &template_img,
                &probe_img,
                &candidates,
                n_trials,
                seed,
            )?;
            let predicted_label = model
                .classes
                .iter()
                .find(|c| c.class_id == predicted)
                .map(|c| c.label.clone())
                .unwrap_or_default();
            let mut output = serde_json::json!({
                "predicted_class": predicted,
                "predicted_label": predicted_label,
                "n_trials": n_trials,
                "seed": seed,
                "scores": scores.scores,
            });
            if let Some(label) = expected {
                let expected_id = model
                    .classes
                    .iter()
                    .find(|c| c.label == label)
                    .map(|c| c.class_id)
                    .ok_or_else(|| {
                        Error::invalid_argument(format!("unknown class label {label:?}"))
                    })?;
                let decision = authenticate(&model.classes, predicted, expected_id, scores)?;
                output["expected_class"] = serde_json::json!(expected_id);
                output["verdict"] = serde_json::json!(decision.verdict);
            }
            println!("{}", serde_json::to_string_pretty(&output).unwrap());
            Ok(())
        }
        Cmd::Eval {
            config,
            manifest,
            checkpoint,
            kind,
            index_checkpoint,
            out,
        } => {
            let config = RunConfig::load(&config)?;
            let dataset = Dataset::load_from_dir(&manifest)?;
            let kind: ExperimentKind = kind.parse()?;
            let ckpt = DenoiserCheckpoint::load(&checkpoint)?;
            let dir = out.unwrap_or_else(|| {
                PathBuf::from(&config.output_dir).join(format!("eval-{}", kind_slug(kind)))
            });
            match kind {
                ExperimentKind::AblationIdentity => {
                    let index_path = index_checkpoint.ok_or_else(|| {
                        Error::invalid_argument(
                            "--index-checkpoint is required for ablation-identity",
                        )
                    })?;
                    let index_ckpt = DenoiserCheckpoint::load(&index_path)?;
                    expect_identity_mode(&ckpt, IdentityMode::Structured)?;
                    expect_identity_mode(&index_ckpt, IdentityMode::Index)?;
                    let structured = pipeline::evaluate(&config, &dataset, &ckpt, kind)?;
                    let index = pipeline::evaluate(&config, &dataset, &index_ckpt, kind)?;
                    pipeline::write_eval_output(&structured, &dir, "structured")?;
                    pipeline::write_eval_output(&index, &dir, "index")?;
                    let combined = serde_json::json!({
                        "kind": "ablation_identity",
                        "structured": structured.report,
                        "index": index.report,
                    });
                    let path = dir.join("report.json");
                    std::fs::write(&path, serde_json::to_string_pretty(&combined).unwrap())
                        .map_err(|e| Error::io(&path, e))?;
                }
                _ => {
                    let output = pipeline::evaluate(&config, &dataset, &ckpt, kind)?;
                    pipeline::write_eval_output(&output, &dir, "report")?;
                }
            }
            pipeline::write_resolved_config(&config, &dir)?;
            println!("report written under {}", dir.display());
            Ok(())
        }
        Cmd::Report { report } => {
            let raw = std::fs::read_to_string(&report).map_err(|e| Error::io(&report, e))?;
            match serde_json::from_str::<MetricsReport>(&raw) {
                Ok(r) => print!("{}", render_report(&r)),
                Err(_) => {
                    // Combined ablation report: render each branch.
                    let value: serde_json::Value = serde_json::from_str(&raw)
                        .map_err(|e| Error::format("report", e.to_string()))?;
                    for key in ["structured", "index"] {
                        if let Some(sub) = value.get(key) {
                            let r: MetricsReport = serde_json::from_value(sub.clone())
                                .map_err(|e| Error::format("report", e.to_string()))?;
                            println!("== identity mode: {key} ==");
                            print!("{}", render_report(&r));
                        }
                    }
                }
            }
            Ok(())
        }
    }
}

fn kind_slug(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Main => "main",
        ExperimentKind::UnseenCounterfeit => "unseen-counterfeit",
        ExperimentKind::AblationNoTemplate => "ablation-no-template",
        ExperimentKind::AblationIdentity => "ablation-identity",
    }
}

fn expect_identity_mode(ckpt: &DenoiserCheckpoint, mode: IdentityMode) -> Result<(), Error> {
    if ckpt.meta.config.identity_mode != mode {
        return Err(Error::Incompatible(format!(
            "checkpoint identity mode {:?} where {mode:?} is required",
            ckpt.meta.config.identity_mode
        )));
    }
    Ok(())
}

fn write_loss_curve(ckpt: &DenoiserCheckpoint, ckpt_path: &Path) -> Result<(), Error> {
    let path = ckpt_path.with_extension("loss.json");
    let json = serde_json::to_string_pretty(&ckpt.meta.train_report)
        .map_err(|e| Error::format("loss curve", e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
