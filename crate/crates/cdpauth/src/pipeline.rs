//! End-to-end orchestration: synthesize, train, evaluate, and write
//! artifacts. The CLI and the acceptance suite both drive these functions,
//! so a fixed root seed reproduces every file byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classify::ProbeRecord;
use crate::config::RunConfig;
use crate::denoiser::{
    train, Denoiser, DenoiserCheckpoint, DenoiserConfig, Hyperparams, IdentityMode,
};
use crate::error::{Error, Result};
use crate::eval::experiment::{
    build_report, evaluate_probes, render_report, run_baseline, BaselineRow, ExperimentKind,
    MetricsReport,
};
use crate::eval::{split_by_template, SplitSpec};
use crate::baselines::MetricKind;
use crate::synthcdp::{build_dataset, Dataset, PrinterClass};

/// Builds the dataset for a config (in memory).
pub fn synth_dataset(config: &RunConfig) -> Result<Dataset> {
    config.validate()?;
    build_dataset(
        &config.classes(),
        config.dataset.n_templates,
        config.dataset.image_side,
        config.dataset_seed(),
    )
}

/// Builds and writes the dataset plus the resolved config.
pub fn cmd_synth(config: &RunConfig, dir: &Path) -> Result<Dataset> {
    let dataset = synth_dataset(config)?;
    dataset.write_to_dir(dir)?;
    write_resolved_config(config, dir)?;
    Ok(dataset)
}

pub fn split_of(config: &RunConfig, dataset: &Dataset) -> Result<SplitSpec> {
    split_by_template(&dataset.manifest, config.eval.fractions, config.split_seed())
}

/// Trains a denoiser per the config. `identity_override` swaps the identity
/// mode for the ablation study without touching the rest of the config.
pub fn train_model(
    config: &RunConfig,
    dataset: &Dataset,
    identity_override: Option<IdentityMode>,
) -> Result<DenoiserCheckpoint> {
    config.validate()?;
    let mut model_config: DenoiserConfig = config.model.clone();
    if let Some(mode) = identity_override {
        model_config.identity_mode = mode;
    }

    let all_classes = dataset.manifest.classes.clone();
    let classes: Vec<PrinterClass> = match &config.train.class_filter {
        None => all_classes,
        Some(filter) => {
            let kept: Vec<PrinterClass> = all_classes
                .iter()
                .filter(|c| filter.contains(&c.label))
                .cloned()
                .collect();
            if kept.len() != filter.len() {
                return Err(Error::invalid_configuration(
                    "class_filter names classes missing from the dataset",
                ));
            }
            kept
        }
    };

    let schedule = config.schedule.build()?;
    let split = split_of(config, dataset)?;
    let model = Denoiser::new(model_config.clone(), &classes)?;
    let mut params = model.init_params::<f32>(config.train_init_seed());
    let hp: Hyperparams = config.hyperparams();
    let report = train(&model, &mut params, &schedule, dataset, &split, &hp)?;
    Ok(DenoiserCheckpoint::new(
        model_config,
        &schedule,
        classes,
        hp,
        report,
        config.fingerprint(),
        params,
    ))
}

/// Everything one evaluation run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub records: Vec<ProbeRecord>,
}

/// Validates checkpoint/kind compatibility and runs the experiment.
pub fn evaluate(
    config: &RunConfig,
    dataset: &Dataset,
    checkpoint: &DenoiserCheckpoint,
    kind: ExperimentKind,
) -> Result<EvalOutput> {
    config.validate()?;
    let n_dataset_classes = dataset.manifest.classes.len();
    let n_model_classes = checkpoint.meta.classes.len();
    match kind {
        ExperimentKind::UnseenCounterfeit => {
            if n_model_classes >= n_dataset_classes {
                return Err(Error::Incompatible(format!(
                    "unseen-counterfeit evaluation needs a checkpoint trained on a class subset; \
                     this one knows all {n_model_classes} classes"
                )));
            }
        }
        _ => {
            if n_model_classes != n_dataset_classes {
                return Err(Error::Incompatible(format!(
                    "{kind:?} needs a checkpoint covering all {n_dataset_classes} classes, \
                     found {n_model_classes}"
                )));
            }
        }
    }
    for c in &checkpoint.meta.classes {
        if !dataset.manifest.classes.contains(c) {
            return Err(Error::Incompatible(format!(
                "checkpoint class {} does not match the dataset class table",
                c.label
            )));
        }
    }
    let no_template = kind == ExperimentKind::AblationNoTemplate;
    if checkpoint.meta.hyperparams.no_template != no_template {
        return Err(Error::Incompatible(format!(
            "{kind:?} requires a checkpoint trained with no_template = {no_template}"
        )));
    }

    let (model, schedule) = checkpoint.instantiate()?;
    let split = split_of(config, dataset)?;
    let records = evaluate_probes(
        &model,
        &checkpoint.params,
        &schedule,
        dataset,
        &split,
        config.classify.n_trials,
        config.eval_seed(),
        no_template,
    )?;

    let baselines: Vec<BaselineRow> = if kind == ExperimentKind::Main {
        vec![
            run_baseline(dataset, &split, MetricKind::Ncc)?,
            run_baseline(dataset, &split, MetricKind::Ssim)?,
        ]
    } else {
        Vec::new()
    };

    let report = build_report(
        kind,
        &records,
        &dataset.manifest.classes,
        &checkpoint.meta.classes,
        &config.fingerprint(),
        baselines,
    )?;
    Ok(EvalOutput { report, records })
}

/// Writes report JSON, the human-readable dump, and per-probe JSON lines.
pub fn write_eval_output(output: &EvalOutput, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&output.report)
        .map_err(|e| Error::format("report", e.to_string()))?;
    std::fs::write(&report_path, &json).map_err(|e| Error::io(&report_path, e))?;

    let txt_path = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt_path, render_report(&output.report))
        .map_err(|e| Error::io(&txt_path, e))?;

    let records_path = dir.join(format!("{stem}.records.jsonl"));
    let mut lines = String::new();
    for r in &output.records {
        lines.push_str(
            &serde_json::to_string(r).map_err(|e| Error::format("record", e.to_string()))?,
        );
        lines.push('\n');
    }
    std::fs::write(&records_path, lines).map_err(|e| Error::io(&records_path, e))?;
    Ok(())
}

/// Serializes the resolved config and its fingerprint next to outputs.
pub fn write_resolved_config(config: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join("resolved-config.toml");
    std::fs::write(&config_path, config.to_toml_string())
        .map_err(|e| Error::io(&config_path, e))?;
    let fp_path = dir.join("config-fingerprint.txt");
    std::fs::write(&fp_path, config.fingerprint()).map_err(|e| Error::io(&fp_path, e))?;
    Ok(())
}

pub fn default_manifest_dir(config: &RunConfig) -> PathBuf {
    PathBuf::from(&config.output_dir).join("dataset")
}
