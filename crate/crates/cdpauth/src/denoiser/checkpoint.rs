//! Self-contained denoiser checkpoints: config, schedule, class table,
//! training metadata, and the parameter blob. Classification is fully
//! reproducible from a checkpoint plus images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::synthcdp::{validate_classes, PrinterClass};

use super::model::{Denoiser, DenoiserConfig};
use super::train::{Hyperparams, TrainReport};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserCheckpointMeta {
    pub format_version: u32,
    pub kind: String,
    pub dtype: String,
    pub config: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub classes: Vec<PrinterClass>,
    pub hyperparams: Hyperparams,
    pub train_report: TrainReport,
    pub config_fingerprint: String,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserCheckpoint {
    pub meta: DenoiserCheckpointMeta,
    pub params: Vec<f32>,
}

impl DenoiserCheckpoint {
    pub fn new(
        config: DenoiserConfig,
        schedule: &NoiseSchedule,
        classes: Vec<PrinterClass>,
        hyperparams: Hyperparams,
        train_report: TrainReport,
        config_fingerprint: String,
        params: Vec<f32>,
    ) -> Self {
        DenoiserCheckpoint {
            meta: DenoiserCheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                kind: "denoiser".into(),
                dtype: "f32".into(),
                config,
                schedule: schedule.spec(),
                classes,
                hyperparams,
                train_report,
                config_fingerprint,
                n_params: params.len(),
            },
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::format("checkpoint meta", e.to_string()))?;
        write_container(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta_bytes, params) = read_container(path)?;
        let meta: DenoiserCheckpointMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::format("checkpoint meta", e.to_string()))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format {} != supported {}",
                meta.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        if meta.kind != "denoiser" {
            return Err(Error::Incompatible(format!(
                "expected a denoiser checkpoint, found kind {:?}",
                meta.kind
            )));
        }
        if meta.n_params != params.len() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "parameter blob holds {} values, metadata says {}",
                    params.len(),
                    meta.n_params
                ),
            ));
        }
        Ok(DenoiserCheckpoint { meta, params })
    }

    /// Rebuilds the model and schedule this checkpoint was trained with.
    pub fn instantiate(&self) -> Result<(Denoiser, NoiseSchedule)> {
        validate_classes_loose(&self.meta.classes)?;
        let model = Denoiser::new(self.meta.config.clone(), &self.meta.classes)?;
        if model.n_params() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "model wants {} parameters, checkpoint holds {}",
                model.n_params(),
                self.params.len()
            )));
        }
        Ok((model, self.meta.schedule.build()?))
    }
}

/// Checkpoint class tables may be a subset of a dataset's classes (the
/// unseen-counterfeit model trains on four of six), so ids need not be
/// contiguous; only intra-table consistency is required.
fn validate_classes_loose(classes: &[PrinterClass]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::Incompatible("checkpoint has no classes".into()));
    }
    let contiguous = {
        let mut ids: Vec<u32> = classes.iter().map(|c| c.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len() == classes.len()
    };
    if !contiguous {
        return Err(Error::Incompatible(
            "checkpoint class ids are not unique".into(),
        ));
    }
    // Full validation when the table looks complete.
    if classes.iter().any(|c| c.is_authentic) && validate_classes(classes).is_err() {
        // Subset tables are permitted; fall back to per-class checks.
        for c in classes {
            c.source_channel.validate()?;
            if let Some(rc) = &c.reprint_channel {
                rc.validate()?;
            }
        }
    }
    Ok(())
}
