//! Experiment runners: batch classification over the test split, baseline
//! calibration/authentication, and report assembly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    authenticate_similarity, calibrate, ClassScoreSets, MetricKind, ThresholdTable,
};
use crate::classify::{authenticate, ProbeRecord, Verdict};
use crate::denoiser::{score_classes, Denoiser};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::synthcdp::{Dataset, PrinterClass};

use super::metrics::{auth_metrics, confusion, AuthMetrics, ConfusionMatrix, LabelledVerdict};
use super::split::{Partition, SplitSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Main,
    UnseenCounterfeit,
    AblationNoTemplate,
    AblationIdentity,
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(ExperimentKind::Main),
            "unseen-counterfeit" | "unseen_counterfeit" => Ok(ExperimentKind::UnseenCounterfeit),
            "ablation-no-template" | "ablation_no_template" => {
                Ok(ExperimentKind::AblationNoTemplate)
            }
            "ablation-identity" | "ablation_identity" => Ok(ExperimentKind::AblationIdentity),
            other => Err(Error::invalid_argument(format!(
                "unknown experiment kind {other:?}"
            ))),
        }
    }
}

/// The authentic class a probe of `true_class` claims to come from.
pub fn expected_class_of(classes: &[PrinterClass], true_class: u32) -> Result<u32> {
    let class = classes
        .iter()
        .find(|c| c.class_id == true_class)
        .ok_or_else(|| Error::invalid_argument(format!("unknown class {true_class}")))?;
    let claimed = class.claimed_printer();
    classes
        .iter()
        .find(|c| c.is_authentic && c.label == claimed)
        .map(|c| c.class_id)
        .ok_or_else(|| {
            Error::invalid_configuration(format!(
                "no authentic class for claimed printer {claimed}"
            ))
        })
}

/// Classifies every test-split probe against the model's candidate classes.
/// Clean (unaugmented) test images; one record per probe, in canonical
/// (sample index) order.
pub fn evaluate_probes(
    model: &Denoiser,
    params: &[f32],
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    split: &SplitSpec,
    n_trials: usize,
    eval_seed: u64,
    no_template: bool,
) -> Result<Vec<ProbeRecord>> {
    let candidates: Vec<u32> = model.classes.iter().map(|c| c.class_id).collect();
    let test_idx: Vec<usize> = dataset
        .manifest
        .samples
        .iter()
        .enumerate()
        .filter(|(_, rec)| split.partition_of(rec.template_id) == Some(Partition::Test))
        .map(|(i, _)| i)
        .collect();
    if test_idx.is_empty() {
        return Err(Error::invalid_argument("test partition is empty"));
    }

    test_idx
        .par_iter()
        .map(|&i| {
            let rec = &dataset.manifest.samples[i];
            let probe = &dataset.images[i];
            let template = if no_template {
                probe.clone()
            } else {
                dataset.templates[rec.template_id as usize].to_ideal_print()
            };
            let seed = rng::derive_seed(
                eval_seed,
                "probe",
                &[rec.template_id, rec.class_id as u64],
            );
            let (predicted, scores) = score_classes(
                model,
                params,
                schedule,
                &template,
                probe,
                &candidates,
                n_trials,
                seed,
            )?;
            let expected = expected_class_of(&dataset.manifest.classes, rec.class_id)?;
            let decision = authenticate(&dataset.manifest.classes, predicted, expected, scores)?;
            Ok(ProbeRecord {
                template_id: rec.template_id,
                true_class: rec.class_id,
                expected_class: expected,
                predicted_class: predicted,
                verdict: decision.verdict,
                scores: decision.scores.scores,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub name: String,
    pub labels: Vec<String>,
    pub p_fa: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub metric: MetricKind,
    pub thresholds: ThresholdTable,
    pub auth: AuthMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kind: ExperimentKind,
    pub config_fingerprint: String,
    pub n_probes: usize,
    /// Fraction of probes (whose true class the model can name) classified
    /// exactly right.
    pub accuracy: Option<f64>,
    pub confusion: Option<ConfusionMatrix>,
    pub auth: AuthMetrics,
    /// Known- vs unseen-counterfeit false-accept groups (unseen experiment).
    pub groups: Vec<GroupRate>,
    /// NCC/SSIM comparison rows (main experiment).
    pub baselines: Vec<BaselineRow>,
}

impl MetricsReport {
    /// The internal identity every report must satisfy.
    pub fn check_consistency(&self) -> Result<()> {
        let recomputed = (self.auth.p_miss_mean + self.auth.p_fa_mean) / 2.0;
        if (recomputed - self.auth.p_err).abs() > 1e-12 {
            return Err(Error::format(
                "metrics report",
                format!("P_err {} != recomputed {}", self.auth.p_err, recomputed),
            ));
        }
        Ok(())
    }
}

/// Assembles the report for one evaluated checkpoint.
pub fn build_report(
    kind: ExperimentKind,
    records: &[ProbeRecord],
    dataset_classes: &[PrinterClass],
    model_classes: &[PrinterClass],
    config_fingerprint: &str,
    baselines: Vec<BaselineRow>,
) -> Result<MetricsReport> {
    let verdicts: Vec<LabelledVerdict> = records
        .iter()
        .map(|r| LabelledVerdict {
            true_class: r.true_class,
            verdict: r.verdict,
        })
        .collect();
    let auth = auth_metrics(&verdicts, dataset_classes)?;

    let known_ids: Vec<u32> = model_classes.iter().map(|c| c.class_id).collect();
    let nameable: Vec<&ProbeRecord> = records
        .iter()
        .filter(|r| known_ids.contains(&r.true_class))
        .collect();
    let accuracy = if nameable.is_empty() {
        None
    } else {
        Some(
            nameable
                .iter()
                .filter(|r| r.predicted_class == r.true_class)
                .count() as f64
                / nameable.len() as f64,
        )
    };

    // Confusion over the model's candidate set, restricted to probes whose
    // true class the model can name.
    let confusion = if nameable.is_empty() {
        None
    } else {
        let owned: Vec<ProbeRecord> = nameable.iter().map(|r| (*r).clone()).collect();
        Some(confusion(&owned, model_classes)?)
    };

    let groups = if kind == ExperimentKind::UnseenCounterfeit {
        let known: Vec<&PrinterClass> = dataset_classes
            .iter()
            .filter(|c| !c.is_authentic && known_ids.contains(&c.class_id))
            .collect();
        let unseen: Vec<&PrinterClass> = dataset_classes
            .iter()
            .filter(|c| !c.is_authentic && !known_ids.contains(&c.class_id))
            .collect();
        let group = |name: &str, members: &[&PrinterClass]| -> GroupRate {
            let ids: Vec<u32> = members.iter().map(|c| c.class_id).collect();
            let of_group: Vec<&ProbeRecord> = records
                .iter()
                .filter(|r| ids.contains(&r.true_class))
                .collect();
            let accepted = of_group
                .iter()
                .filter(|r| r.verdict == Verdict::Authentic)
                .count();
            GroupRate {
                name: name.into(),
                labels: members.iter().map(|c| c.label.clone()).collect(),
                p_fa: if of_group.is_empty() {
                    0.0
                } else {
                    accepted as f64 / of_group.len() as f64
                },
                count: of_group.len(),
            }
        };
        vec![
            group("known_counterfeit", &known),
            group("unseen_counterfeit", &unseen),
        ]
    } else {
        Vec::new()
    };

    let report = MetricsReport {
        kind,
        config_fingerprint: config_fingerprint.to_string(),
        n_probes: records.len(),
        accuracy,
        confusion,
        auth,
        groups,
        baselines,
    };
    report.check_consistency()?;
    Ok(report)
}

/// Calibrates a similarity metric on the validation split and authenticates
/// the test split with it.
pub fn run_baseline(
    dataset: &Dataset,
    split: &SplitSpec,
    metric: MetricKind,
) -> Result<BaselineRow> {
    let classes = &dataset.manifest.classes;
    let authentic: Vec<&PrinterClass> = classes.iter().filter(|c| c.is_authentic).collect();

    let score_of = |idx: usize| -> Result<f64> {
        let rec = &dataset.manifest.samples[idx];
        let template = dataset.templates[rec.template_id as usize].to_ideal_print();
        metric.compute(&dataset.images[idx], &template)
    };

    let mut sets = Vec::new();
    for class in &authentic {
        let mut genuine = Vec::new();
        let mut fake = Vec::new();
        for (i, rec) in dataset.manifest.samples.iter().enumerate() {
            if split.partition_of(rec.template_id) != Some(Partition::Val) {
                continue;
            }
            let expected = expected_class_of(classes, rec.class_id)?;
            if expected != class.class_id {
                continue;
            }
            if rec.class_id == class.class_id {
                genuine.push(score_of(i)?);
            } else {
                fake.push(score_of(i)?);
            }
        }
        sets.push(ClassScoreSets {
            class_id: class.class_id,
            label: class.label.clone(),
            authentic: genuine,
            counterfeit: fake,
        });
    }
    let table = calibrate(&sets, metric)?;

    let mut verdicts = Vec::new();
    for (i, rec) in dataset.manifest.samples.iter().enumerate() {
        if split.partition_of(rec.template_id) != Some(Partition::Test) {
            continue;
        }
        let expected = expected_class_of(classes, rec.class_id)?;
        let template = dataset.templates[rec.template_id as usize].to_ideal_print();
        let decision = authenticate_similarity(&dataset.images[i], &template, expected, &table)?;
        verdicts.push(LabelledVerdict {
            true_class: rec.class_id,
            verdict: decision.verdict,
        });
    }
    let auth = auth_metrics(&verdicts, classes)?;
    Ok(BaselineRow {
        metric,
        thresholds: table,
        auth,
    })
}

/// Plain-text table dump of a report.
pub fn render_report(report: &MetricsReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "experiment: {:?}", report.kind);
    let _ = writeln!(out, "config fingerprint: {}", report.config_fingerprint);
    let _ = writeln!(out, "probes: {}", report.n_probes);
    if let Some(acc) = report.accuracy {
        let _ = writeln!(out, "classification accuracy: {:.4}", acc);
    }
    if let Some(cm) = &report.confusion {
        let _ = writeln!(out, "\nconfusion matrix (% of true-class row):");
        let _ = write!(out, "{:>10}", "");
        for label in &cm.labels {
            let _ = write!(out, "{label:>10}");
        }
        let _ = writeln!(out);
        for (i, label) in cm.labels.iter().enumerate() {
            let _ = write!(out, "{label:>10}");
            for v in &cm.percent[i] {
                let _ = write!(out, "{v:>10.1}");
            }
            let _ = writeln!(out);
        }
    }
    let _ = writeln!(out, "\nauthentication:");
    for r in &report.auth.p_miss {
        let _ = writeln!(out, "  P_miss[{}] = {:.4}  (n={})", r.label, r.rate, r.count);
    }
    for r in &report.auth.p_fa {
        let _ = writeln!(out, "  P_fa[{}]   = {:.4}  (n={})", r.label, r.rate, r.count);
    }
    let _ = writeln!(
        out,
        "  mean P_miss = {:.4}, mean P_fa = {:.4}, P_err = {:.4}",
        report.auth.p_miss_mean, report.auth.p_fa_mean, report.auth.p_err
    );
    for g in &report.groups {
        let _ = writeln!(
            out,
            "  {}: P_fa = {:.4} over {:?} (n={})",
            g.name, g.p_fa, g.labels, g.count
        );
    }
    for b in &report.baselines {
        let _ = writeln!(
            out,
            "  baseline {:?}: P_err = {:.4} (mean P_miss {:.4}, mean P_fa {:.4})",
            b.metric, b.auth.p_err, b.auth.p_miss_mean, b.auth.p_fa_mean
        );
    }
    out
}
