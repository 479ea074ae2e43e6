//! Confusion matrices and authentication error rates.
//!
//! `P_miss` is the fraction of authentic probes rejected, `P_fa` the
//! fraction of counterfeit probes accepted, and
//! `P_err = (mean P_miss + mean P_fa) / 2` — the balanced error rate, with
//! per-class rates attributed to the probe's own true class.

use serde::{Deserialize, Serialize};

use crate::classify::{ProbeRecord, Verdict};
use crate::error::{Error, Result};
use crate::synthcdp::PrinterClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_ids: Vec<u32>,
    pub labels: Vec<String>,
    /// Row-normalized percentages; rows follow `class_ids` (true class),
    /// columns likewise (predicted class).
    pub percent: Vec<Vec<f64>>,
    pub row_counts: Vec<usize>,
}

/// Row-normalized percentage confusion matrix over the given class table.
pub fn confusion(records: &[ProbeRecord], classes: &[PrinterClass]) -> Result<ConfusionMatrix> {
    if records.is_empty() {
        return Err(Error::invalid_argument("no records to tabulate"));
    }
    let class_ids: Vec<u32> = classes.iter().map(|c| c.class_id).collect();
    let index = |id: u32| -> Result<usize> {
        class_ids
            .iter()
            .position(|&c| c == id)
            .ok_or_else(|| Error::invalid_argument(format!("class {id} outside the class table")))
    };
    let k = class_ids.len();
    let mut counts = vec![vec![0usize; k]; k];
    for r in records {
        counts[index(r.true_class)?][index(r.predicted_class)?] += 1;
    }
    let row_counts: Vec<usize> = counts.iter().map(|row| row.iter().sum()).collect();
    let percent = counts
        .iter()
        .zip(&row_counts)
        .map(|(row, &n)| {
            row.iter()
                .map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
                .collect()
        })
        .collect();
    Ok(ConfusionMatrix {
        class_ids,
        labels: classes.iter().map(|c| c.label.clone()).collect(),
        percent,
        row_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRate {
    pub class_id: u32,
    pub label: String,
    pub rate: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthMetrics {
    pub p_miss: Vec<ClassRate>,
    pub p_fa: Vec<ClassRate>,
    pub p_miss_mean: f64,
    pub p_fa_mean: f64,
    pub p_err: f64,
}

/// A decision with its ground-truth class, the minimum metrics need.
#[derive(Debug, Clone, Copy)]
pub struct LabelledVerdict {
    pub true_class: u32,
    pub verdict: Verdict,
}

/// Computes per-class and mean miss/false-accept rates over labelled
/// verdicts. Requires at least one authentic-labelled and one
/// counterfeit-labelled probe.
pub fn auth_metrics(decisions: &[LabelledVerdict], classes: &[PrinterClass]) -> Result<AuthMetrics> {
    let mut p_miss = Vec::new();
    let mut p_fa = Vec::new();
    for class in classes {
        let of_class: Vec<&LabelledVerdict> = decisions
            .iter()
            .filter(|d| d.true_class == class.class_id)
            .collect();
        if of_class.is_empty() {
            continue;
        }
        let n = of_class.len();
        if class.is_authentic {
            let rejected = of_class
                .iter()
                .filter(|d| d.verdict == Verdict::Counterfeit)
                .count();
            p_miss.push(ClassRate {
                class_id: class.class_id,
                label: class.label.clone(),
                rate: rejected as f64 / n as f64,
                count: n,
            });
        } else {
            let accepted = of_class
                .iter()
                .filter(|d| d.verdict == Verdict::Authentic)
                .count();
            p_fa.push(ClassRate {
                class_id: class.class_id,
                label: class.label.clone(),
                rate: accepted as f64 / n as f64,
                count: n,
            });
        }
    }
    if p_miss.is_empty() || p_fa.is_empty() {
        return Err(Error::InsufficientData(
            "need both authentic and counterfeit probes for balanced error".into(),
        ));
    }
    let mean = |rates: &[ClassRate]| rates.iter().map(|r| r.rate).sum::<f64>() / rates.len() as f64;
    let p_miss_mean = mean(&p_miss);
    let p_fa_mean = mean(&p_fa);
    Ok(AuthMetrics {
        p_miss,
        p_fa,
        p_miss_mean,
        p_fa_mean,
        p_err: (p_miss_mean + p_fa_mean) / 2.0,
    })
}
