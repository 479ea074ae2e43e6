//! Splits, augmentation, metrics, and experiment runners.

pub mod augment;
pub mod experiment;
pub mod metrics;
pub mod split;

pub use augment::{augment, AugmentParams};
pub use experiment::{evaluate_probes, ExperimentKind};
pub use metrics::{auth_metrics, confusion, AuthMetrics, ClassRate, ConfusionMatrix, LabelledVerdict};
pub use split::{split_by_template, Partition, SplitSpec};
