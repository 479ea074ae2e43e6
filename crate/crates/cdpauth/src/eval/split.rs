//! Template-disjoint dataset splits.
//!
//! Splits are by template id: every sample printed from a template lands in
//! the same partition, so evaluation always runs on unseen designs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthcdp::DatasetManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl SplitSpec {
    pub fn partition_of(&self, template_id: u64) -> Option<Partition> {
        if self.train.binary_search(&template_id).is_ok() {
            Some(Partition::Train)
        } else if self.val.binary_search(&template_id).is_ok() {
            Some(Partition::Val)
        } else if self.test.binary_search(&template_id).is_ok() {
            Some(Partition::Test)
        } else {
            None
        }
    }
}

/// Shuffles template ids by seed and partitions them by fractions with
/// largest-remainder rounding. Deterministic.
pub fn split_by_template(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitSpec> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| f <= 0.0) {
        return Err(Error::invalid_argument("fractions must be positive"));
    }
    if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid_argument("fractions must sum to 1"));
    }
    let n = manifest.templates.len();
    if n < 3 {
        return Err(Error::invalid_argument(
            "need at least as many templates as partitions",
        ));
    }

    let mut ids: Vec<u64> = manifest.templates.iter().map(|t| t.template_id).collect();
    let mut stream = rng::derived_stream(seed, "split", &[]);
    ids.shuffle(&mut stream);

    // Largest-remainder apportionment of n over the three fractions.
    let quotas: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..n - assigned {
        counts[order[i % 3]] += 1;
    }

    let mut it = ids.into_iter();
    let mut take = |k: usize| -> Vec<u64> {
        let mut v: Vec<u64> = it.by_ref().take(k).collect();
        v.sort_unstable();
        v
    };
    let train = take(counts[0]);
    let val = take(counts[1]);
    let test = take(counts[2]);
    Ok(SplitSpec {
        train,
        val,
        test,
        fractions,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcdp::{build_dataset, default_classes};

    fn manifest(n: usize) -> DatasetManifest {
        build_dataset(&default_classes(), n, 32, 1)
            .unwrap()
            .manifest
    }

    #[test]
    fn default_fractions_on_120_templates() {
        let split = split_by_template(&manifest(120), (0.7, 0.1, 0.2), 3).unwrap();
        assert_eq!(split.train.len(), 84);
        assert_eq!(split.val.len(), 12);
        assert_eq!(split.test.len(), 24);
    }

    #[test]
    fn partitions_are_disjoint_and_cover() {
        for seed in 0..5 {
            for n in [3, 7, 20, 53] {
                let split = split_by_template(&manifest(n), (0.7, 0.1, 0.2), seed).unwrap();
                let mut all: Vec<u64> = split
                    .train
                    .iter()
                    .chain(&split.val)
                    .chain(&split.test)
                    .copied()
                    .collect();
                all.sort_unstable();
                let expect: Vec<u64> = (0..n as u64).collect();
                assert_eq!(all, expect, "seed {seed} n {n}");
            }
        }
    }

    #[test]
    fn split_is_deterministic() {
        let m = manifest(30);
        let a = split_by_template(&m, (0.7, 0.1, 0.2), 9).unwrap();
        let b = split_by_template(&m, (0.7, 0.1, 0.2), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_templates_is_rejected() {
        let m = manifest(3);
        // 3 templates is the minimum; trimming to fewer must fail.
        let mut small = m.clone();
        small.templates.truncate(2);
        assert!(split_by_template(&small, (0.7, 0.1, 0.2), 0).is_err());
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let m = manifest(10);
        assert!(split_by_template(&m, (0.5, 0.5, 0.2), 0).is_err());
        assert!(split_by_template(&m, (1.0, 0.0, 0.0), 0).is_err());
    }
}
