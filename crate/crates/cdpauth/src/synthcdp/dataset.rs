//! Printer classes and dataset assembly.
//!
//! The default task mirrors a two-printer plant: authentic classes `HP55` and
//! `HP76`, plus four counterfeit classes `HPXX_YY` made by estimating a
//! template from an authentic `HPXX` print and reprinting it through printer
//! `YY`'s channel. One sample exists per (template, class), so classes stay
//! balanced by construction.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{self, Pixels};
use crate::rng;

use super::channel::{print_cdp, ChannelParams, PrintedCdp};
use super::otsu::estimate_template;
use super::template::{gen_template, BinaryTemplate, MIN_SIDE};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// A printer identity in the classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrinterClass {
    pub class_id: u32,
    /// `HPXX` for authentic printers, `HPXX_YY` for counterfeit paths.
    pub label: String,
    pub source_channel: ChannelParams,
    /// Present iff this class is a counterfeit (second print).
    pub reprint_channel: Option<ChannelParams>,
    pub is_authentic: bool,
}

impl PrinterClass {
    /// Splits the label into source and reprint printer names.
    pub fn printer_names(&self) -> (String, Option<String>) {
        match self.label.split_once('_') {
            Some((src, rep)) => {
                let prefix: String = src.chars().take_while(|c| c.is_alphabetic()).collect();
                (src.to_string(), Some(format!("{prefix}{rep}")))
            }
            None => (self.label.clone(), None),
        }
    }

    /// The authentic class a probe of this class claims to come from: the
    /// source printer `XX` of `HPXX` or `HPXX_YY`.
    pub fn claimed_printer(&self) -> String {
        self.printer_names().0
    }
}

/// Validates contiguous ids, label/channel consistency, and channel
/// distinctness across printers.
pub fn validate_classes(classes: &[PrinterClass]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::invalid_configuration("class list is empty"));
    }
    let mut ids: Vec<u32> = classes.iter().map(|c| c.class_id).collect();
    ids.sort_unstable();
    if ids != (0..classes.len() as u32).collect::<Vec<_>>() {
        return Err(Error::invalid_configuration(
            "class_ids must be contiguous and unique from 0",
        ));
    }
    let mut labels: Vec<&str> = classes.iter().map(|c| c.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != classes.len() {
        return Err(Error::invalid_configuration("class labels must be unique"));
    }

    for c in classes {
        c.source_channel.validate()?;
        if let Some(rc) = &c.reprint_channel {
            rc.validate()?;
        }
        let (_, reprint_name) = c.printer_names();
        if c.is_authentic != reprint_name.is_none() {
            return Err(Error::invalid_configuration(format!(
                "class {}: label format does not match is_authentic",
                c.label
            )));
        }
        if c.is_authentic != c.reprint_channel.is_none() {
            return Err(Error::invalid_configuration(format!(
                "class {}: counterfeit classes carry exactly two channels",
                c.label
            )));
        }
    }

    // Printer name -> channel, defined by the authentic classes.
    let mut printers: BTreeMap<String, ChannelParams> = BTreeMap::new();
    for c in classes.iter().filter(|c| c.is_authentic) {
        printers.insert(c.label.clone(), c.source_channel);
    }
    let chans: Vec<&ChannelParams> = printers.values().collect();
    for i in 0..chans.len() {
        for j in i + 1..chans.len() {
            if chans[i] == chans[j] {
                return Err(Error::invalid_configuration(
                    "distinct printers must differ in at least one channel parameter",
                ));
            }
        }
    }
    for c in classes.iter().filter(|c| !c.is_authentic) {
        let (src, rep) = c.printer_names();
        let expect_src = printers.get(&src).ok_or_else(|| {
            Error::invalid_configuration(format!(
                "class {}: source printer {src} has no authentic class",
                c.label
            ))
        })?;
        if *expect_src != c.source_channel {
            return Err(Error::invalid_configuration(format!(
                "class {}: source channel does not match printer {src}",
                c.label
            )));
        }
        let rep = rep.unwrap();
        let expect_rep = printers.get(&rep).ok_or_else(|| {
            Error::invalid_configuration(format!(
                "class {}: reprint printer {rep} has no authentic class",
                c.label
            ))
        })?;
        if Some(*expect_rep) != c.reprint_channel {
            return Err(Error::invalid_configuration(format!(
                "class {}: reprint channel does not match printer {rep}",
                c.label
            )));
        }
    }
    Ok(())
}

/// The default six-class configuration: two visibly distinct but overlapping
/// printer signatures and all four counterfeit paths between them.
pub fn default_classes() -> Vec<PrinterClass> {
    let hp55 = ChannelParams {
        dot_gain: 0.12,
        blur_sigma: 0.6,
        noise_std: 0.03,
        gamma: 1.1,
        shift: (0.25, 0.25),
        stream_id: 0,
    };
    let hp76 = ChannelParams {
        dot_gain: -0.08,
        blur_sigma: 0.9,
        noise_std: 0.02,
        gamma: 0.9,
        shift: (0.25, 0.25),
        stream_id: 1,
    };
    let class = |id: u32, label: &str, src: ChannelParams, rep: Option<ChannelParams>| {
        PrinterClass {
            class_id: id,
            label: label.to_string(),
            source_channel: src,
            reprint_channel: rep,
            is_authentic: rep.is_none(),
        }
    };
    vec![
        class(0, "HP55", hp55, None),
        class(1, "HP76", hp76, None),
        class(2, "HP55_55", hp55, Some(hp55)),
        class(3, "HP55_76", hp55, Some(hp76)),
        class(4, "HP76_76", hp76, Some(hp76)),
        class(5, "HP76_55", hp76, Some(hp55)),
    ]
}

/// Prints a counterfeit: estimate the template from a fresh authentic print
/// through `src`, then reprint the estimate through `dst`. Both stage seeds
/// derive from `seed`.
pub fn make_counterfeit(
    template: &BinaryTemplate,
    src: &ChannelParams,
    dst: &ChannelParams,
    seed: u64,
) -> Result<PrintedCdp> {
    let first = print_cdp(template, src, rng::derive_seed(seed, "counterfeit", &[1]));
    let estimated = estimate_template(&first)?;
    Ok(print_cdp(
        &estimated,
        dst,
        rng::derive_seed(seed, "counterfeit", &[2]),
    ))
}

/// One dataset record: which template, which class, where the image lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub template_id: u64,
    pub class_id: u32,
    pub path: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub template_id: u64,
    pub path: String,
}

/// The on-disk dataset description. Field names are the JSON schema; see
/// `docs/schemas.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub image_side: usize,
    pub n_templates: usize,
    pub seed: u64,
    pub classes: Vec<PrinterClass>,
    pub templates: Vec<TemplateRecord>,
    pub samples: Vec<SampleRecord>,
}

/// A manifest plus its pixel data, kept on the 8-bit grid so in-memory and
/// on-disk pipelines agree exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Indexed by `template_id`.
    pub templates: Vec<BinaryTemplate>,
    /// Aligned with `manifest.samples`.
    pub images: Vec<Pixels>,
}

impl Dataset {
    pub fn class(&self, class_id: u32) -> &PrinterClass {
        &self.manifest.classes[class_id as usize]
    }

    pub fn sample_image(&self, idx: usize) -> (&SampleRecord, &Pixels) {
        (&self.manifest.samples[idx], &self.images[idx])
    }

    /// Writes manifest, templates, and sample images under `dir`.
    /// Deterministic content: a rerun overwrites with identical bytes.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, rec) in self.templates.iter().zip(&self.manifest.templates) {
            img::write_png(&dir.join(&rec.path), &t.to_ideal_print())?;
        }
        for (px, rec) in self.images.iter().zip(&self.manifest.samples) {
            img::write_png(&dir.join(&rec.path), px)?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Loads a dataset previously written with [`Dataset::write_to_dir`].
    pub fn load_from_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&raw).map_err(|e| Error::format("manifest", e.to_string()))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Incompatible(format!(
                "manifest schema {} != supported {}",
                manifest.schema_version, MANIFEST_SCHEMA_VERSION
            )));
        }
        validate_classes(&manifest.classes)?;
        let mut templates = Vec::with_capacity(manifest.templates.len());
        for rec in &manifest.templates {
            let px = img::read_png(&dir.join(&rec.path))?;
            // Ideal-print rendering on disk: dark 0 is ink 1.
            let bits = px.mapv(|v| if v < 0.5 { 1u8 } else { 0u8 });
            templates.push(BinaryTemplate::new(bits, rec.template_id)?);
        }
        let mut images = Vec::with_capacity(manifest.samples.len());
        for rec in &manifest.samples {
            images.push(img::read_png(&dir.join(&rec.path))?);
        }
        Ok(Dataset {
            manifest,
            templates,
            images,
        })
    }
}

/// Builds the balanced dataset: one print per (template, class).
///
/// Parallel over templates; sample order is canonical (template major, class
/// minor) so the result is independent of scheduling.
pub fn build_dataset(
    classes: &[PrinterClass],
    n_templates: usize,
    side: usize,
    seed: u64,
) -> Result<Dataset> {
    validate_classes(classes)?;
    if n_templates == 0 {
        return Err(Error::invalid_argument("n_templates must be >= 1"));
    }
    if side < MIN_SIDE {
        return Err(Error::invalid_argument(format!(
            "image side must be >= {MIN_SIDE}"
        )));
    }

    let per_template: Vec<(BinaryTemplate, Vec<(SampleRecord, Pixels)>)> = (0..n_templates as u64)
        .into_par_iter()
        .map(|tid| {
            let mut template = gen_template(rng::derive_seed(seed, "template", &[tid]), side)?;
            template.template_id = tid;
            let mut rows = Vec::with_capacity(classes.len());
            for class in classes {
                let sample_seed = rng::derive_seed(seed, "sample", &[tid, class.class_id as u64]);
                let printed = match &class.reprint_channel {
                    None => print_cdp(&template, &class.source_channel, sample_seed),
                    Some(dst) => {
                        make_counterfeit(&template, &class.source_channel, dst, sample_seed)?
                    }
                };
                let record = SampleRecord {
                    template_id: tid,
                    class_id: class.class_id,
                    path: format!("images/{}/{tid:05}.png", class.label),
                    seed: sample_seed,
                };
                rows.push((record, img::quantize(&printed.pixels)));
            }
            Ok((template, rows))
        })
        .collect::<Result<_>>()?;

    let mut templates = Vec::with_capacity(n_templates);
    let mut template_records = Vec::with_capacity(n_templates);
    let mut samples = Vec::new();
    let mut images = Vec::new();
    for (template, rows) in per_template {
        template_records.push(TemplateRecord {
            template_id: template.template_id,
            path: format!("templates/{:05}.png", template.template_id),
        });
        templates.push(template);
        for (rec, px) in rows {
            samples.push(rec);
            images.push(px);
        }
    }

    Ok(Dataset {
        manifest: DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            image_side: side,
            n_templates,
            seed,
            classes: classes.to_vec(),
            templates: template_records,
            samples,
        },
        templates,
        images,
    })
}

/// Mean intensity of a class's samples. Used to verify channel separability.
pub fn class_mean_intensity(ds: &Dataset, class_id: u32) -> Vec<f64> {
    ds.manifest
        .samples
        .iter()
        .zip(&ds.images)
        .filter(|(rec, _)| rec.class_id == class_id)
        .map(|(_, px)| px.mean().unwrap())
        .collect()
}

/// High-frequency energy: mean squared 4-neighbor Laplacian response.
pub fn class_hf_energy(ds: &Dataset, class_id: u32) -> Vec<f64> {
    ds.manifest
        .samples
        .iter()
        .zip(&ds.images)
        .filter(|(rec, _)| rec.class_id == class_id)
        .map(|(_, px)| {
            let (h, w) = px.dim();
            let mut acc = 0.0;
            for r in 1..h - 1 {
                for c in 1..w - 1 {
                    let lap = 4.0 * px[[r, c]]
                        - px[[r - 1, c]]
                        - px[[r + 1, c]]
                        - px[[r, c - 1]]
                        - px[[r, c + 1]];
                    acc += lap * lap;
                }
            }
            acc / ((h - 2) * (w - 2)) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::ncc;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn std_err(v: &[f64]) -> f64 {
        let m = mean(v);
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (var / v.len() as f64).sqrt()
    }

    #[test]
    fn default_classes_are_consistent() {
        validate_classes(&default_classes()).unwrap();
    }

    #[test]
    fn mismatched_channel_is_rejected() {
        let mut classes = default_classes();
        classes[2].source_channel.dot_gain = 0.2;
        assert!(matches!(
            validate_classes(&classes),
            Err(Error::InvalidConfiguration(_))
        ));
    }

    #[test]
    fn label_and_authenticity_must_agree() {
        let mut classes = default_classes();
        classes[0].is_authentic = false;
        assert!(validate_classes(&classes).is_err());
    }

    #[test]
    fn counts_are_balanced() {
        let ds = build_dataset(&default_classes(), 12, 32, 7).unwrap();
        assert_eq!(ds.manifest.samples.len(), 72);
        for class in 0..6 {
            let n = ds
                .manifest
                .samples
                .iter()
                .filter(|s| s.class_id == class)
                .count();
            assert_eq!(n, 12);
        }
        // Each template appears exactly once per class.
        for tid in 0..12u64 {
            let n = ds
                .manifest
                .samples
                .iter()
                .filter(|s| s.template_id == tid)
                .count();
            assert_eq!(n, 6);
        }
    }

    #[test]
    fn paper_scale_counts() {
        // 6 classes x 720 templates is the reference dataset size.
        let ds = build_dataset(&default_classes(), 720, 32, 1).unwrap();
        assert_eq!(ds.manifest.samples.len(), 4320);
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let a = build_dataset(&default_classes(), 4, 32, 42).unwrap();
        let b = build_dataset(&default_classes(), 4, 32, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn counterfeit_identity_channels_lose_nothing() {
        let t = gen_template(8, 32).unwrap();
        let id = ChannelParams::identity();
        let counterfeit = make_counterfeit(&t, &id, &id, 3).unwrap();
        let authentic = print_cdp(&t, &id, 99);
        assert_eq!(counterfeit.pixels, authentic.pixels);
    }

    #[test]
    fn counterfeit_is_deterministic() {
        let t = gen_template(9, 32).unwrap();
        let classes = default_classes();
        let a = make_counterfeit(&t, &classes[0].source_channel, &classes[1].source_channel, 5)
            .unwrap();
        let b = make_counterfeit(&t, &classes[0].source_channel, &classes[1].source_channel, 5)
            .unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    /// Second-generation prints carry strictly less template information
    /// than first-generation prints under a degrading source channel.
    #[test]
    fn counterfeits_lose_information() {
        let src = ChannelParams {
            dot_gain: 0.05,
            blur_sigma: 1.0,
            noise_std: 0.1,
            gamma: 1.0,
            shift: (0.25, 0.25),
            stream_id: 0,
        };
        let dst = src;
        let mut auth_ncc = Vec::new();
        let mut fake_ncc = Vec::new();
        for i in 0..50 {
            let t = gen_template(1000 + i, 32).unwrap();
            let reference = t.to_ideal_print();
            let authentic = print_cdp(&t, &src, 2 * i);
            let counterfeit = make_counterfeit(&t, &src, &dst, 2 * i + 1).unwrap();
            auth_ncc.push(ncc(&reference, &authentic.pixels).unwrap());
            fake_ncc.push(ncc(&reference, &counterfeit.pixels).unwrap());
        }
        assert!(
            mean(&fake_ncc) < mean(&auth_ncc),
            "counterfeit NCC {} should fall below authentic NCC {}",
            mean(&fake_ncc),
            mean(&auth_ncc)
        );
    }

    /// The two authentic channels must stay statistically separable, or the
    /// classification task is ill-posed.
    #[test]
    fn authentic_channels_are_separable() {
        let ds = build_dataset(&default_classes(), 100, 32, 11).unwrap();
        for stats in [class_mean_intensity, class_hf_energy] {
            let a = stats(&ds, 0);
            let b = stats(&ds, 1);
            let gap = (mean(&a) - mean(&b)).abs();
            let pooled = (std_err(&a).powi(2) + std_err(&b).powi(2)).sqrt();
            assert!(
                gap > 3.0 * pooled,
                "class statistics overlap: gap {gap}, pooled SE {pooled}"
            );
        }
    }

    #[test]
    fn write_and_load_round_trip() {
        let dir = std::env::temp_dir().join("cdpauth_ds_roundtrip");
        std::fs::remove_dir_all(&dir).ok();
        let ds = build_dataset(&default_classes(), 3, 32, 5).unwrap();
        ds.write_to_dir(&dir).unwrap();
        let back = Dataset::load_from_dir(&dir).unwrap();
        assert_eq!(ds, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
