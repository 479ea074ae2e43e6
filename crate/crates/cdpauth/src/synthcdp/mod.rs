//! Synthetic CDP generation: binary templates, per-printer print channels,
//! template-estimation attacks, and dataset assembly.

mod channel;
mod dataset;
mod otsu;
mod template;

pub use channel::{gaussian_blur, print_cdp, ChannelParams, PrintedCdp};
pub use dataset::{
    build_dataset, class_hf_energy, class_mean_intensity, default_classes, make_counterfeit,
    validate_classes, Dataset, DatasetManifest, PrinterClass, SampleRecord, TemplateRecord,
    MANIFEST_SCHEMA_VERSION,
};
pub use otsu::{estimate_template, otsu_threshold};
pub use template::{gen_template, BinaryTemplate, MIN_SIDE};
