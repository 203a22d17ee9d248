//! Data pipeline: manifests and captions, pixel operations, batch
//! assembly with mixup, stratified split selection, and synthetic
//! datasets for examples and tests.

pub mod batch;
pub mod manifest;
pub mod pixels;
pub mod split;
pub mod synth;

pub use batch::{mix_with, mixup_batch, stack_samples, ImageSample};
pub use manifest::{build_caption, load_manifest, save_manifest, ManifestRecord};
pub use pixels::{bilinear_resize, color_histogram, derive_person_map, load_image, save_image};
pub use split::{
    frechet_divergence, manifest_features, select_best_split, split_divergence,
    stratified_split, SplitPlan,
};
pub use synth::{
    samples_from_synth, synth_pretrain_set, synth_split_set, synth_twoclass_set, write_dataset,
    SynthRecord,
};

use crate::Result;
use std::path::Path;

/// Materialize manifest records into in-memory samples: load each image,
/// derive its person view from the box, and take the stored caption
/// (building one from the attributes when absent).
pub fn load_samples(records: &[ManifestRecord], root: &Path) -> Result<Vec<ImageSample>> {
    records
        .iter()
        .map(|record| {
            let pixels = load_image(&root.join(&record.image_path))?;
            let person_pixels = derive_person_map(&pixels, record.person_box)?;
            let caption = match &record.caption {
                Some(caption) => caption.clone(),
                None if !record.attributes.is_empty() => build_caption(&record.attributes)?,
                None => String::new(),
            };
            Ok(ImageSample {
                pixels,
                person_pixels,
                caption,
                label: record.label,
            })
        })
        .collect()
}
