//! Synthetic datasets for examples, smoke runs, and tests.
//!
//! The generators produce small images with enough structure to learn
//! from: smooth colour fields for reconstruction, class-dependent blobs
//! and palettes for classification and split selection, and attribute
//! maps that yield natural captions.

use crate::autograd::Array;
use crate::data::manifest::{build_caption, save_manifest, ManifestRecord};
use crate::data::pixels::save_image;
use crate::{rng, Error, Result};
use indexmap::IndexMap;
use ndarray::IxDyn;
use rand::Rng;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

/// The eight emotion categories used for synthetic labels and captions.
pub const EMOTIONS: [&str; 8] = [
    "amusement",
    "anger",
    "awe",
    "contentment",
    "disgust",
    "excitement",
    "fear",
    "sadness",
];

const OBJECTS: [&str; 8] = [
    "clown", "storm", "canyon", "meadow", "swamp", "rollercoaster", "spider", "ruin",
];

const SCENES: [&str; 8] = [
    "carnival", "city", "mountain", "garden", "marsh", "fairground", "forest", "winter",
];

/// A generated image together with its manifest row.
#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub pixels: Array,
    pub record: ManifestRecord,
}

fn class_attributes(class: usize) -> IndexMap<String, String> {
    let mut attributes = IndexMap::new();
    attributes.insert("emotion".to_string(), EMOTIONS[class % 8].to_string());
    attributes.insert("object".to_string(), OBJECTS[class % 8].to_string());
    attributes.insert("scene".to_string(), SCENES[class % 8].to_string());
    attributes
}

fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let t = TAU * class as f64 / num_classes.max(1) as f64;
    [
        0.5 + 0.45 * t.sin(),
        0.5 + 0.45 * (t + 2.1).sin(),
        0.5 + 0.45 * (t + 4.2).sin(),
    ]
}

/// Generate `n` images for pretraining: a smooth sinusoidal colour field
/// with a class-coloured rectangular figure, a person box around the
/// figure, class attributes, and a caption built from them. Classes cycle
/// through the eight emotion categories.
pub fn synth_pretrain_set(n: usize, image_size: usize, seed: u64) -> Result<Vec<SynthRecord>> {
    if image_size < 4 {
        return Err(Error::invalid("synthetic images need at least 4 pixels"));
    }
    let mut generator = rng::seeded(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 8;
        let s = image_size;
        let fx: f64 = generator.gen_range(0.5..2.5);
        let fy: f64 = generator.gen_range(0.5..2.5);
        let phase: [f64; 3] = [
            generator.gen_range(0.0..TAU),
            generator.gen_range(0.0..TAU),
            generator.gen_range(0.0..TAU),
        ];
        let mut pixels = Array::zeros(IxDyn(&[s, s, 3]));
        for y in 0..s {
            for x in 0..s {
                let u = x as f64 / s as f64;
                let v = y as f64 / s as f64;
                for c in 0..3 {
                    let wave = (TAU * (fx * u + fy * v) + phase[c]).sin();
                    pixels[[y, x, c]] = 0.5 + 0.35 * wave;
                }
            }
        }
        // A class-coloured figure somewhere in the frame, with its box.
        let bw = generator.gen_range(s / 4..=s / 2);
        let bh = generator.gen_range(s / 4..=s / 2);
        let x0 = generator.gen_range(0..=s - bw);
        let y0 = generator.gen_range(0..=s - bh);
        let color = class_color(class, 8);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                for c in 0..3 {
                    pixels[[y, x, c]] = 0.25 * pixels[[y, x, c]] + 0.75 * color[c];
                }
            }
        }
        let attributes = class_attributes(class);
        let caption = build_caption(&attributes)?;
        out.push(SynthRecord {
            pixels,
            record: ManifestRecord {
                image_path: format!("img_{i:05}.png"),
                label: Some(class),
                attributes,
                person_box: Some([x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64]),
                split_hint: None,
                caption: Some(caption),
            },
        });
    }
    Ok(out)
}

/// Generate a linearly separable two-class set: class 0 images are
/// red-dominant and class 1 images blue-dominant, with mild texture so
/// reconstruction is not degenerate. Classes alternate by index.
pub fn synth_twoclass_set(n: usize, image_size: usize, seed: u64) -> Result<Vec<SynthRecord>> {
    if image_size < 4 {
        return Err(Error::invalid("synthetic images need at least 4 pixels"));
    }
    let mut generator = rng::seeded(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let s = image_size;
        let hot: f64 = generator.gen_range(0.75..0.95);
        let cold: f64 = generator.gen_range(0.05..0.25);
        let mid: f64 = generator.gen_range(0.2..0.4);
        let mut pixels = Array::zeros(IxDyn(&[s, s, 3]));
        for y in 0..s {
            for x in 0..s {
                let texture = 0.05 * (TAU * (x + 2 * y) as f64 / s as f64).sin();
                let base = if class == 0 {
                    [hot, mid, cold]
                } else {
                    [cold, mid, hot]
                };
                for c in 0..3 {
                    pixels[[y, x, c]] = (base[c] + texture).clamp(0.0, 1.0);
                }
            }
        }
        let attributes = {
            let mut a = IndexMap::new();
            let emotion = if class == 0 { "excitement" } else { "sadness" };
            a.insert("emotion".to_string(), emotion.to_string());
            a
        };
        let caption = build_caption(&attributes)?;
        let quarter = s as f64 / 4.0;
        out.push(SynthRecord {
            pixels,
            record: ManifestRecord {
                image_path: format!("img_{i:05}.png"),
                label: Some(class),
                attributes,
                person_box: Some([quarter, quarter, 3.0 * quarter, 3.0 * quarter]),
                split_hint: None,
                caption: Some(caption),
            },
        });
    }
    Ok(out)
}

/// Generate images for split-selection experiments: each class has its own
/// palette with per-image brightness jitter and pixel noise, so colour
/// histograms cluster by class and candidate splits score differently.
pub fn synth_split_set(
    n: usize,
    image_size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<SynthRecord>> {
    if num_classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    let mut generator = rng::seeded(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let s = image_size;
        let color = class_color(class, num_classes);
        let jitter: f64 = generator.gen_range(-0.08..0.08);
        let mut pixels = Array::zeros(IxDyn(&[s, s, 3]));
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    let noise: f64 = generator.gen_range(-0.05..0.05);
                    pixels[[y, x, c]] = (color[c] + jitter + noise).clamp(0.0, 1.0);
                }
            }
        }
        let attributes = class_attributes(class);
        let caption = build_caption(&attributes)?;
        out.push(SynthRecord {
            pixels,
            record: ManifestRecord {
                image_path: format!("img_{i:05}.png"),
                label: Some(class),
                attributes,
                person_box: None,
                split_hint: None,
                caption: Some(caption),
            },
        });
    }
    Ok(out)
}

/// Materialize in-memory synthetic records as training samples without
/// touching disk: the person view comes from the record's box and the
/// caption from the stored text or the record's attributes.
pub fn samples_from_synth(items: &[SynthRecord]) -> Result<Vec<crate::data::ImageSample>> {
    items
        .iter()
        .map(|item| {
            let person_pixels =
                crate::data::pixels::derive_person_map(&item.pixels, item.record.person_box)?;
            let caption = match &item.record.caption {
                Some(caption) => caption.clone(),
                None if !item.record.attributes.is_empty() => {
                    build_caption(&item.record.attributes)?
                }
                None => String::new(),
            };
            Ok(crate::data::ImageSample {
                pixels: item.pixels.clone(),
                person_pixels,
                caption,
                label: item.record.label,
            })
        })
        .collect()
}

/// Write a synthetic set to disk as PNG files plus `manifest.jsonl`,
/// returning the manifest path.
pub fn write_dataset(dir: &Path, items: &[SynthRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for item in items {
        save_image(&item.pixels, &dir.join(&item.record.image_path))?;
    }
    let manifest_path = dir.join("manifest.jsonl");
    let records: Vec<ManifestRecord> = items.iter().map(|it| it.record.clone()).collect();
    save_manifest(&records, &manifest_path)?;
    Ok(manifest_path)
}
