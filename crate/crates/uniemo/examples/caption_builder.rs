//! Turn structured annotation attributes into deterministic natural-language
//! captions for the text-distillation stream, and attach them to a dataset
//! manifest as a non-destructive sidecar copy.
//!
//! Run with `cargo run --release --example caption_builder`.

use indexmap::IndexMap;
use uniemo::data::{build_caption, load_manifest, save_manifest, synth_pretrain_set, write_dataset};

fn main() -> uniemo::Result<()> {
    // Attribute maps preserve insertion order, and the template consumes
    // them in a fixed slot order, so the same record always produces the
    // same sentence.
    let mut attributes = IndexMap::new();
    attributes.insert("emotion".to_string(), "joy".to_string());
    attributes.insert("age".to_string(), "adult".to_string());
    attributes.insert("gender".to_string(), "woman".to_string());
    attributes.insert("scene".to_string(), "park".to_string());
    println!("full record:    {}", build_caption(&attributes)?);

    let mut sparse = IndexMap::new();
    sparse.insert("emotion".to_string(), "anger".to_string());
    println!("sparse record:  {}", build_caption(&sparse)?);

    // On disk: write a synthetic dataset, then produce a captioned copy of
    // its manifest next to it. The source manifest is never rewritten.
    let out = std::path::PathBuf::from("target/examples/caption_builder");
    std::fs::create_dir_all(&out).expect("create output directory");
    let items = synth_pretrain_set(4, 16, 11)?;
    let manifest = write_dataset(&out, &items)?;

    let mut records = load_manifest(&manifest)?;
    for record in &mut records {
        if record.caption.is_none() {
            record.caption = Some(build_caption(&record.attributes)?);
        }
    }
    let captioned = out.join("captions.jsonl");
    save_manifest(&records, &captioned)?;

    println!("\ncaptioned manifest at {}:", captioned.display());
    for record in &records {
        println!(
            "  {} -> {}",
            record.image_path,
            record.caption.as_deref().unwrap_or("(none)")
        );
    }
    Ok(())
}
