//! Materialize a labeled synthetic dataset to disk — PNG images plus a
//! `manifest.jsonl` — so the `uniemo` CLI can be driven end to end without
//! any external data.
//!
//! Run with `cargo run --release --example make_dataset`, then e.g.:
//!
//! ```sh
//! uniemo split --set data.manifest=target/examples/dataset/manifest.jsonl \
//!              --out target/examples/dataset-split
//! ```

use uniemo::data::{synth_twoclass_set, write_dataset};

fn main() -> uniemo::Result<()> {
    let out = std::path::PathBuf::from("target/examples/dataset");
    std::fs::create_dir_all(&out).expect("create output directory");

    // 60 two-class images (30 per class) at the default 64-pixel input
    // size: enough for a stratified 8:1:1 split and quick CLI runs.
    let items = synth_twoclass_set(60, 64, 5)?;
    let manifest = write_dataset(&out, &items)?;

    println!("wrote {} images", items.len());
    println!("manifest: {}", manifest.display());
    Ok(())
}
