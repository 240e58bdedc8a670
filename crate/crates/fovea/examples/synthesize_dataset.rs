//! Generate a small synthetic dataset: natural-style glyph scenes and
//! document-style pages, each with captioned region ground truth, written
//! as PPM images plus a line-delimited index.
//!
//!     cargo run --release --example synthesize_dataset

use fovea::datagen::{generate_dataset, scene, SynthConfig};

fn main() -> fovea::Result<()> {
    let out = std::env::temp_dir().join("fovea_example_dataset");
    let cfg = SynthConfig {
        seed: 7,
        count: 12,
        paste_fraction: 0.25, // a few samples pasted onto large canvases
        ..SynthConfig::default()
    };
    let records = generate_dataset(&cfg, &out)?;
    println!("wrote {} records under {}", records.len(), out.display());

    for rec in records.iter().take(4) {
        println!(
            "\n{} ({}x{}, {:?})",
            rec.image_path, rec.width, rec.height, rec.source
        );
        for region in &rec.regions {
            let words: Vec<&str> = region
                .caption
                .iter()
                .map(|&t| scene::token_name(t).unwrap_or("?"))
                .collect();
            println!(
                "  {:?} box ({:.0},{:.0})-({:.0},{:.0}): {}",
                region.kind,
                region.bbox.x0,
                region.bbox.y0,
                region.bbox.x1,
                region.bbox.y1,
                words.join(" ")
            );
        }
    }
    println!("\nindex file: {}", out.join("index.txt").display());
    Ok(())
}
