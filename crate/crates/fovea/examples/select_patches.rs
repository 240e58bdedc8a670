//! The three-stage pipeline on one image: encode the low-res view, score
//! every multi-scale patch against a prompt, select the top-k, and extract
//! their features with the low-res KV cache attached. Writes score heatmaps
//! and a selection overlay as PPMs.
//!
//!     cargo run --release --example select_patches

use fovea::datagen::{synth_scene, LayoutRule, SceneSpec};
use fovea::encoder::{select_patches, Encoder, EncoderConfig, Prompt};
use fovea::harness::{counts_at_fraction, render_heatmaps, render_selection_overlay};
use fovea::pyramid::ImagePyramid;

fn main() -> fovea::Result<()> {
    let out = std::env::temp_dir().join("fovea_example_select");
    std::fs::create_dir_all(&out)?;

    // A scene with a few colored glyph clusters.
    let (img, rec) = synth_scene(&SceneSpec {
        seed: 21,
        resolution: 256,
        glyph_count: 4,
        glyph_side: 7,
        palette: (0..8).collect(),
        layout: LayoutRule::NaturalScatter,
    })?;
    img.write_ppm(&out.join("scene.ppm"))?;

    // Untrained desk-profile encoder: selection is arbitrary until
    // pre-training, but the full mechanism runs.
    let enc: Encoder<f32> = Encoder::new(EncoderConfig::desk(1))?;
    let cfg = &enc.cfg;
    let pyr = ImagePyramid::build(&img, cfg.low_res_side, cfg.patch_side, &cfg.scale_sides())?;

    let mut fwd = enc.forward();
    let (tokens, cache) = fwd.encode_low_res(&pyr)?;
    println!(
        "stage 1: {} low-res tokens, KV cache over {} layers",
        cfg.low_cells(),
        cache.layers.len()
    );
    let aux = fwd.aux_highres_encode(&pyr)?;
    println!("stage 2: aux features on a {0}x{0} grid", aux.grid);

    // Top-down prompt from the first region's caption.
    let (_, region) = rec.local_regions().next().expect("scene has regions");
    let prompt = fwd.prompt_embedding(&Prompt::TopDown(region.caption.clone()))?;
    let grids = cfg.scale_grids();
    let scored = fwd.selection_score(tokens, &aux, prompt, &grids, None)?;

    let counts = counts_at_fraction(cfg, 0.25)?;
    let selection = select_patches(&scored.map, &counts, cfg.per_round_cap)?;
    println!(
        "stage 3: selected {:?} patches across grids {:?}",
        selection.k_used, grids
    );
    let hr = fwd.encode_high_res(&pyr, &selection, &cache, Default::default())?;
    println!(
        "         high-res features: {:?}",
        fwd.tape.value(hr).shape()
    );

    for (i, heat) in render_heatmaps(&scored.map).into_iter().enumerate() {
        heat.write_ppm(&out.join(format!("heatmap_scale{i}.ppm")))?;
    }
    render_selection_overlay(&pyr, &selection)?.write_ppm(&out.join("overlay.ppm"))?;
    println!("\nwrote scene.ppm, heatmaps and overlay under {}", out.display());
    println!("train first (see pretrain_quick) for meaningful selections.");
    Ok(())
}
