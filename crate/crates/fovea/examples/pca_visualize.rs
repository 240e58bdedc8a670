//! Color high-res token features by their top three principal components
//! and write the result as a PPM per scale, with unselected cells gray.
//!
//!     cargo run --release --example pca_visualize

use fovea::datagen::{synth_scene, LayoutRule, SceneSpec};
use fovea::encoder::{select_patches, Encoder, EncoderConfig, Prompt};
use fovea::harness::{counts_at_fraction, pca_features};
use fovea::pyramid::ImagePyramid;
use fovea::raster::RasterImage;
use fovea::Scalar as _;
use fovea::tensor::Tensor;

fn main() -> fovea::Result<()> {
    let out = std::env::temp_dir().join("fovea_example_pca");
    std::fs::create_dir_all(&out)?;
    let (img, _) = synth_scene(&SceneSpec {
        seed: 33,
        resolution: 256,
        glyph_count: 4,
        glyph_side: 7,
        palette: (0..8).collect(),
        layout: LayoutRule::NaturalScatter,
    })?;

    let enc: Encoder<f32> = Encoder::new(EncoderConfig::desk(6))?;
    let cfg = &enc.cfg;
    let pyr = ImagePyramid::build(&img, cfg.low_res_side, cfg.patch_side, &cfg.scale_sides())?;
    let mut fwd = enc.forward();
    let (tokens, cache) = fwd.encode_low_res(&pyr)?;
    let aux = fwd.aux_highres_encode(&pyr)?;
    let prompt = fwd.prompt_embedding(&Prompt::BottomUp)?;
    let grids = cfg.scale_grids();
    let scored = fwd.selection_score(tokens, &aux, prompt, &grids, None)?;
    let counts = counts_at_fraction(cfg, 0.25)?;
    let selection = select_patches(&scored.map, &counts, cfg.per_round_cap)?;
    let hr = fwd.encode_high_res(&pyr, &selection, &cache, Default::default())?;

    // Rows of `hr` follow (scale, index) order; color them by PCA.
    let feats: Tensor<f64> = {
        let v = fwd.tape.value(hr);
        Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|x| x.to_f64()).collect(),
        )?
    };
    let rgb = pca_features(&feats, 3)?;
    println!(
        "projected {} selected-token features onto 3 principal components",
        rgb.len()
    );

    let mut row = 0usize;
    for (s, indices) in selection.per_scale.iter().enumerate() {
        let g = grids[s];
        let mut map = RasterImage::filled(g, g, [0.3, 0.3, 0.3]);
        for &cell in indices {
            let c = &rgb[row];
            map.set_pixel(cell % g, cell / g, [c[0] as f32, c[1] as f32, c[2] as f32]);
            row += 1;
        }
        // Nearest-neighbor upscale for visibility.
        let px = (256 / g).max(1);
        let mut big = RasterImage::new(g * px, g * px);
        for y in 0..g * px {
            for x in 0..g * px {
                big.set_pixel(x, y, map.pixel(x / px, y / px));
            }
        }
        let path = out.join(format!("pca_scale{s}.ppm"));
        big.write_ppm(&path)?;
        println!("scale {s} ({g}x{g}): {}", path.display());
    }
    img.write_ppm(&out.join("scene.ppm"))?;
    println!("scene: {}", out.join("scene.ppm").display());
    Ok(())
}
