//! Selecting beyond the per-round cap: patch selection and high-res
//! extraction run for several rounds, each taking the best remaining
//! patches, all sharing one low-res KV cache.
//!
//!     cargo run --release --example multi_round

use fovea::datagen::{synth_scene, LayoutRule, SceneSpec};
use fovea::encoder::{Encoder, EncoderConfig, Prompt};
use fovea::pyramid::ImagePyramid;

fn main() -> fovea::Result<()> {
    let (img, _) = synth_scene(&SceneSpec {
        seed: 5,
        resolution: 256,
        glyph_count: 4,
        glyph_side: 7,
        palette: (0..8).collect(),
        layout: LayoutRule::NaturalScatter,
    })?;

    let mut cfg = EncoderConfig::desk(2);
    cfg.per_round_cap = 96; // small cap so a 300-patch budget needs rounds
    let enc: Encoder<f32> = Encoder::new(cfg)?;
    let pyr = ImagePyramid::build(
        &img,
        enc.cfg.low_res_side,
        enc.cfg.patch_side,
        &enc.cfg.scale_sides(),
    )?;

    let mut fwd = enc.forward();
    let total_k = 300;
    let out = fwd.encode_multi_round(&pyr, &Prompt::BottomUp, total_k, None)?;
    println!(
        "budget {total_k} over a cap of {}: {} rounds",
        enc.cfg.per_round_cap,
        out.rounds.len()
    );
    for (i, round) in out.rounds.iter().enumerate() {
        println!(
            "  round {i}: {:?} patches per scale ({} total)",
            round.k_used,
            round.total()
        );
    }
    println!(
        "features: {:?} in (round, scale, index) order",
        fwd.tape.value(out.features).shape()
    );

    // The union of rounds partitions the budget: no patch repeats.
    let mut seen = std::collections::HashSet::new();
    for round in &out.rounds {
        for (s, list) in round.per_scale.iter().enumerate() {
            for &i in list {
                assert!(seen.insert((s, i)));
            }
        }
    }
    println!("rounds partition the selection: {} unique patches", seen.len());
    Ok(())
}
