//! Synthetic data generation and the mask-driven curation pipeline.

pub mod dataset;
pub mod masks;
pub mod saliency;
pub mod scene;

pub use dataset::{read_dataset, write_dataset, DatasetRecord, Region, RegionKind, SourceTag};
pub use masks::{Mask, MaskSet};
pub use saliency::{box_saliency, preset_boxes, select_salient_boxes};
pub use scene::{paste_on_background, synth_scene, LayoutRule, SceneSpec};

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::path::Path;

/// Configuration for batch dataset synthesis (`synth` subcommand and the
/// training examples).
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub glyph_count: usize,
    pub glyph_side: usize,
    /// Fraction of natural-style records; the remainder is document-style.
    /// Styles interleave deterministically so any split stays mixed.
    pub natural_fraction: f64,
    /// Fraction of records pasted onto a larger solid canvas.
    pub paste_fraction: f64,
    pub paste_bg_side: usize,
    /// Low-res side used to enforce glyph ambiguity.
    pub low_res_side: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            count: 100,
            resolution: 256,
            glyph_count: 4,
            glyph_side: 7,
            natural_fraction: 0.5,
            paste_fraction: 0.0,
            paste_bg_side: 1024,
            low_res_side: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.natural_fraction) {
            return Err(Error::Config("natural_fraction must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.paste_fraction) {
            return Err(Error::Config("paste_fraction must be in [0, 1]".into()));
        }
        if self.paste_fraction > 0.0 && self.paste_bg_side < self.resolution {
            return Err(Error::Config(
                "paste_bg_side smaller than scene resolution".into(),
            ));
        }
        self.scene_spec(0, LayoutRule::NaturalScatter)
            .validate(self.low_res_side)
    }

    fn scene_spec(&self, index: usize, layout: LayoutRule) -> SceneSpec {
        SceneSpec {
            seed: Rng::seed_from(self.seed)
                .derive(&format!("scene-{index}"))
                .next_u64(),
            resolution: self.resolution,
            glyph_count: self.glyph_count,
            glyph_side: self.glyph_side,
            palette: (0..8).collect(),
            layout,
        }
    }
}

/// Generate `cfg.count` records, write images under `out_dir/images/` and
/// the index to `out_dir/index.txt`, and return the records.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<DatasetRecord>> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut paste_rng = Rng::seed_from(cfg.seed).derive("paste");
    let mut records = Vec::with_capacity(cfg.count);
    // Bresenham-style accumulator interleaves styles at the exact ratio.
    let mut acc = 0.0f64;
    for i in 0..cfg.count {
        acc += cfg.natural_fraction;
        let layout = if acc >= 1.0 {
            acc -= 1.0;
            LayoutRule::NaturalScatter
        } else {
            LayoutRule::DocumentRows
        };
        let (mut img, mut rec) = synth_scene(&cfg.scene_spec(i, layout))?;
        if cfg.paste_fraction > 0.0 && paste_rng.uniform() < cfg.paste_fraction {
            let (pimg, prec) = paste_on_background(&img, &rec, cfg.paste_bg_side, &mut paste_rng)?;
            img = pimg;
            rec = prec;
        }
        let rel = format!("images/img_{i:05}.ppm");
        img.write_ppm(&out_dir.join(&rel))?;
        rec.image_path = rel;
        records.push(rec);
    }
    write_dataset(&records, &out_dir.join("index.txt"))?;
    Ok(records)
}
