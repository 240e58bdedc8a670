//! Procedural scene and document synthesis with exact region ground truth.
//!
//! Glyphs are small colored shapes, sized so that shape identity washes out
//! at the low-res side while color and rough position survive. Natural-style
//! scenes scatter a few single-class glyph clusters, each wrapped in a
//! region box captioned with discrete tokens (color, shape, coarse
//! position). Document-style scenes lay dark glyph "words" out in rows and
//! caption sampled words with their glyph sequence, like OCR output.

use crate::datagen::dataset::{DatasetRecord, Region, RegionKind, SourceTag};
use crate::error::{Error, Result};
use crate::geom::BoxF;
use crate::raster::RasterImage;
use crate::rng::Rng;

pub const COLOR_NAMES: [&str; 8] = [
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white",
];
pub const COLOR_RGB: [[f32; 3]; 8] = [
    [0.92, 0.12, 0.12],
    [0.12, 0.82, 0.18],
    [0.16, 0.28, 0.92],
    [0.92, 0.86, 0.12],
    [0.86, 0.16, 0.82],
    [0.12, 0.82, 0.86],
    [0.95, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];
pub const SHAPE_NAMES: [&str; 8] = [
    "disk", "ring", "square", "diamond", "triangle", "cross", "hbar", "vbar",
];
pub const SPATIAL_NAMES: [&str; 9] = [
    "upper-left",
    "top",
    "upper-right",
    "left",
    "center",
    "right",
    "lower-left",
    "bottom",
    "lower-right",
];

pub const TOK_COLOR_BASE: u16 = 0;
pub const TOK_SHAPE_BASE: u16 = 8;
pub const TOK_SPATIAL_BASE: u16 = 16;
pub const TOK_SCENE: u16 = 25;
pub const TOK_WORD: u16 = 26;

/// All assigned token ids with their names; ids above the last are reserved.
pub fn vocab() -> Vec<(u16, &'static str)> {
    let mut v = Vec::new();
    for (i, n) in COLOR_NAMES.iter().enumerate() {
        v.push((TOK_COLOR_BASE + i as u16, *n));
    }
    for (i, n) in SHAPE_NAMES.iter().enumerate() {
        v.push((TOK_SHAPE_BASE + i as u16, *n));
    }
    for (i, n) in SPATIAL_NAMES.iter().enumerate() {
        v.push((TOK_SPATIAL_BASE + i as u16, *n));
    }
    v.push((TOK_SCENE, "scene"));
    v.push((TOK_WORD, "word"));
    v
}

pub fn token_name(id: u16) -> Option<&'static str> {
    vocab().into_iter().find(|&(i, _)| i == id).map(|(_, n)| n)
}

pub fn token_id(name: &str) -> Option<u16> {
    vocab().into_iter().find(|&(_, n)| n == name).map(|(i, _)| i)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutRule {
    /// Scattered single-class glyph clusters with captioned boxes.
    NaturalScatter,
    /// Row-aligned glyph words with OCR-style captions.
    DocumentRows,
}

/// Everything the generator needs to render one scene deterministically.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub seed: u64,
    /// Square canvas side, pixels.
    pub resolution: usize,
    /// Glyphs per region (natural) or max glyphs per word (document).
    pub glyph_count: usize,
    /// Glyph bounding side, pixels.
    pub glyph_side: usize,
    /// Usable color token ids.
    pub palette: Vec<u16>,
    pub layout: LayoutRule,
}

impl SceneSpec {
    /// Glyphs must be unresolvable at the low-res side: a glyph may span
    /// fewer than two low-res pixels worth of base pixels.
    pub fn validate(&self, low_res_side: usize) -> Result<()> {
        if self.resolution == 0 || self.glyph_side == 0 || self.glyph_count == 0 {
            return Err(Error::Config("resolution, glyph_side, glyph_count must be positive".into()));
        }
        let limit = self.resolution as f64 / low_res_side as f64 * 2.0;
        if (self.glyph_side as f64) >= limit {
            return Err(Error::Config(format!(
                "glyph_side {} too large: must stay under {:.1} (resolution {} / low_res {} * 2) so identity is ambiguous at low res",
                self.glyph_side, limit, self.resolution, low_res_side
            )));
        }
        if self.palette.is_empty()
            || self
                .palette
                .iter()
                .any(|&c| !(TOK_COLOR_BASE..TOK_COLOR_BASE + 8).contains(&c))
        {
            return Err(Error::Config("palette must hold color token ids".into()));
        }
        if self.resolution < self.glyph_side * 8 {
            return Err(Error::Config("resolution too small for glyph layout".into()));
        }
        Ok(())
    }
}

/// Whether (dx, dy) from the glyph center is inked for `shape`, with the
/// glyph fitting a 7x7 cell. Ink masses are balanced (21-25 pixels) so the
/// downsampled blobs stay mutually ambiguous while full-res renders remain
/// clearly distinct.
fn shape_hit(shape: usize, dx: i32, dy: i32) -> bool {
    let r2 = dx * dx + dy * dy;
    match shape {
        0 => r2 <= 7,                                   // disk, 21 px
        1 => (2..=9).contains(&r2),                     // ring, 20 px
        2 => dx.abs() <= 2 && dy.abs() <= 2,            // square, 25 px
        3 => dx.abs() + dy.abs() <= 3,                  // diamond, 25 px
        4 => (-3..=3).contains(&dy) && 2 * dx.abs() <= dy + 3, // triangle, 25 px
        5 => (dx.abs() <= 1 && dy.abs() <= 3) || (dy == 0 && dx.abs() <= 3), // cross, 25 px
        6 => dy.abs() <= 1 && dx.abs() <= 3,            // hbar, 21 px
        7 => dx.abs() <= 1 && dy.abs() <= 3,            // vbar, 21 px
        _ => false,
    }
}

fn draw_glyph(img: &mut RasterImage, shape: usize, rgb: [f32; 3], cx: i32, cy: i32, side: usize) {
    let r = side as i32 / 2;
    for dy in -r..=r {
        for dx in -r..=r {
            if shape_hit(shape, dx, dy) {
                let x = cx + dx;
                let y = cy + dy;
                if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
                    img.set_pixel(x as usize, y as usize, rgb);
                }
            }
        }
    }
}

/// 3x3 position word for a point on the canvas.
fn spatial_token(cx: f64, cy: f64, res: f64) -> u16 {
    let col = ((cx / res * 3.0).floor() as usize).min(2);
    let row = ((cy / res * 3.0).floor() as usize).min(2);
    TOK_SPATIAL_BASE + (row * 3 + col) as u16
}

/// Render one scene. Deterministic in `spec.seed`: identical specs give
/// bit-identical images and records.
pub fn synth_scene(spec: &SceneSpec) -> Result<(RasterImage, DatasetRecord)> {
    match spec.layout {
        LayoutRule::NaturalScatter => synth_natural(spec),
        LayoutRule::DocumentRows => synth_document(spec),
    }
}

fn synth_natural(spec: &SceneSpec) -> Result<(RasterImage, DatasetRecord)> {
    let mut rng = Rng::seed_from(spec.seed).derive("natural-scene");
    let res = spec.resolution;
    let mut img = RasterImage::filled(res, res, [0.06, 0.06, 0.08]);
    let n_regions = 3 + rng.below(2); // 3-4 regions

    // Distinct (color, shape) classes across regions of one image.
    let mut combos: Vec<(u16, usize)> = Vec::new();
    for &c in &spec.palette {
        for s in 0..SHAPE_NAMES.len() {
            combos.push((c, s));
        }
    }
    let picks = rng.sample_distinct(combos.len(), n_regions.min(combos.len()));

    let min_box = (spec.glyph_side * 5).min(res / 4).max(spec.glyph_side + 4);
    let max_box = (spec.glyph_side * 8).min(res / 3);
    let mut boxes: Vec<BoxF> = Vec::new();
    let mut regions: Vec<Region> = Vec::new();
    for pick in picks {
        let (color_tok, shape) = combos[pick];
        let mut placed = None;
        for _ in 0..200 {
            let bw = min_box + rng.below(max_box - min_box + 1);
            let bh = min_box + rng.below(max_box - min_box + 1);
            let x0 = rng.below(res - bw + 1);
            let y0 = rng.below(res - bh + 1);
            let cand = BoxF::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64);
            if boxes.iter().all(|b| !b.overlaps(&cand)) {
                placed = Some(cand);
                break;
            }
        }
        let Some(bbox) = placed else { continue };
        let rgb = COLOR_RGB[(color_tok - TOK_COLOR_BASE) as usize];
        // Regions are dense clutter: glyphs on a jittered grid filling the
        // whole box, so every part of the region carries its class signal.
        let pitch = spec.glyph_side + 2;
        let half = (spec.glyph_side / 2) as i32 + 1;
        let sites_x = ((bbox.width() as usize).saturating_sub(2) / pitch).max(1);
        let sites_y = ((bbox.height() as usize).saturating_sub(2) / pitch).max(1);
        let mut drawn = 0usize;
        for sy in 0..sites_y {
            for sx in 0..sites_x {
                if rng.uniform() > 0.55 {
                    continue;
                }
                let jx = rng.below(3) as i32 - 1;
                let jy = rng.below(3) as i32 - 1;
                let cx = bbox.x0 as i32 + half + (sx * pitch) as i32 + jx;
                let cy = bbox.y0 as i32 + half + (sy * pitch) as i32 + jy;
                draw_glyph(&mut img, shape, rgb, cx, cy, spec.glyph_side);
                drawn += 1;
            }
        }
        // Guarantee at least glyph_count glyphs per region.
        while drawn < spec.glyph_count {
            let cx = bbox.x0 as i32
                + half
                + rng.below((bbox.width() as usize).saturating_sub(2 * half as usize) + 1) as i32;
            let cy = bbox.y0 as i32
                + half
                + rng.below((bbox.height() as usize).saturating_sub(2 * half as usize) + 1) as i32;
            draw_glyph(&mut img, shape, rgb, cx, cy, spec.glyph_side);
            drawn += 1;
        }
        let (ccx, ccy) = bbox.center();
        let caption = vec![
            color_tok,
            TOK_SHAPE_BASE + shape as u16,
            spatial_token(ccx, ccy, res as f64),
        ];
        boxes.push(bbox);
        regions.push(Region {
            bbox,
            caption,
            kind: RegionKind::Local,
        });
    }
    if regions.is_empty() {
        return Err(Error::Data("scene placement failed entirely".into()));
    }
    // Global caption: scene marker plus (color, position) per region in
    // reading order.
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ax, ay) = regions[a].bbox.center();
        let (bx, by) = regions[b].bbox.center();
        (ay, ax).partial_cmp(&(by, bx)).unwrap()
    });
    let mut global_caption = vec![TOK_SCENE];
    for &i in &order {
        global_caption.push(regions[i].caption[0]);
        global_caption.push(regions[i].caption[2]);
    }
    regions.push(Region {
        bbox: BoxF::new(0.0, 0.0, res as f64, res as f64),
        caption: global_caption,
        kind: RegionKind::Global,
    });
    let record = DatasetRecord {
        image_path: String::new(),
        width: res,
        height: res,
        source: SourceTag::Natural,
        regions,
    };
    Ok((img, record))
}

fn synth_document(spec: &SceneSpec) -> Result<(RasterImage, DatasetRecord)> {
    let mut rng = Rng::seed_from(spec.seed).derive("document-scene");
    let res = spec.resolution;
    let mut img = RasterImage::filled(res, res, [0.97, 0.97, 0.94]);
    let body_ink = [0.13, 0.13, 0.35];
    let cell = spec.glyph_side + 1;
    let margin = spec.glyph_side * 2;
    let row_step = spec.glyph_side * 2;

    struct Word {
        bbox: BoxF,
        shapes: Vec<usize>,
        x: usize,
        y: usize,
    }
    // Lay words out first; rendering happens after regions pick their ink.
    let mut words: Vec<Word> = Vec::new();
    let mut y = margin;
    let mut n_rows = 0usize;
    while y + spec.glyph_side < res - margin {
        let mut x = margin;
        loop {
            let len = 2 + rng.below(spec.glyph_count.max(3) - 1); // 2..glyph_count+1 glyphs
            let width = len * cell - 1;
            if x + width > res - margin {
                break;
            }
            let shapes: Vec<usize> = (0..len).map(|_| rng.below(SHAPE_NAMES.len())).collect();
            words.push(Word {
                bbox: BoxF::new(
                    x as f64 - 1.0,
                    y as f64 - 1.0,
                    (x + width) as f64 + 1.0,
                    (y + spec.glyph_side) as f64 + 1.0,
                ),
                shapes,
                x,
                y,
            });
            x += width + cell;
        }
        y += row_step;
        n_rows += 1;
    }
    if words.is_empty() {
        return Err(Error::Data("document layout produced no words".into()));
    }
    // Regions are multi-row text blocks (the analogue of a highlighted
    // passage): the tight bounding box of the words inside a sampled
    // window. Each block is printed in its own ink color, distinguishable
    // at the aux scale the way real passages are at full page resolution;
    // the caption carries color, coarse position, then the glyph sequence.
    let mut regions: Vec<Region> = Vec::new();
    let mut block_members: Vec<Vec<usize>> = Vec::new();
    let color_picks = rng.sample_distinct(spec.palette.len(), spec.palette.len().min(4));
    for _attempt in 0..200 {
        if regions.len() >= 4 || regions.len() >= color_picks.len() {
            break;
        }
        let rows_in_block = 2 + rng.below(2); // 2-3 rows
        let row0 = rng.below(n_rows.saturating_sub(rows_in_block).max(1));
        let width = (spec.glyph_side * 8) + rng.below(spec.glyph_side * 4 + 1);
        let x0 = margin + rng.below((res - 2 * margin).saturating_sub(width).max(1));
        let window = BoxF::new(
            x0 as f64,
            (margin + row0 * row_step) as f64 - 1.0,
            (x0 + width) as f64,
            (margin + row0 * row_step + (rows_in_block - 1) * row_step + spec.glyph_side) as f64
                + 1.0,
        );
        let members: Vec<usize> = words
            .iter()
            .enumerate()
            .filter(|(_, w)| {
                w.bbox.x0 >= window.x0
                    && w.bbox.x1 <= window.x1
                    && w.bbox.y0 >= window.y0
                    && w.bbox.y1 <= window.y1
            })
            .map(|(i, _)| i)
            .collect();
        if members.len() < 2 {
            continue;
        }
        let bbox = BoxF::new(
            members.iter().map(|&i| words[i].bbox.x0).fold(f64::INFINITY, f64::min),
            members.iter().map(|&i| words[i].bbox.y0).fold(f64::INFINITY, f64::min),
            members.iter().map(|&i| words[i].bbox.x1).fold(f64::NEG_INFINITY, f64::max),
            members.iter().map(|&i| words[i].bbox.y1).fold(f64::NEG_INFINITY, f64::max),
        );
        if regions.iter().any(|r| r.bbox.overlaps(&bbox)) {
            continue;
        }
        let color_tok = spec.palette[color_picks[regions.len()]];
        let (cx, cy) = bbox.center();
        let mut caption = vec![TOK_WORD, color_tok, spatial_token(cx, cy, res as f64)];
        for &i in &members {
            caption.extend(words[i].shapes.iter().map(|&s| TOK_SHAPE_BASE + s as u16));
        }
        caption.truncate(crate::encoder::MAX_CAPTION_LEN);
        regions.push(Region {
            bbox,
            caption,
            kind: RegionKind::Local,
        });
        block_members.push(members);
    }
    if regions.is_empty() {
        return Err(Error::Data("document region sampling failed".into()));
    }
    // Render: block members in their block color, everything else in the
    // body ink.
    let mut ink_of: Vec<[f32; 3]> = vec![body_ink; words.len()];
    for (region, members) in regions.iter().zip(&block_members) {
        let rgb = COLOR_RGB[(region.caption[1] - TOK_COLOR_BASE) as usize];
        for &i in members {
            ink_of[i] = rgb;
        }
    }
    let half = (spec.glyph_side / 2) as i32;
    for (w, ink) in words.iter().zip(&ink_of) {
        for (i, &s) in w.shapes.iter().enumerate() {
            draw_glyph(
                &mut img,
                s,
                *ink,
                (w.x + i * cell) as i32 + half,
                w.y as i32 + half,
                spec.glyph_side,
            );
        }
    }
    let record = DatasetRecord {
        image_path: String::new(),
        width: res,
        height: res,
        source: SourceTag::Document,
        regions,
    };
    Ok((img, record))
}

/// Paste a sample onto a larger solid-color canvas at a random position,
/// translating its region boxes accordingly.
pub fn paste_on_background(
    sample: &RasterImage,
    record: &DatasetRecord,
    bg_side: usize,
    rng: &mut Rng,
) -> Result<(RasterImage, DatasetRecord)> {
    if sample.width > bg_side || sample.height > bg_side {
        return Err(Error::Argument(format!(
            "sample {}x{} larger than canvas {bg_side}",
            sample.width, sample.height
        )));
    }
    let mut canvas = RasterImage::filled(bg_side, bg_side, [0.5, 0.5, 0.5]);
    let ox = rng.below(bg_side - sample.width + 1);
    let oy = rng.below(bg_side - sample.height + 1);
    for y in 0..sample.height {
        for x in 0..sample.width {
            canvas.set_pixel(ox + x, oy + y, sample.pixel(x, y));
        }
    }
    let regions = record
        .regions
        .iter()
        .map(|r| Region {
            bbox: r.bbox.translated(ox as f64, oy as f64),
            caption: r.caption.clone(),
            kind: r.kind,
        })
        .collect();
    Ok((
        canvas,
        DatasetRecord {
            image_path: record.image_path.clone(),
            width: bg_side,
            height: bg_side,
            source: record.source,
            regions,
        },
    ))
}
