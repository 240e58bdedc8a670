//! Salient-box curation: preset candidate boxes, an inverse-mask-area
//! saliency score, and greedy non-overlapping selection.

use crate::datagen::masks::MaskSet;
use crate::geom::BoxF;

/// Candidate boxes: squares of side `fraction * shortest_side` on a grid
/// whose spacing equals the box side (grid centered in the image), plus two
/// equal-area aspect variants (1.5:1 and 1:1.5) sharing each square's
/// center, clipped to bounds. Candidate order is row-major over grid
/// positions with [square, wide, tall] at each position; greedy tie-breaking
/// keys off this order. Images smaller than one box yield the single
/// full-image candidate.
pub fn preset_boxes(width: usize, height: usize, fraction: f64) -> Vec<BoxF> {
    let (w, h) = (width as f64, height as f64);
    let side = w.min(h) * fraction;
    let nx = (w / side).floor() as usize;
    let ny = (h / side).floor() as usize;
    if nx == 0 || ny == 0 {
        return vec![BoxF::new(0.0, 0.0, w, h)];
    }
    let ox = (w - nx as f64 * side) / 2.0;
    let oy = (h - ny as f64 * side) / 2.0;
    let ratio = 1.5f64.sqrt();
    let mut out = Vec::with_capacity(nx * ny * 3);
    for gy in 0..ny {
        for gx in 0..nx {
            let x0 = ox + gx as f64 * side;
            let y0 = oy + gy as f64 * side;
            let square = BoxF::new(x0, y0, x0 + side, y0 + side);
            let (cx, cy) = square.center();
            let (wide_w, wide_h) = (side * ratio, side / ratio);
            let wide = BoxF::new(
                cx - wide_w / 2.0,
                cy - wide_h / 2.0,
                cx + wide_w / 2.0,
                cy + wide_h / 2.0,
            )
            .clipped(w, h);
            let tall = BoxF::new(
                cx - wide_h / 2.0,
                cy - wide_w / 2.0,
                cx + wide_h / 2.0,
                cy + wide_w / 2.0,
            )
            .clipped(w, h);
            out.push(square);
            out.push(wide);
            out.push(tall);
        }
    }
    out
}

/// Saliency of a box: every overlapping mask contributes
/// `Area(image) / max(Area(mask), 40*40) * Area(mask ∩ box) / Area(mask)`.
/// Small masks weigh more; the overlap term rewards boxes that swallow a
/// mask whole. Pixels count as unit squares, so the intersection with a
/// real-valued box is fractional at the edges. The accumulation order is
/// (mask, row, pixel), matching the documented brute-force oracle exactly.
pub fn box_saliency(bbox: &BoxF, masks: &MaskSet) -> f64 {
    let img_area = (masks.width * masks.height) as f64;
    let mut total = 0.0;
    for mask in &masks.masks {
        // Masks with no overlap contribute exactly zero; the bbox test only
        // skips that zero-add.
        if !mask.bbox().overlaps(bbox) {
            continue;
        }
        let area = mask.area() as f64;
        let mut overlap = 0.0;
        for (y, runs) in &mask.rows {
            let yf = *y as f64;
            let wy = (bbox.y1.min(yf + 1.0) - bbox.y0.max(yf)).max(0.0);
            for &(x, l) in runs {
                for px in x..x + l {
                    let xf = px as f64;
                    let wx = (bbox.x1.min(xf + 1.0) - bbox.x0.max(xf)).max(0.0);
                    overlap += wx * wy;
                }
            }
        }
        let weight = img_area / area.max(40.0 * 40.0);
        total += weight * (overlap / area);
    }
    total
}

/// Greedy top-k by saliency, skipping any candidate with positive-area
/// overlap against an already-picked box. Score ties break toward the lower
/// candidate index. Returns at most `k` boxes.
pub fn select_salient_boxes(candidates: &[BoxF], masks: &MaskSet, k: usize) -> Vec<BoxF> {
    let scores: Vec<f64> = candidates.iter().map(|b| box_saliency(b, masks)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<BoxF> = Vec::new();
    for i in order {
        if picked.len() >= k {
            break;
        }
        let cand = candidates[i];
        if picked.iter().all(|p| !p.overlaps(&cand)) {
            picked.push(cand);
        }
    }
    picked
}
