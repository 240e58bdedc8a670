//! Salient-box curation over ingested segmentation masks: preset a grid of
//! candidate boxes, score each by the inverse-mask-area formula, and pick a
//! non-overlapping top-k.
//!
//!     cargo run --release --example curate_masks

use fovea::datagen::masks::{mask_from_raster, Mask, MaskSet};
use fovea::datagen::{box_saliency, preset_boxes, select_salient_boxes};

fn blob(w: usize, h: usize, cx: usize, cy: usize, r: usize) -> Option<Mask> {
    let mut grid = vec![false; w * h];
    for y in cy.saturating_sub(r)..(cy + r).min(h) {
        for x in cx.saturating_sub(r)..(cx + r).min(w) {
            let dx = x as i64 - cx as i64;
            let dy = y as i64 - cy as i64;
            if dx * dx + dy * dy <= (r * r) as i64 {
                grid[y * w + x] = true;
            }
        }
    }
    mask_from_raster(w, &grid)
}

fn main() -> fovea::Result<()> {
    let (w, h) = (400, 300);
    // A cluster of small blobs (rich detail) and one huge blob (weighs
    // little: its area is floored against 40x40 and its overlap fraction
    // spreads thin).
    let masks: Vec<Mask> = [
        blob(w, h, 60, 60, 6),
        blob(w, h, 75, 52, 5),
        blob(w, h, 52, 78, 7),
        blob(w, h, 82, 80, 4),
        blob(w, h, 250, 150, 80),
    ]
    .into_iter()
    .flatten()
    .collect();
    let maskset = MaskSet {
        width: w,
        height: h,
        masks,
    };

    let candidates = preset_boxes(w, h, 0.2);
    println!("{} candidate boxes on a grid of 60px squares", candidates.len());

    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, b)| (box_saliency(b, &maskset), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("\ntop candidates by saliency:");
    for (score, i) in scored.iter().take(5) {
        let b = &candidates[*i];
        println!(
            "  #{i:<3} ({:>5.1},{:>5.1})-({:>5.1},{:>5.1})  score {score:.3}",
            b.x0, b.y0, b.x1, b.y1
        );
    }

    let picked = select_salient_boxes(&candidates, &maskset, 3);
    println!("\nselected {} non-overlapping boxes:", picked.len());
    for b in &picked {
        println!(
            "  ({:>5.1},{:>5.1})-({:>5.1},{:>5.1})  score {:.3}",
            b.x0,
            b.y0,
            b.x1,
            b.y1,
            box_saliency(b, &maskset)
        );
    }
    println!("\nthe small-blob cluster outranks the big blob: tiny masks carry");
    println!("inverse-area weight, and the floor at 40x40 caps how much one");
    println!("large mask can claim.");
    Ok(())
}
