//! Selection-quality metrics: in-box recall and the random-selection
//! baseline.

use crate::encoder::{ScoreMap, SelectionSet};
use crate::error::{Error, Result};
use crate::geom::BoxF;
use crate::pretrain::ground_truth_score_map;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Fraction of in-box cells that the selection covered, pooled over scales
/// (sum of per-scale intersections over the total in-box count). `None`
/// when no cell center falls inside any box.
pub fn recall_eval(
    selection: &SelectionSet,
    gt_boxes: &[BoxF],
    grids: &[usize],
    img_w: usize,
    img_h: usize,
) -> Result<Option<f64>> {
    if selection.per_scale.len() != grids.len() {
        return Err(Error::Dimension(format!(
            "selection covers {} scales, grids give {}",
            selection.per_scale.len(),
            grids.len()
        )));
    }
    let union: ScoreMap<f64> = crate::pretrain::bottom_up_gt(gt_boxes, grids, img_w, img_h)?;
    let mut inbox_total = 0usize;
    let mut hit = 0usize;
    for (s, indices) in selection.per_scale.iter().enumerate() {
        let grid = &union.grids[s];
        inbox_total += grid.data.iter().filter(|&&v| v == 1.0).count();
        hit += indices.iter().filter(|&&i| grid.data[i] == 1.0).count();
    }
    if inbox_total == 0 {
        return Ok(None);
    }
    Ok(Some(hit as f64 / inbox_total as f64))
}

/// In-box cells of a ground-truth map, per scale (selection targets).
pub fn gt_selection<T: Scalar>(map: &ScoreMap<T>) -> SelectionSet {
    let per_scale: Vec<Vec<usize>> = crate::pretrain::in_box_cells(map);
    let k_used = per_scale.iter().map(Vec::len).collect();
    SelectionSet { per_scale, k_used }
}

/// Teacher-forced selection for one box: k = in-box cell count per scale.
pub fn teacher_forced_selection(
    bbox: &BoxF,
    grids: &[usize],
    img_w: usize,
    img_h: usize,
) -> Result<SelectionSet> {
    let map: ScoreMap<f64> = ground_truth_score_map(bbox, grids, img_w, img_h)?;
    Ok(gt_selection(&map))
}

/// Uniformly random selection of round(fraction * cells) cells per scale.
pub fn random_selection(grids: &[usize], fraction: f64, rng: &mut Rng) -> SelectionSet {
    let mut per_scale = Vec::with_capacity(grids.len());
    let mut k_used = Vec::with_capacity(grids.len());
    for &g in grids {
        let cells = g * g;
        let k = ((cells as f64) * fraction).round() as usize;
        let k = k.min(cells);
        let mut picks = rng.sample_distinct(cells, k);
        picks.sort_unstable();
        k_used.push(picks.len());
        per_scale.push(picks);
    }
    SelectionSet { per_scale, k_used }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_forced_selection_has_perfect_recall() {
        let mut rng = Rng::seed_from(211);
        for _ in 0..100 {
            let w = 200 + rng.below(100);
            let h = 200 + rng.below(100);
            let x0 = rng.range_f64(0.0, w as f64 - 40.0);
            let y0 = rng.range_f64(0.0, h as f64 - 40.0);
            let bbox = BoxF::new(x0, y0, x0 + 35.0, y0 + 35.0);
            let grids = [16, 32];
            let sel = teacher_forced_selection(&bbox, &grids, w, h).unwrap();
            match recall_eval(&sel, &[bbox], &grids, w, h).unwrap() {
                Some(r) => assert_eq!(r, 1.0),
                None => panic!("35px box must cover at least one cell center"),
            }
        }
    }

    #[test]
    fn disjoint_selection_has_zero_recall() {
        let bbox = BoxF::new(0.0, 0.0, 64.0, 64.0); // upper-left quarter
        let grids = [8];
        // Select only the lower-right quarter cells.
        let sel = SelectionSet {
            per_scale: vec![(0..64).filter(|i| i / 8 >= 4 && i % 8 >= 4).collect()],
            k_used: vec![16],
        };
        let r = recall_eval(&sel, &[bbox], &grids, 256, 256).unwrap();
        assert_eq!(r, Some(0.0));
    }

    #[test]
    fn no_inbox_cells_reports_absent() {
        // Tiny box between all 2x2 cell centers.
        let bbox = BoxF::new(120.0, 120.0, 136.0, 136.0);
        let sel = SelectionSet::empty(1);
        let r = recall_eval(&sel, &[bbox], &[2], 256, 256).unwrap();
        assert_eq!(r, None);
    }

    #[test]
    fn random_selection_recall_tracks_fraction() {
        // Expected recall of a uniform random selection at fraction f is f.
        let grids = [16, 32];
        let bbox = BoxF::new(40.0, 40.0, 140.0, 140.0);
        for &fraction in &[0.2, 0.44, 0.7] {
            let mut rng = Rng::seed_from(223);
            let mut acc = 0.0;
            let trials = 1000;
            for _ in 0..trials {
                let sel = random_selection(&grids, fraction, &mut rng);
                acc += recall_eval(&sel, &[bbox], &grids, 256, 256)
                    .unwrap()
                    .expect("box covers centers");
            }
            let mean = acc / trials as f64;
            assert!(
                (mean - fraction).abs() < 0.05,
                "fraction {fraction}: mean recall {mean}"
            );
        }
    }

    #[test]
    fn recall_monotone_in_k() {
        // Growing a selection never lowers recall.
        let grids = [8];
        let bbox = BoxF::new(10.0, 10.0, 120.0, 120.0);
        let mut rng = Rng::seed_from(227);
        let scores: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
        let mut prev = 0.0;
        for k in 1..=64 {
            let top = crate::tensor::top_k(&scores, k);
            let sel = SelectionSet {
                per_scale: vec![top.indices],
                k_used: vec![k],
            };
            let r = recall_eval(&sel, &[bbox], &grids, 256, 256)
                .unwrap()
                .unwrap();
            assert!(r >= prev - 1e-12);
            prev = r;
        }
    }
}
