//! Training losses: box-derived ground-truth score maps, the pairwise
//! sigmoid contrastive loss, and the cross-entropy + soft-overlap selection
//! supervision.

use crate::encoder::{Provenance, ScoreGrid, ScoreMap};
use crate::error::{Error, Result};
use crate::geom::BoxF;
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// {0,1} score map for one box: a cell is inside iff its center pixel is
/// inside the box (half-open). Scales where the box covers no cell center
/// come back all-zero with the scale flagged.
pub fn ground_truth_score_map<T: Scalar>(
    bbox: &BoxF,
    grids: &[usize],
    img_w: usize,
    img_h: usize,
) -> Result<ScoreMap<T>> {
    if !bbox.in_bounds(img_w as f64, img_h as f64) {
        return Err(Error::Argument(format!(
            "box ({}, {}, {}, {}) outside image {img_w}x{img_h}",
            bbox.x0, bbox.y0, bbox.x1, bbox.y1
        )));
    }
    let mut out_grids = Vec::with_capacity(grids.len());
    let mut empty = Vec::with_capacity(grids.len());
    for &g in grids {
        let mut data = vec![T::ZERO; g * g];
        let mut any = false;
        for r in 0..g {
            let cy = (r as f64 + 0.5) * img_h as f64 / g as f64;
            for c in 0..g {
                let cx = (c as f64 + 0.5) * img_w as f64 / g as f64;
                if bbox.contains(cx, cy) {
                    data[r * g + c] = T::ONE;
                    any = true;
                }
            }
        }
        out_grids.push(ScoreGrid::new(g, data)?);
        empty.push(!any);
    }
    Ok(ScoreMap {
        grids: out_grids,
        provenance: Provenance::GroundTruth,
        empty_scales: empty,
    })
}

/// Union (elementwise max) of the per-region ground-truth maps.
pub fn bottom_up_gt<T: Scalar>(
    boxes: &[BoxF],
    grids: &[usize],
    img_w: usize,
    img_h: usize,
) -> Result<ScoreMap<T>> {
    let mut acc: Option<ScoreMap<T>> = None;
    for bbox in boxes {
        let m = ground_truth_score_map::<T>(bbox, grids, img_w, img_h)?;
        acc = Some(match acc {
            None => m,
            Some(mut a) => {
                for (ag, mg) in a.grids.iter_mut().zip(&m.grids) {
                    for (av, &mv) in ag.data.iter_mut().zip(&mg.data) {
                        *av = av.maxs(mv);
                    }
                }
                for (ae, &me) in a.empty_scales.iter_mut().zip(&m.empty_scales) {
                    *ae = *ae && me;
                }
                a
            }
        });
    }
    acc.map_or_else(
        || {
            let g = grids
                .iter()
                .map(|&g| ScoreGrid::new(g, vec![T::ZERO; g * g]))
                .collect::<Result<Vec<_>>>()?;
            Ok(ScoreMap {
                grids: g,
                provenance: Provenance::GroundTruth,
                empty_scales: vec![true; grids.len()],
            })
        },
        Ok,
    )
}

/// Cells of the map that equal one, per scale; these are the teacher-forced
/// selection targets.
pub fn in_box_cells<T: Scalar>(map: &ScoreMap<T>) -> Vec<Vec<usize>> {
    map.grids
        .iter()
        .map(|g| {
            g.data
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == T::ONE)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Pairwise sigmoid contrastive loss over unit-normalized embeddings:
/// L = -(1/N) * sum_ij log sigmoid(z_ij * (t * <x_i, y_j> + b)) with
/// z_ii = +1 and z_ij = -1 off the diagonal. `t` and `b` are `[1]` tensors
/// (typically t = exp(t')), so gradients reach them as well.
pub fn sigmoid_contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    img_embs: TensorId,
    txt_embs: TensorId,
    t: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let (n, d) = tape.value(img_embs).dims2()?;
    let (nt, dt) = tape.value(txt_embs).dims2()?;
    if n != nt || d != dt {
        return Err(Error::Dimension(format!(
            "contrastive embeddings disagree: {n}x{d} vs {nt}x{dt}"
        )));
    }
    if n == 0 {
        return Err(Error::Argument("contrastive loss over zero pairs".into()));
    }
    let tt = tape.transpose(txt_embs)?;
    let sims = tape.matmul(img_embs, tt)?;
    let scaled = tape.mul_scalar_t(sims, t)?;
    let logits = tape.add_scalar_t(scaled, b)?;
    let mut sign = vec![T::from_f64(-1.0); n * n];
    for i in 0..n {
        sign[i * n + i] = T::ONE;
    }
    let z = tape.constant(Tensor::new(vec![n, n], sign)?);
    let zl = tape.mul(logits, z)?;
    let ls = tape.log_sigmoid(zl)?;
    let total = tape.sum(ls)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Straight-from-formula reference evaluation, kept independent of the tape
/// path for oracle tests and metrics.
pub fn sigmoid_contrastive_reference(
    img: &[Vec<f64>],
    txt: &[Vec<f64>],
    t: f64,
    b: f64,
) -> f64 {
    let n = img.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = img[i].iter().zip(&txt[j]).map(|(a, b)| a * b).sum();
            let z = if i == j { 1.0 } else { -1.0 };
            let x = z * (t * dot + b);
            // ln sigmoid(x), stable.
            total += x.min(0.0) - (-x.abs()).exp().ln_1p();
        }
    }
    -total / n as f64
}

/// Per-scale CE and soft-overlap losses between a predicted cosine map and
/// a binary ground-truth map, each averaged over scales. Predicted scores
/// map to probabilities via p = (score + 1) / 2.
pub fn selection_loss_parts<T: Scalar>(
    tape: &mut Tape<T>,
    pred_ids: &[TensorId],
    gt: &ScoreMap<T>,
) -> Result<(TensorId, TensorId)> {
    if pred_ids.len() != gt.grids.len() {
        return Err(Error::Dimension(format!(
            "{} predicted grids vs {} ground-truth grids",
            pred_ids.len(),
            gt.grids.len()
        )));
    }
    let mut ce_terms = Vec::with_capacity(pred_ids.len());
    let mut dice_terms = Vec::with_capacity(pred_ids.len());
    for (&pid, grid) in pred_ids.iter().zip(&gt.grids) {
        let shape = tape.value(pid).shape().to_vec();
        if shape != [grid.side, grid.side, 1] {
            return Err(Error::Dimension(format!(
                "predicted grid {shape:?} vs ground truth side {}",
                grid.side
            )));
        }
        let half = tape.scale(pid, 0.5)?;
        let p = tape.add_const(half, 0.5)?;
        let target = tape.constant(Tensor::new(
            vec![grid.side, grid.side, 1],
            grid.data.clone(),
        )?);
        ce_terms.push(tape.bce_mean(p, target)?);
        dice_terms.push(tape.dice(p, target, 1.0)?);
    }
    let ce = mean_of(tape, &ce_terms)?;
    let dice = mean_of(tape, &dice_terms)?;
    Ok((ce, dice))
}

/// CE + soft-overlap, averaged over scales: the combined selection
/// supervision for one (predicted, ground-truth) map pair.
pub fn selection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred_ids: &[TensorId],
    gt: &ScoreMap<T>,
) -> Result<TensorId> {
    let (ce, dice) = selection_loss_parts(tape, pred_ids, gt)?;
    tape.add(ce, dice)
}

/// Detached evaluation of [`selection_loss`] on plain score maps.
pub fn selection_loss_value<T: Scalar>(pred: &ScoreMap<T>, gt: &ScoreMap<T>) -> Result<f64> {
    let mut tape: Tape<T> = Tape::new();
    let ids: Vec<TensorId> = pred
        .grids
        .iter()
        .map(|g| {
            Tensor::new(vec![g.side, g.side, 1], g.data.clone()).map(|t| tape.constant(t))
        })
        .collect::<Result<_>>()?;
    let loss = selection_loss(&mut tape, &ids, gt)?;
    Ok(tape.value(loss).item()?.to_f64())
}

pub(crate) fn mean_of<T: Scalar>(tape: &mut Tape<T>, terms: &[TensorId]) -> Result<TensorId> {
    if terms.is_empty() {
        return Err(Error::Argument("mean of zero terms".into()));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}
