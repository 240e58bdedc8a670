//! Selection-score maps, patch-selection sets, and the budget allocators.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::top_k;

/// One square grid of scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrid<T> {
    pub side: usize,
    /// Row-major, side * side values.
    pub data: Vec<T>,
}

impl<T: Scalar> ScoreGrid<T> {
    pub fn new(side: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::Dimension(format!(
                "score grid side {side} expects {} values, got {}",
                side * side,
                data.len()
            )));
        }
        Ok(ScoreGrid { side, data })
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Cosine scores in [-1, 1].
    Predicted,
    /// Box-derived {0, 1} scores.
    GroundTruth,
}

/// Per-scale grids of selection scores.
#[derive(Clone, Debug)]
pub struct ScoreMap<T> {
    pub grids: Vec<ScoreGrid<T>>,
    pub provenance: Provenance,
    /// Per-scale flag set when a ground-truth box covered no cell center at
    /// that scale (the grid is all-zero).
    pub empty_scales: Vec<bool>,
}

impl<T: Scalar> ScoreMap<T> {
    pub fn predicted(grids: Vec<ScoreGrid<T>>) -> Self {
        let n = grids.len();
        ScoreMap {
            grids,
            provenance: Provenance::Predicted,
            empty_scales: vec![false; n],
        }
    }

    pub fn grid_sides(&self) -> Vec<usize> {
        self.grids.iter().map(|g| g.side).collect()
    }
}

/// Per-scale sorted lists of selected grid indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionSet {
    /// Unique ascending indices per scale, each < side^2 of that scale.
    pub per_scale: Vec<Vec<usize>>,
    /// k actually used per scale (length of each index list).
    pub k_used: Vec<usize>,
}

impl SelectionSet {
    pub fn empty(n_scales: usize) -> Self {
        SelectionSet {
            per_scale: vec![Vec::new(); n_scales],
            k_used: vec![0; n_scales],
        }
    }

    pub fn total(&self) -> usize {
        self.k_used.iter().sum()
    }
}

/// Split `total_k` across scales proportionally to cell counts, using
/// largest-remainder rounding so the parts sum exactly to `total_k`.
/// Remainder ties go to the earlier scale.
pub fn allocate_k(total_k: usize, cells: &[usize]) -> Result<Vec<usize>> {
    let total_cells: usize = cells.iter().sum();
    if total_k > total_cells {
        return Err(Error::Argument(format!(
            "total_k {total_k} exceeds {total_cells} available cells"
        )));
    }
    if cells.is_empty() {
        return Ok(Vec::new());
    }
    let mut ks: Vec<usize> = Vec::with_capacity(cells.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(cells.len());
    let mut assigned = 0usize;
    for (i, &c) in cells.iter().enumerate() {
        let quota = total_k as f64 * c as f64 / total_cells as f64;
        let k = quota.floor() as usize;
        ks.push(k);
        assigned += k;
        remainders.push((i, quota - k as f64));
    }
    // Distribute the shortfall to the largest remainders, earlier scale on ties.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut left = total_k - assigned;
    for (i, _) in remainders {
        if left == 0 {
            break;
        }
        if ks[i] < cells[i] {
            ks[i] += 1;
            left -= 1;
        }
    }
    Ok(ks)
}

/// Per-scale top-k selection. The sum of requested k must not exceed `cap`;
/// the multi-round path handles larger budgets. A requested k above a
/// scale's cell count is capped to the cell count.
pub fn select_patches<T: Scalar>(
    score: &ScoreMap<T>,
    k_per_scale: &[usize],
    cap: usize,
) -> Result<SelectionSet> {
    if k_per_scale.len() != score.grids.len() {
        return Err(Error::Dimension(format!(
            "{} k values for {} scales",
            k_per_scale.len(),
            score.grids.len()
        )));
    }
    let requested: usize = k_per_scale
        .iter()
        .zip(&score.grids)
        .map(|(&k, g)| k.min(g.cells()))
        .sum();
    if requested > cap {
        return Err(Error::Argument(format!(
            "selection of {requested} patches exceeds per-round cap {cap}"
        )));
    }
    let mut per_scale = Vec::with_capacity(score.grids.len());
    let mut k_used = Vec::with_capacity(score.grids.len());
    for (grid, &k) in score.grids.iter().zip(k_per_scale) {
        let picked = top_k(&grid.data, k.min(grid.cells()));
        k_used.push(picked.indices.len());
        per_scale.push(picked.indices);
    }
    Ok(SelectionSet { per_scale, k_used })
}

/// Rank every cell of every scale by (score desc, scale asc, index asc) and
/// chunk the top `total_k` into rounds of at most `cap`. Already-selected
/// cells are excluded from later rounds by masking their score to -inf.
pub fn select_rounds<T: Scalar>(
    score: &ScoreMap<T>,
    total_k: usize,
    cap: usize,
) -> Result<Vec<SelectionSet>> {
    let n_scales = score.grids.len();
    let total_cells: usize = score.grids.iter().map(ScoreGrid::cells).sum();
    if total_k > total_cells {
        return Err(Error::Argument(format!(
            "total_k {total_k} exceeds {total_cells} cells"
        )));
    }
    if cap == 0 {
        return Err(Error::Argument("per-round cap of zero".into()));
    }
    let mut masked: Vec<Vec<T>> = score.grids.iter().map(|g| g.data.clone()).collect();
    let mut rounds = Vec::new();
    let mut remaining = total_k;
    while remaining > 0 {
        let take = remaining.min(cap);
        // Global ranking over all unmasked cells.
        let mut order: Vec<(usize, usize)> = Vec::new();
        for (s, grid) in masked.iter().enumerate() {
            for (i, &v) in grid.iter().enumerate() {
                if v > T::neg_infinity() {
                    order.push((s, i));
                }
            }
        }
        order.sort_by(|&(sa, ia), &(sb, ib)| {
            masked[sb][ib]
                .partial_cmp(&masked[sa][ia])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(sa.cmp(&sb))
                .then(ia.cmp(&ib))
        });
        let mut set = SelectionSet::empty(n_scales);
        for &(s, i) in order.iter().take(take) {
            set.per_scale[s].push(i);
            masked[s][i] = T::neg_infinity();
        }
        for (s, list) in set.per_scale.iter_mut().enumerate() {
            list.sort_unstable();
            set.k_used[s] = list.len();
        }
        rounds.push(set);
        remaining -= take;
    }
    Ok(rounds)
}
