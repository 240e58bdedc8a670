//! Deterministic visualization emitters: score heatmaps, selection
//! overlays, and PCA-colored token maps.

use crate::encoder::{Provenance, ScoreGrid, ScoreMap, SelectionSet};
use crate::error::{Error, Result};
use crate::pyramid::ImagePyramid;
use crate::raster::RasterImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear blue-to-red colormap: value 0 maps to pure blue, 1 to pure red,
/// green stays 0. Scores are first normalized by the map's provenance range
/// ([-1, 1] predicted, [0, 1] ground truth) and clamped.
fn colormap(t: f64) -> [f32; 3] {
    let c = t.clamp(0.0, 1.0) as f32;
    [c, 0.0, 1.0 - c]
}

/// Render one score grid as an image; every cell becomes a square block of
/// max(1, ceil(128 / side)) pixels so small grids stay visible.
pub fn render_score_heatmap<T: Scalar>(
    grid: &ScoreGrid<T>,
    provenance: Provenance,
) -> RasterImage {
    let (lo, hi) = match provenance {
        Provenance::Predicted => (-1.0, 1.0),
        Provenance::GroundTruth => (0.0, 1.0),
    };
    let cell_px = (128usize).div_ceil(grid.side).max(1);
    let side_px = grid.side * cell_px;
    let mut img = RasterImage::new(side_px, side_px);
    for r in 0..grid.side {
        for c in 0..grid.side {
            let v = grid.data[r * grid.side + c].to_f64();
            let rgb = colormap((v - lo) / (hi - lo));
            for dy in 0..cell_px {
                for dx in 0..cell_px {
                    img.set_pixel(c * cell_px + dx, r * cell_px + dy, rgb);
                }
            }
        }
    }
    img
}

pub fn render_heatmaps<T: Scalar>(map: &ScoreMap<T>) -> Vec<RasterImage> {
    map.grids
        .iter()
        .map(|g| render_score_heatmap(g, map.provenance))
        .collect()
}

/// Selection overlay: one panel per scale (that scale's image with
/// unselected patch cells darkened to a quarter of their brightness),
/// stacked vertically and right-padded with black to the widest panel.
pub fn render_selection_overlay(pyr: &ImagePyramid, selection: &SelectionSet) -> Result<RasterImage> {
    if selection.per_scale.len() != pyr.scales.len() {
        return Err(Error::Dimension(format!(
            "selection covers {} scales, pyramid has {}",
            selection.per_scale.len(),
            pyr.scales.len()
        )));
    }
    let width = pyr.scales.iter().map(|s| s.width).max().unwrap_or(0);
    let height: usize = pyr.scales.iter().map(|s| s.height).sum();
    let mut out = RasterImage::new(width, height);
    let mut y_off = 0usize;
    for (s, img) in pyr.scales.iter().enumerate() {
        let grid = img.width / pyr.patch_side;
        let selected: std::collections::HashSet<usize> =
            selection.per_scale[s].iter().copied().collect();
        for y in 0..img.height {
            for x in 0..img.width {
                let cell = (y / pyr.patch_side) * grid + x / pyr.patch_side;
                let p = img.pixel(x, y);
                let p = if selected.contains(&cell) {
                    p
                } else {
                    [p[0] * 0.25, p[1] * 0.25, p[2] * 0.25]
                };
                out.set_pixel(x, y_off + y, p);
            }
        }
        y_off += img.height;
    }
    Ok(out)
}

/// Project tokens onto their top three principal components and normalize
/// each channel to [0, 1]; rank-deficient directions render as flat 0.5.
///
/// Components come from deterministic power iteration with deflation on the
/// token covariance. The sign of each component is fixed from the
/// projections (largest-magnitude score positive), which makes the output
/// invariant to flipping every input feature.
pub fn pca_features<T: Scalar>(tokens: &Tensor<T>, components: usize) -> Result<Vec<Vec<f64>>> {
    let (n, d) = tokens.dims2()?;
    if n < 3 {
        return Err(Error::Argument(format!(
            "pca needs at least 3 tokens, got {n}"
        )));
    }
    let comps = components.min(3);
    let data: Vec<f64> = tokens.data().iter().map(|v| v.to_f64()).collect();
    let mut mean = vec![0.0f64; d];
    for row in 0..n {
        for c in 0..d {
            mean[c] += data[row * d + c];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<f64> = (0..n * d)
        .map(|i| data[i] - mean[i % d])
        .collect();
    // Covariance (biased).
    let mut cov = vec![0.0f64; d * d];
    for row in 0..n {
        let r = &centered[row * d..(row + 1) * d];
        for i in 0..d {
            if r[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    for c in &mut cov {
        *c /= n as f64;
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let tiny = trace.max(1e-300) * 1e-9;

    let mut out = vec![vec![0.5f64; comps]; n];
    let mut work = cov;
    let mut start_rng = crate::rng::Rng::seed_from(0x9e3779b97f4a7c15);
    for comp in 0..comps {
        // Fixed-count power iteration from a deterministic start vector.
        let mut v: Vec<f64> = (0..d).map(|_| start_rng.range_f64(-1.0, 1.0)).collect();
        normalize(&mut v);
        for _ in 0..256 {
            let mut nv = vec![0.0f64; d];
            for i in 0..d {
                let row = &work[i * d..(i + 1) * d];
                nv[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            normalize(&mut nv);
            v = nv;
        }
        // Rayleigh quotient as the eigenvalue estimate.
        let mut av = vec![0.0f64; d];
        for i in 0..d {
            av[i] = work[i * d..(i + 1) * d]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        let lambda: f64 = av.iter().zip(&v).map(|(a, b)| a * b).sum();
        if lambda <= tiny {
            break; // remaining directions are rank-deficient: leave 0.5
        }
        // Token scores along this component.
        let mut scores: Vec<f64> = (0..n)
            .map(|row| {
                centered[row * d..(row + 1) * d]
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        // Sign fix: the largest-magnitude score is positive (lowest token
        // index on ties), so flipping all inputs cannot change the output.
        let mut flip = 1.0;
        let mut best = 0.0f64;
        for &s in &scores {
            if s.abs() > best {
                best = s.abs();
                flip = if s < 0.0 { -1.0 } else { 1.0 };
            }
        }
        for s in &mut scores {
            *s *= flip;
        }
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (row, s) in scores.iter().enumerate() {
            out[row][comp] = (s - lo) / span;
        }
        // Deflate.
        for i in 0..d {
            for j in 0..d {
                work[i * d + j] -= lambda * v[i] * v[j];
            }
        }
    }
    Ok(out)
}

fn normalize(v: &mut [f64]) {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
}
