//! Stage 2: the light convolutional high-res encoder and the prompt-scored
//! selection maps.
//!
//! The aux encoder runs a few blocks of depthwise 3x3 conv + pointwise
//! expansion + activation + stride-2 downsample over the largest-but-one
//! scale, then projects to the embedding dimension so its features are
//! cosine-comparable with prompt embeddings. Low-res and high-res cosine
//! maps are bilinearly resampled to every target grid and averaged; an
//! optional Gaussian smoothing pass (off by default) spatially spreads high
//! scores.

use crate::error::{Error, Result};
use crate::pyramid::ImagePyramid;
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

use super::selection::{Provenance, ScoreGrid, ScoreMap};
use super::{EncoderConfig, Forward};

/// Features from the auxiliary encoder: a square grid of embed_dim vectors.
pub struct AuxFeatures {
    pub grid: usize,
    /// [grid*grid, embed_dim] on the tape.
    pub features: TensorId,
}

/// Selection scores per target grid: tape ids (for losses) plus detached
/// values (for top-k selection).
pub struct ScoredMaps<T> {
    /// One [g, g, 1] tensor per target grid.
    pub per_grid_ids: Vec<TensorId>,
    pub map: ScoreMap<T>,
}

impl<T: Scalar> Forward<'_, T> {
    /// Run the aux conv stack over the designated pyramid scale.
    pub fn aux_highres_encode(&mut self, pyr: &ImagePyramid) -> Result<AuxFeatures> {
        let cfg = &self.enc.cfg;
        let img = &pyr.scales[cfg.aux_scale_index()];
        if img.width != cfg.aux_input_side() {
            return Err(Error::Dimension(format!(
                "aux input side {} does not match config {}",
                img.width,
                cfg.aux_input_side()
            )));
        }
        let mut x = self.tape.constant(img.to_tensor());
        let mut cin = 3usize;
        for b in 0..cfg.aux_blocks {
            let dw = self.param(&format!("aux.{b}.dw"))?;
            let dwb = self.param(&format!("aux.{b}.dwb"))?;
            let pw = self.param(&format!("aux.{b}.pw"))?;
            let pwb = self.param(&format!("aux.{b}.pwb"))?;
            x = self.tape.conv2d(x, dw, 1, 1, cin)?;
            x = self.tape.add_bias(x, dwb)?;
            x = self.tape.conv2d(x, pw, 1, 0, 1)?;
            x = self.tape.add_bias(x, pwb)?;
            x = self.tape.gelu(x)?;
            x = self.tape.avg_pool2(x)?;
            cin = EncoderConfig::aux_width(b);
        }
        let grid = cfg.aux_input_side() >> cfg.aux_blocks;
        let flat = self.tape.reshape(x, vec![grid * grid, cin])?;
        let w = self.param("aux.proj.w")?;
        let bias = self.param("aux.proj.b")?;
        let proj = self.tape.matmul(flat, w)?;
        let features = self.tape.add_bias(proj, bias)?;
        Ok(AuxFeatures { grid, features })
    }

    /// Prompt-conditioned selection scores on every target grid.
    pub fn selection_score(
        &mut self,
        lowres_tokens: TensorId,
        aux: &AuxFeatures,
        prompt: TensorId,
        target_grids: &[usize],
        smoothing_sigma: Option<f64>,
    ) -> Result<ScoredMaps<T>> {
        let low_grid = self.enc.cfg.low_grid();
        selection_score_on(
            &mut self.tape,
            lowres_tokens,
            low_grid,
            aux.features,
            aux.grid,
            prompt,
            target_grids,
            smoothing_sigma,
        )
    }
}

/// Score combination on a bare tape: cosine(token, prompt) per low-res cell
/// and cosine(aux feature, prompt) per aux cell, both resampled to each
/// target grid and averaged. Zero-norm vectors score 0 by convention.
#[allow(clippy::too_many_arguments)]
pub fn selection_score_on<T: Scalar>(
    tape: &mut Tape<T>,
    lowres_tokens: TensorId,
    low_grid: usize,
    aux_features: TensorId,
    aux_grid: usize,
    prompt: TensorId,
    target_grids: &[usize],
    smoothing_sigma: Option<f64>,
) -> Result<ScoredMaps<T>> {
    let (n_low, d) = tape.value(lowres_tokens).dims2()?;
    let (n_aux, d_aux) = tape.value(aux_features).dims2()?;
    let (pr, d_p) = tape.value(prompt).dims2()?;
    if d_aux != d || d_p != d || pr != 1 {
        return Err(Error::Dimension(format!(
            "embed dims disagree: tokens {d}, aux {d_aux}, prompt {pr}x{d_p}"
        )));
    }
    if n_low != low_grid * low_grid || n_aux != aux_grid * aux_grid {
        return Err(Error::Dimension(
            "token count does not match grid side".into(),
        ));
    }
    let tn = tape.normalize_rows(lowres_tokens)?;
    let an = tape.normalize_rows(aux_features)?;
    let pn = tape.normalize_rows(prompt)?;
    let pt = tape.transpose(pn)?;
    let low_cos = tape.matmul(tn, pt)?;
    let low_map = tape.reshape(low_cos, vec![low_grid, low_grid, 1])?;
    let aux_cos = tape.matmul(an, pt)?;
    let aux_map = tape.reshape(aux_cos, vec![aux_grid, aux_grid, 1])?;

    let mut per_grid_ids = Vec::with_capacity(target_grids.len());
    let mut grids = Vec::with_capacity(target_grids.len());
    for &g in target_grids {
        let a = tape.interpolate_bilinear(low_map, g, g)?;
        let b = tape.interpolate_bilinear(aux_map, g, g)?;
        let sum = tape.add(a, b)?;
        let mut avg = tape.scale(sum, 0.5)?;
        if let Some(sigma) = smoothing_sigma {
            avg = gaussian_smooth(tape, avg, sigma)?;
        }
        per_grid_ids.push(avg);
        grids.push(ScoreGrid::new(g, tape.value(avg).data().to_vec())?);
    }
    let map = ScoreMap {
        grids,
        provenance: Provenance::Predicted,
        empty_scales: vec![false; target_grids.len()],
    };
    Ok(ScoredMaps { per_grid_ids, map })
}

/// Normalized Gaussian blur of a [g, g, 1] map, sigma in grid cells.
/// Zero-padded convolution followed by a per-cell renormalization so border
/// cells average only in-bounds weights.
pub fn gaussian_smooth<T: Scalar>(
    tape: &mut Tape<T>,
    map: TensorId,
    sigma: f64,
) -> Result<TensorId> {
    if sigma <= 0.0 {
        return Err(Error::Argument(format!("smoothing sigma {sigma} must be positive")));
    }
    let (g, gw, c) = tape.value(map).dims3()?;
    if gw != g || c != 1 {
        return Err(Error::Dimension("gaussian_smooth expects [g, g, 1]".into()));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let side = 2 * radius + 1;
    let mut weights = vec![0.0f64; side * side];
    let mut wsum = 0.0;
    for dy in 0..side {
        for dx in 0..side {
            let fy = dy as f64 - radius as f64;
            let fx = dx as f64 - radius as f64;
            let w = (-(fy * fy + fx * fx) / (2.0 * sigma * sigma)).exp();
            weights[dy * side + dx] = w;
            wsum += w;
        }
    }
    for w in &mut weights {
        *w /= wsum;
    }
    let kernel = tape.constant(Tensor::new(
        vec![side, side, 1, 1],
        weights.iter().map(|&w| T::from_f64(w)).collect(),
    )?);
    let blurred = tape.conv2d(map, kernel, 1, radius, 1)?;
    // In-bounds weight mass per cell, for edge renormalization.
    let mut renorm = vec![0.0f64; g * g];
    for y in 0..g {
        for x in 0..g {
            let mut mass = 0.0;
            for dy in 0..side {
                let sy = y as isize + dy as isize - radius as isize;
                if sy < 0 || sy >= g as isize {
                    continue;
                }
                for dx in 0..side {
                    let sx = x as isize + dx as isize - radius as isize;
                    if sx < 0 || sx >= g as isize {
                        continue;
                    }
                    mass += weights[dy * side + dx];
                }
            }
            renorm[y * g + x] = 1.0 / mass;
        }
    }
    let renorm_t = tape.constant(Tensor::new(
        vec![g, g, 1],
        renorm.iter().map(|&w| T::from_f64(w)).collect(),
    )?);
    tape.mul(blurred, renorm_t)
}
