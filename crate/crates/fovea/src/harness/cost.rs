//! Analytic token and FLOP accounting.
//!
//! FLOPs count multiply-accumulate-dominated terms only (2*m*k*n per matmul
//! and the conv equivalent); normalization, softmax, activations and
//! pooling are excluded. Wall-clock is deliberately not measured: the
//! constant-cost property is architectural and desk hardware variance would
//! drown it.

use crate::encoder::{EncoderConfig, SelectionSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub selected_per_scale: Vec<usize>,
    /// Tokens handed downstream after the 2x2 downsampling connector:
    /// floor(total selected / 4).
    pub hr_tokens: usize,
    pub lowres_tokens: usize,
    pub stage1_flops: u64,
    pub aux_flops: u64,
    pub stage3_flops: u64,
}

/// Transformer FLOPs for `n` query tokens attending over `kv` keys/values.
fn vit_flops(cfg: &EncoderConfig, n: u64, kv: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let d = cfg.embed_dim as u64;
    let layers = cfg.num_layers as u64;
    // Per layer: q,k,v,o projections + attention scores/apply + 4x MLP.
    let proj = 4 * 2 * n * d * d;
    let attn = 2 * 2 * n * kv * d;
    let mlp = 2 * 2 * n * d * 4 * d;
    layers * (proj + attn + mlp)
}

fn patch_embed_flops(cfg: &EncoderConfig, n: u64) -> u64 {
    2 * n * cfg.patch_dim() as u64 * cfg.embed_dim as u64
}

/// Per-stage FLOP estimates for a given selection. Stage 3 depends only on
/// the selected-patch total and the low-res token count, never on the
/// pyramid resolution.
pub fn flop_estimate(cfg: &EncoderConfig, selection: &SelectionSet) -> (u64, u64, u64) {
    let n_low = cfg.low_cells() as u64;
    let stage1 = patch_embed_flops(cfg, n_low) + vit_flops(cfg, n_low, n_low);

    let mut aux = 0u64;
    let mut side = cfg.aux_input_side() as u64;
    let mut cin = 3u64;
    for b in 0..cfg.aux_blocks {
        let cout = EncoderConfig::aux_width(b) as u64;
        aux += 2 * side * side * 9 * cin; // depthwise 3x3
        aux += 2 * side * side * cin * cout; // pointwise
        side /= 2;
        cin = cout;
    }
    aux += 2 * side * side * cin * cfg.embed_dim as u64; // projection

    let total: u64 = selection.total() as u64;
    let stage3 = if total == 0 {
        0
    } else {
        patch_embed_flops(cfg, total) + vit_flops(cfg, total, n_low + total)
    };
    (stage1, aux, stage3)
}

/// Exact token accounting for a selection under a config.
pub fn count_tokens(cfg: &EncoderConfig, selection: &SelectionSet) -> Result<CostReport> {
    let cells = cfg.cells_per_scale();
    if selection.per_scale.len() != cells.len() {
        return Err(Error::Dimension(format!(
            "selection covers {} scales, config has {}",
            selection.per_scale.len(),
            cells.len()
        )));
    }
    for (s, (list, &c)) in selection.per_scale.iter().zip(&cells).enumerate() {
        if list.iter().any(|&i| i >= c) {
            return Err(Error::Dimension(format!(
                "selection index out of range at scale {s}"
            )));
        }
    }
    let total = selection.total();
    let (stage1, aux, stage3) = flop_estimate(cfg, selection);
    Ok(CostReport {
        selected_per_scale: selection.k_used.clone(),
        hr_tokens: total / 4,
        lowres_tokens: cfg.low_cells(),
        stage1_flops: stage1,
        aux_flops: aux,
        stage3_flops: stage3,
    })
}

/// Selection placeholder with the first `k` cells of each scale marked;
/// counting only needs the sizes.
pub fn selection_of_counts(cfg: &EncoderConfig, counts: &[usize]) -> Result<SelectionSet> {
    let cells = cfg.cells_per_scale();
    if counts.len() != cells.len() {
        return Err(Error::Dimension(format!(
            "{} counts for {} scales",
            counts.len(),
            cells.len()
        )));
    }
    let per_scale: Vec<Vec<usize>> = counts
        .iter()
        .zip(&cells)
        .map(|(&k, &c)| {
            if k > c {
                Err(Error::Argument(format!("count {k} exceeds {c} cells")))
            } else {
                Ok((0..k).collect())
            }
        })
        .collect::<Result<_>>()?;
    Ok(SelectionSet {
        k_used: counts.to_vec(),
        per_scale,
    })
}
