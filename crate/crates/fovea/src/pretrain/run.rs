//! The training step, held-out evaluation, and the resumable training loop.

use crate::datagen::{read_dataset, DatasetRecord, RegionKind};
use crate::encoder::{
    allocate_k, select_patches, Encoder, Forward, HighResOpts, ScoreMap, SelectionSet,
};
use crate::error::{Error, Result};
use crate::pretrain::batch::{build_batch, TrainBatch};
use crate::pretrain::losses::{
    bottom_up_gt, ground_truth_score_map, in_box_cells, mean_of, selection_loss_parts,
    sigmoid_contrastive_loss,
};
use crate::pretrain::optim::{load_state, lr_at, save_state, AdamW};
use crate::pretrain::{AblationFlags, TrainConfig};
use crate::pyramid::ImagePyramid;
use crate::raster::RasterImage;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::TensorId;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One image quantized back to bytes; PPM pixels are 8-bit so this is
/// lossless and four times smaller than keeping floats resident.
struct CompactImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl CompactImage {
    fn from_raster(img: &RasterImage) -> CompactImage {
        CompactImage {
            width: img.width,
            height: img.height,
            data: img
                .data()
                .iter()
                .map(|&v| (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    fn to_raster(&self) -> RasterImage {
        let mut img = RasterImage::new(self.width, self.height);
        for (dst, &src) in img.data_mut().iter_mut().zip(&self.data) {
            *dst = f32::from(src) / 255.0;
        }
        img
    }
}

/// Records plus their images, held in memory for training.
pub struct LoadedDataset {
    pub records: Vec<DatasetRecord>,
    images: Vec<CompactImage>,
}

impl LoadedDataset {
    pub fn load(index_path: &Path) -> Result<LoadedDataset> {
        let records = read_dataset(index_path)?;
        let base = index_path.parent().unwrap_or_else(|| Path::new("."));
        let images = records
            .iter()
            .map(|r| Ok(CompactImage::from_raster(&RasterImage::read_ppm(&base.join(&r.image_path))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedDataset { records, images })
    }

    /// Build directly from in-memory pairs (tests, examples).
    pub fn from_parts(records: Vec<DatasetRecord>, images: Vec<RasterImage>) -> LoadedDataset {
        let images = images.iter().map(CompactImage::from_raster).collect();
        LoadedDataset { records, images }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, idx: usize) -> RasterImage {
        self.images[idx].to_raster()
    }

    pub fn pyramid(&self, idx: usize, cfg: &crate::encoder::EncoderConfig) -> Result<ImagePyramid> {
        ImagePyramid::build(
            &self.image(idx),
            cfg.low_res_side,
            cfg.patch_side,
            &cfg.scale_sides(),
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub loss_total: f64,
    pub loss_contrastive: f64,
    pub loss_ce: f64,
    pub loss_dice: f64,
    pub lr: f64,
}

/// Per-scale training budgets: a fixed total split proportionally across
/// scale cell counts (so selection overshoots small boxes and the in-box
/// pooling mask has work to do), pushed entirely to the finest scale when
/// multi-scale selection is ablated. Boxes holding more cells than the
/// budget get truncated later by the top-k tie rule.
fn selection_budget(
    total: usize,
    cap: usize,
    cells: &[usize],
    multi_scale: bool,
) -> Result<Vec<usize>> {
    let all: usize = cells.iter().sum();
    let budget = total.min(cap).min(all);
    if !multi_scale {
        let last = cells.len() - 1;
        let mut ks = vec![0; cells.len()];
        ks[last] = budget.min(cells[last]);
        return Ok(ks);
    }
    allocate_k(budget, cells)
}

/// Keep-mask over stage-3 tokens: true for selected cells inside the box.
/// Falls back to all-true when the selection misses the box entirely (only
/// possible without teacher forcing).
fn inbox_mask<T: Scalar>(selection: &SelectionSet, gt: &ScoreMap<T>) -> Vec<bool> {
    let mut mask = Vec::with_capacity(selection.total());
    for (s, indices) in selection.per_scale.iter().enumerate() {
        for &i in indices {
            mask.push(gt.grids[s].data[i] == T::ONE);
        }
    }
    if mask.iter().any(|&m| m) {
        mask
    } else {
        vec![true; mask.len()]
    }
}

struct SampleOutcome {
    img_emb: Option<TensorId>,
    txt_emb: Option<TensorId>,
    ce: Option<TensorId>,
    dice: Option<TensorId>,
}

/// Forward one sample: the contrastive pair plus top-down and bottom-up
/// selection supervision.
fn sample_forward<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    ds: &LoadedDataset,
    record_idx: usize,
    region_idx: usize,
    kind: RegionKind,
    select_total: usize,
    flags: &AblationFlags,
) -> Result<SampleOutcome> {
    let cfg = fwd.enc.cfg.clone();
    let rec = &ds.records[record_idx];
    let region = &rec.regions[region_idx];
    let pyr = ds.pyramid(record_idx, &cfg)?;
    let grids = cfg.scale_grids();

    let (tokens, cache) = fwd.encode_low_res(&pyr)?;
    let aux = fwd.aux_highres_encode(&pyr)?;
    let txt = fwd.text_encode(&region.caption)?;

    // Selection supervision. Top-down: this region's box against the map
    // conditioned on its caption. Bottom-up: all local boxes against the
    // saliency-prompt map.
    let gt = ground_truth_score_map::<T>(&region.bbox, &grids, rec.width, rec.height)?;
    let td_pred = fwd.selection_score(tokens, &aux, txt, &grids, None)?;
    let (td_ce, td_dice) = selection_loss_parts(&mut fwd.tape, &td_pred.per_grid_ids, &gt)?;
    let local_boxes: Vec<_> = rec.local_regions().map(|(_, r)| r.bbox).collect();
    let (ce, dice) = if local_boxes.is_empty() {
        (td_ce, td_dice)
    } else {
        let bu_gt = bottom_up_gt::<T>(&local_boxes, &grids, rec.width, rec.height)?;
        let bu_prompt = fwd.param("prompt.bottom_up")?;
        let bu_pred = fwd.selection_score(tokens, &aux, bu_prompt, &grids, None)?;
        let (bu_ce, bu_dice) = selection_loss_parts(&mut fwd.tape, &bu_pred.per_grid_ids, &bu_gt)?;
        (
            mean_of(&mut fwd.tape, &[td_ce, bu_ce])?,
            mean_of(&mut fwd.tape, &[td_dice, bu_dice])?,
        )
    };

    // Contrastive embedding.
    let img_emb = match kind {
        RegionKind::Global => {
            let n = cfg.low_cells();
            Some(fwd.attention_pool(tokens, &vec![true; n])?)
        }
        RegionKind::Local => {
            let any_inbox = in_box_cells(&gt).iter().any(|v| !v.is_empty());
            let ks = selection_budget(
                select_total,
                cfg.per_round_cap,
                &cfg.cells_per_scale(),
                flags.multi_scale,
            )?;
            if !any_inbox || ks.iter().sum::<usize>() == 0 {
                None // box covers no cell center at any scale
            } else {
                let selection = if flags.gt_selection {
                    select_patches(&gt, &ks, cfg.per_round_cap)?
                } else {
                    select_patches(&td_pred.map, &ks, cfg.per_round_cap)?
                };
                let hr = fwd.encode_high_res(
                    &pyr,
                    &selection,
                    &cache,
                    HighResOpts {
                        use_kv_cache: flags.kv_cache,
                        use_scale_pe: flags.scale_pe,
                    },
                )?;
                let mask = if flags.inbox_pool {
                    inbox_mask(&selection, &gt)
                } else {
                    vec![true; selection.total()]
                };
                Some(fwd.attention_pool(hr, &mask)?)
            }
        }
    };
    let img_emb = match img_emb {
        Some(id) => Some(fwd.tape.normalize_rows(id)?),
        None => None,
    };
    Ok(SampleOutcome {
        txt_emb: img_emb.is_some().then_some(txt),
        img_emb,
        ce: Some(ce),
        dice: Some(dice),
    })
}

/// Assemble the full batch loss on a forward pass: contrastive over the
/// pooled pairs plus the weighted CE and soft-overlap selection terms.
/// Returns the scalar's tape id and the loss components.
pub fn build_batch_loss<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    ds: &LoadedDataset,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    flags: &AblationFlags,
) -> Result<(crate::tape::TensorId, StepMetrics)> {
    let mut img_ids = Vec::new();
    let mut txt_ids = Vec::new();
    let mut ce_terms = Vec::new();
    let mut dice_terms = Vec::new();
    for sample in &batch.samples {
        let out = sample_forward(
            fwd,
            ds,
            sample.record,
            sample.region,
            sample.kind,
            cfg.train_select_total,
            flags,
        )?;
        if let (Some(i), Some(t)) = (out.img_emb, out.txt_emb) {
            img_ids.push(i);
            txt_ids.push(t);
        }
        if let Some(c) = out.ce {
            ce_terms.push(c);
        }
        if let Some(d) = out.dice {
            dice_terms.push(d);
        }
    }
    if img_ids.is_empty() {
        return Err(Error::Data(
            "batch produced no contrastive pairs (all boxes degenerate)".into(),
        ));
    }
    let img = fwd.tape.concat_rows(&img_ids)?;
    let txt = fwd.tape.concat_rows(&txt_ids)?;
    let t_prime = fwd.param("contrast.t_prime")?;
    let t = fwd.tape.exp(t_prime)?;
    let b = fwd.param("contrast.bias")?;
    let l_con = sigmoid_contrastive_loss(&mut fwd.tape, img, txt, t, b)?;
    let l_ce = mean_of(&mut fwd.tape, &ce_terms)?;
    let l_dice = mean_of(&mut fwd.tape, &dice_terms)?;

    let wc = fwd.tape.scale(l_con, cfg.contrastive_weight)?;
    let wce = fwd.tape.scale(l_ce, cfg.ce_weight)?;
    let wd = fwd.tape.scale(l_dice, cfg.dice_weight)?;
    let partial = fwd.tape.add(wc, wce)?;
    let total = fwd.tape.add(partial, wd)?;
    let m = StepMetrics {
        loss_total: fwd.tape.value(total).item()?.to_f64(),
        loss_contrastive: fwd.tape.value(l_con).item()?.to_f64(),
        loss_ce: fwd.tape.value(l_ce).item()?.to_f64(),
        loss_dice: fwd.tape.value(l_dice).item()?.to_f64(),
        lr: 0.0,
    };
    Ok((total, m))
}

/// Forward-only batch loss (gradient checks, ablation differentials).
pub fn batch_loss<T: Scalar>(
    enc: &Encoder<T>,
    ds: &LoadedDataset,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    flags: &AblationFlags,
) -> Result<StepMetrics> {
    let mut fwd = enc.forward();
    let (_, m) = build_batch_loss(&mut fwd, ds, batch, cfg, flags)?;
    Ok(m)
}

/// Run one optimization step over a batch. Returns the loss components;
/// aborts with a numeric error (and diagnostics) on non-finite loss.
pub fn pretrain_step<T: Scalar>(
    enc: &mut Encoder<T>,
    opt: &mut AdamW<T>,
    ds: &LoadedDataset,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    step: usize,
) -> Result<StepMetrics> {
    let (metrics, grads) = {
        let mut fwd = enc.forward();
        let (total, mut m) = build_batch_loss(&mut fwd, ds, batch, cfg, flags)?;
        m.lr = lr_at(step, cfg.learning_rate, cfg.warmup_steps);
        if !m.loss_total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: total {}, contrastive {}, ce {}, dice {}",
                m.loss_total, m.loss_contrastive, m.loss_ce, m.loss_dice
            )));
        }
        fwd.tape.backward(total)?;
        (m, fwd.param_grads())
    };
    opt.step(&mut enc.params, &grads, metrics.lr)?;
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalReport {
    /// Mean IoU of predicted top-down selection against in-box cells.
    pub iou: f64,
    /// Mean recall of in-box cells under predicted top-down selection.
    pub recall: f64,
    /// Top-1 retrieval accuracy among in-batch candidates.
    pub retrieval: f64,
    pub regions_scored: usize,
}

/// Predicted top-down selection quality on held-out local regions: select
/// with k = in-box cell count per scale from the predicted map, then score
/// IoU and recall against the in-box cells, pooled over scales.
pub fn eval_top_down<T: Scalar>(
    enc: &Encoder<T>,
    ds: &LoadedDataset,
    refs: &[(usize, usize)],
) -> Result<(f64, f64, usize)> {
    let cfg = &enc.cfg;
    let grids = cfg.scale_grids();
    let mut iou_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut scored = 0usize;
    for &(rec_idx, region_idx) in refs {
        let rec = &ds.records[rec_idx];
        let region = &rec.regions[region_idx];
        let gt = ground_truth_score_map::<T>(&region.bbox, &grids, rec.width, rec.height)?;
        let inbox = in_box_cells(&gt);
        let total_inbox: usize = inbox.iter().map(Vec::len).sum();
        if total_inbox == 0 {
            continue;
        }
        let mut fwd = enc.forward();
        let pyr = ds.pyramid(rec_idx, cfg)?;
        let (tokens, _cache) = fwd.encode_low_res(&pyr)?;
        let aux = fwd.aux_highres_encode(&pyr)?;
        let prompt = fwd.text_encode(&region.caption)?;
        let scored_maps = fwd.selection_score(tokens, &aux, prompt, &grids, None)?;
        let ks: Vec<usize> = inbox.iter().map(Vec::len).collect();
        let cap: usize = ks.iter().sum();
        let sel = select_patches(&scored_maps.map, &ks, cap)?;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (s, indices) in sel.per_scale.iter().enumerate() {
            let inbox_set: std::collections::HashSet<usize> = inbox[s].iter().copied().collect();
            let i = indices.iter().filter(|i| inbox_set.contains(i)).count();
            inter += i;
            union += indices.len() + inbox[s].len() - i;
        }
        iou_sum += inter as f64 / union.max(1) as f64;
        recall_sum += inter as f64 / total_inbox as f64;
        scored += 1;
    }
    if scored == 0 {
        return Ok((0.0, 0.0, 0));
    }
    Ok((iou_sum / scored as f64, recall_sum / scored as f64, scored))
}

/// In-batch retrieval over held-out local pairs: embed each (image, caption)
/// with the training path (teacher-forced selection, in-box pooling) and
/// count how often the matching caption wins the row.
pub fn eval_retrieval<T: Scalar>(
    enc: &Encoder<T>,
    ds: &LoadedDataset,
    refs: &[(usize, usize)],
    batch_size: usize,
    select_total: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if refs.len() < batch_size {
        return Ok(0.0);
    }
    let flags = AblationFlags::default();
    let n_batches = (refs.len() / batch_size).min(4);
    let mut hits = 0usize;
    let mut total = 0usize;
    for _ in 0..n_batches {
        let picks = rng.sample_distinct(refs.len(), batch_size);
        let mut embs: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(batch_size);
        for &p in &picks {
            let (rec_idx, region_idx) = refs[p];
            let mut fwd = enc.forward();
            let out = sample_forward(
                &mut fwd,
                ds,
                rec_idx,
                region_idx,
                RegionKind::Local,
                select_total,
                &flags,
            )?;
            let (Some(i), Some(t)) = (out.img_emb, out.txt_emb) else {
                continue;
            };
            let iv = fwd.tape.value(i).data().iter().map(|v| v.to_f64()).collect();
            let tv = fwd.tape.value(t).data().iter().map(|v| v.to_f64()).collect();
            embs.push((iv, tv));
        }
        for (i, (iv, _)) in embs.iter().enumerate() {
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for (j, (_, tv)) in embs.iter().enumerate() {
                let sim: f64 = iv.iter().zip(tv).map(|(a, b)| a * b).sum();
                if sim > best_sim {
                    best_sim = sim;
                    best = j;
                }
            }
            if best == i {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

pub struct TrainSummary {
    pub steps: usize,
    pub step0: EvalReport,
    pub final_eval: EvalReport,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn holdout_split(n: usize, fraction: f64) -> usize {
    let holdout = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    n - holdout
}

fn holdout_local_refs(ds: &LoadedDataset, split: usize) -> Vec<(usize, usize)> {
    (split..ds.len())
        .flat_map(|ri| {
            ds.records[ri]
                .local_regions()
                .filter(|(_, r)| !r.caption.is_empty())
                .map(move |(j, _)| (ri, j))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn run_eval(
    enc: &Encoder<f32>,
    ds: &LoadedDataset,
    refs: &[(usize, usize)],
    cfg: &TrainConfig,
    step: usize,
) -> Result<EvalReport> {
    let take = refs.len().min(cfg.eval_regions.max(1));
    let (iou, recall, scored) = eval_top_down(enc, ds, &refs[..take])?;
    let mut rng = Rng::seed_from(cfg.seed).derive(&format!("eval-{step}"));
    let retrieval = eval_retrieval(
        enc,
        ds,
        refs,
        cfg.batch_size.min(8),
        cfg.train_select_total,
        &mut rng,
    )?;
    Ok(EvalReport {
        iou,
        recall,
        retrieval,
        regions_scored: scored,
    })
}

/// Deterministic training over a loaded dataset. Writes `metrics.csv`,
/// rolling `ckpt_last.ckpt` + `train_state.bin` pairs for resumption, and
/// `ckpt_final.ckpt` at the end. Pass `resume = true` to continue an
/// interrupted run from the rolling pair.
pub fn train_loop(
    enc: &mut Encoder<f32>,
    ds: &LoadedDataset,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let split = holdout_split(ds.len(), cfg.holdout_fraction);
    let eval_refs = holdout_local_refs(ds, split);
    let total_steps = cfg.total_steps();
    let metrics_path = out_dir.join("metrics.csv");
    let last_ckpt = out_dir.join("ckpt_last.ckpt");
    let state_path = out_dir.join("train_state.bin");

    let mut opt = AdamW::new(&enc.params, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut batch_rng;
    let mut start_step = 0usize;
    let mut metrics_file;
    let mut step0 = EvalReport::default();

    if resume {
        let state = load_state(&state_path)?;
        let (ckpt_cfg, ckpt_params) = crate::encoder::params::load_checkpoint::<f32>(&last_ckpt)?;
        if ckpt_cfg != enc.cfg {
            return Err(Error::Config(
                "resume checkpoint was trained with a different encoder config".into(),
            ));
        }
        enc.params = ckpt_params;
        opt.restore(&state)?;
        batch_rng = Rng::restore(state.rng_state);
        start_step = state.step as usize;
        metrics_file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?;
    } else {
        // Contrastive scale/bias start from the configured values.
        *enc.params.get_mut("contrast.t_prime")? =
            crate::tensor::Tensor::scalar(cfg.temperature_init.ln() as f32);
        *enc.params.get_mut("contrast.bias")? =
            crate::tensor::Tensor::scalar(cfg.bias_init as f32);
        batch_rng = Rng::seed_from(cfg.seed).derive("batches");
        metrics_file = std::fs::File::create(&metrics_path)?;
        writeln!(
            metrics_file,
            "step,lr,loss_total,loss_contrastive,loss_ce,loss_dice,iou,recall,retrieval"
        )?;
        enc.save(&out_dir.join("ckpt_step0.ckpt"))?;
    }

    let train_records = &ds.records[..split];
    for step in start_step..total_steps {
        if step % cfg.eval_interval == 0 {
            let report = run_eval(enc, ds, &eval_refs, cfg, step)?;
            if step == 0 {
                step0 = report;
            }
            writeln!(
                metrics_file,
                "{step},,,,,,{:.6},{:.6},{:.6}",
                report.iou, report.recall, report.retrieval
            )?;
        }
        let batch = build_batch(train_records, cfg, flags, &mut batch_rng)?;
        let m = pretrain_step(enc, &mut opt, ds, &batch, cfg, flags, step)?;
        writeln!(
            metrics_file,
            "{},{:.8},{:.6},{:.6},{:.6},{:.6},,,",
            step + 1,
            m.lr,
            m.loss_total,
            m.loss_contrastive,
            m.loss_ce,
            m.loss_dice
        )?;
        if (step + 1) % cfg.checkpoint_interval == 0 || step + 1 == total_steps {
            enc.save(&last_ckpt)?;
            save_state(&state_path, (step + 1) as u64, batch_rng.state(), &opt)?;
        }
    }
    let final_eval = run_eval(enc, ds, &eval_refs, cfg, total_steps)?;
    writeln!(
        metrics_file,
        "{total_steps},,,,,,{:.6},{:.6},{:.6}",
        final_eval.iou, final_eval.recall, final_eval.retrieval
    )?;
    let final_ckpt = out_dir.join("ckpt_final.ckpt");
    enc.save(&final_ckpt)?;
    Ok(TrainSummary {
        steps: total_steps - start_step,
        step0,
        final_eval,
        metrics_path,
        checkpoint_path: final_ckpt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, SynthConfig};
    use crate::encoder::EncoderConfig;

    fn tiny_dataset(count: usize, dir_tag: &str) -> LoadedDataset {
        let dir = std::env::temp_dir().join(format!("fovea_run_test_{dir_tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        generate_dataset(
            &SynthConfig {
                count,
                seed: 5,
                ..SynthConfig::default()
            },
            &dir,
        )
        .unwrap();
        LoadedDataset::load(&dir.join("index.txt")).unwrap()
    }

    #[test]
    fn loss_is_finite_and_descends_on_a_frozen_batch() {
        let ds = tiny_dataset(24, "descent");
        let mut enc: Encoder<f32> = Encoder::new(EncoderConfig::desk(33)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 1,
            ..TrainConfig::default()
        };
        let mut flags = AblationFlags::default();
        flags.gt_selection = false; // descent check runs the predicted-selection path
        let mut rng = Rng::seed_from(197);
        let batch = build_batch(&ds.records, &cfg, &flags, &mut rng).unwrap();
        let mut opt = AdamW::new(&enc.params, cfg.beta1, cfg.beta2, cfg.weight_decay);
        let first = pretrain_step(&mut enc, &mut opt, &ds, &batch, &cfg, &flags, 0).unwrap();
        assert!(first.loss_total.is_finite());
        let mut last = first;
        for step in 1..3 {
            last = pretrain_step(&mut enc, &mut opt, &ds, &batch, &cfg, &flags, step).unwrap();
        }
        assert!(
            last.loss_total < first.loss_total,
            "3-step descent failed: {} -> {}",
            first.loss_total,
            last.loss_total
        );
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_identical() {
        let ds = tiny_dataset(24, "zerolr");
        let mut enc: Encoder<f32> = Encoder::new(EncoderConfig::desk(35)).unwrap();
        let before: Vec<Vec<f32>> = (0..enc.params.len())
            .map(|i| enc.params.at(i).1.data().to_vec())
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let flags = AblationFlags::default();
        let mut rng = Rng::seed_from(199);
        let batch = build_batch(&ds.records, &cfg, &flags, &mut rng).unwrap();
        let mut opt = AdamW::new(&enc.params, cfg.beta1, cfg.beta2, cfg.weight_decay);
        pretrain_step(&mut enc, &mut opt, &ds, &batch, &cfg, &flags, 500).unwrap();
        for i in 0..enc.params.len() {
            assert_eq!(enc.params.at(i).1.data(), &before[i][..], "param {i}");
        }
    }

    #[test]
    fn short_loop_runs_evaluates_and_checkpoints() {
        let ds = tiny_dataset(24, "loop");
        let mut enc: Encoder<f32> = Encoder::new(EncoderConfig::desk(37)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            samples_per_epoch: 24,
            batch_size: 8,
            eval_interval: 2,
            checkpoint_interval: 2,
            holdout_fraction: 0.25,
            ..TrainConfig::default()
        };
        let out = std::env::temp_dir().join("fovea_run_test_loop_out");
        let _ = std::fs::remove_dir_all(&out);
        let summary = train_loop(
            &mut enc,
            &ds,
            &cfg,
            &AblationFlags::default(),
            &out,
            false,
        )
        .unwrap();
        assert_eq!(summary.steps, 3);
        assert!(out.join("metrics.csv").exists());
        assert!(out.join("ckpt_final.ckpt").exists());
        assert!(out.join("ckpt_last.ckpt").exists());
        let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert!(text.lines().count() >= 5); // header + evals + 3 steps
        assert!(text.lines().all(|l| !l.contains("NaN")));
    }

    #[test]
    fn resume_continues_the_step_count() {
        let ds = tiny_dataset(24, "resume");
        let cfg = TrainConfig {
            epochs: 1,
            samples_per_epoch: 32,
            batch_size: 8,
            eval_interval: 100,
            checkpoint_interval: 2,
            holdout_fraction: 0.25,
            ..TrainConfig::default()
        };
        let out = std::env::temp_dir().join("fovea_run_test_resume_out");
        let _ = std::fs::remove_dir_all(&out);

        // Full run in one go.
        let mut enc_full: Encoder<f32> = Encoder::new(EncoderConfig::desk(39)).unwrap();
        let full_dir = out.join("full");
        train_loop(&mut enc_full, &ds, &cfg, &AblationFlags::default(), &full_dir, false).unwrap();

        // Interrupted run: stop after 2 steps (checkpoint_interval), resume.
        let mut enc_half: Encoder<f32> = Encoder::new(EncoderConfig::desk(39)).unwrap();
        let half_dir = out.join("half");
        let short_cfg = TrainConfig {
            epochs: 1,
            samples_per_epoch: 16, // 2 steps
            ..cfg.clone()
        };
        train_loop(&mut enc_half, &ds, &short_cfg, &AblationFlags::default(), &half_dir, false).unwrap();
        let resumed = train_loop(&mut enc_half, &ds, &cfg, &AblationFlags::default(), &half_dir, true).unwrap();
        assert_eq!(resumed.steps, 2); // steps 2..4

        // Resumed parameters match the uninterrupted run bit for bit.
        for i in 0..enc_full.params.len() {
            assert_eq!(
                enc_full.params.at(i).1.data(),
                enc_half.params.at(i).1.data(),
                "param {} diverged after resume",
                enc_full.params.at(i).0
            );
        }
    }
}
