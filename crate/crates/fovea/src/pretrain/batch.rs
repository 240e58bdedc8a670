//! Batch assembly: source-balanced sampling, the exact global/local mix,
//! and the one-image-per-batch rule.

use crate::datagen::{DatasetRecord, RegionKind, SourceTag};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{AblationFlags, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSample {
    pub record: usize,
    pub region: usize,
    pub kind: RegionKind,
}

/// One training batch: sample references plus the flags it honors.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub samples: Vec<BatchSample>,
    pub use_gt_selection: bool,
    pub inbox_pool_only: bool,
    pub allow_intra_image: bool,
    pub global_ratio: f64,
}

impl TrainBatch {
    pub fn global_count(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.kind == RegionKind::Global)
            .count()
    }
}

/// Records eligible as (source, kind) draws: a global draw needs a global
/// region with a non-empty caption, a local draw a captioned local region.
fn eligible(records: &[DatasetRecord], source: SourceTag, global: bool) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.source == source)
        .filter(|(_, r)| {
            if global {
                r.global_region()
                    .is_some_and(|gi| !r.regions[gi].caption.is_empty())
            } else {
                r.local_regions().any(|(_, reg)| !reg.caption.is_empty())
            }
        })
        .map(|(i, _)| i)
        .collect()
}

/// Draw one batch.
///
/// Exactly `round(global_ratio * batch_size)` global samples come first
/// (zero when global mixing is ablated). Every draw first picks a source
/// uniformly (natural or document), then a record uniformly within that
/// source's eligible pool, so both sources are equally likely regardless of
/// their dataset share; a source with no eligible records is skipped. When
/// intra-image contrast is disallowed, draws that repeat an already-used
/// image are rejected and retried, so each image appears at most once.
pub fn build_batch(
    records: &[DatasetRecord],
    cfg: &TrainConfig,
    flags: &AblationFlags,
    rng: &mut Rng,
) -> Result<TrainBatch> {
    if records.is_empty() {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    let allow_intra = flags.allow_intra_image;
    let global_ratio = if flags.mix_global { cfg.global_ratio } else { 0.0 };
    let n_global = (global_ratio * cfg.batch_size as f64).round() as usize;

    let pools = [
        (eligible(records, SourceTag::Natural, true), true),
        (eligible(records, SourceTag::Document, true), true),
        (eligible(records, SourceTag::Natural, false), false),
        (eligible(records, SourceTag::Document, false), false),
    ];
    let pool_for = |source: SourceTag, global: bool| -> &Vec<usize> {
        match (source, global) {
            (SourceTag::Natural, true) => &pools[0].0,
            (SourceTag::Document, true) => &pools[1].0,
            (SourceTag::Natural, false) => &pools[2].0,
            (SourceTag::Document, false) => &pools[3].0,
        }
    };

    let mut used: Vec<bool> = vec![false; records.len()];
    let mut samples = Vec::with_capacity(cfg.batch_size);
    for slot in 0..cfg.batch_size {
        let want_global = slot < n_global;
        // The source coin is tossed once per slot so each source keeps an
        // exact 1/2 marginal; the record is then drawn uniformly from that
        // source's available pool. A source with nothing available hands
        // the slot to the other one (documents carry no global captions).
        let first = if rng.below(2) == 0 {
            SourceTag::Natural
        } else {
            SourceTag::Document
        };
        let second = match first {
            SourceTag::Natural => SourceTag::Document,
            SourceTag::Document => SourceTag::Natural,
        };
        let mut rec_idx = None;
        for source in [first, second] {
            let available: Vec<usize> = pool_for(source, want_global)
                .iter()
                .copied()
                .filter(|&i| allow_intra || !used[i])
                .collect();
            if !available.is_empty() {
                rec_idx = Some(available[rng.below(available.len())]);
                break;
            }
        }
        let Some(rec_idx) = rec_idx else {
            return Err(Error::Data(format!(
                "batch construction stalled at slot {slot}: no record can serve a {} \
                 sample for batch_size {} with one image per batch",
                if want_global { "global" } else { "local" },
                cfg.batch_size
            )));
        };
        let rec = &records[rec_idx];
        let region = if want_global {
            rec.global_region().expect("eligibility checked")
        } else {
            let locals: Vec<usize> = rec
                .local_regions()
                .filter(|(_, r)| !r.caption.is_empty())
                .map(|(i, _)| i)
                .collect();
            locals[rng.below(locals.len())]
        };
        used[rec_idx] = true;
        samples.push(BatchSample {
            record: rec_idx,
            region,
            kind: if want_global {
                RegionKind::Global
            } else {
                RegionKind::Local
            },
        });
    }
    Ok(TrainBatch {
        samples,
        use_gt_selection: flags.gt_selection,
        inbox_pool_only: flags.inbox_pool,
        allow_intra_image: allow_intra,
        global_ratio,
    })
}
