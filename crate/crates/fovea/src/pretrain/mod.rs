//! Pre-training: batch construction, losses, optimizer, and the training
//! loop with every algorithm design exposed as a switchable ablation.

pub mod batch;
pub mod losses;
pub mod optim;
pub mod run;

pub use batch::{build_batch, BatchSample, TrainBatch};
pub use losses::{
    bottom_up_gt, ground_truth_score_map, in_box_cells, selection_loss, selection_loss_parts,
    selection_loss_value, sigmoid_contrastive_loss, sigmoid_contrastive_reference,
};
pub use optim::{lr_at, AdamW};
pub use run::{batch_loss, build_batch_loss, pretrain_step, train_loop, EvalReport, LoadedDataset, StepMetrics, TrainSummary};

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

/// Training hyperparameters. The structured-text config file holds one
/// `key = value` pair per line; `#` starts a comment. Unknown keys are
/// rejected by name.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Fraction of each batch paired with global captions.
    pub global_ratio: f64,
    /// Total patches selected per local sample during training, split
    /// across scales proportionally to their cell counts. Deliberately
    /// larger than a typical box so selection overshoots and in-box
    /// pooling has something to mask.
    pub train_select_total: usize,
    pub contrastive_weight: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    /// Initial contrastive temperature T; the learnable parameter is
    /// t' = ln T.
    pub temperature_init: f64,
    pub bias_init: f64,
    pub seed: u64,
    pub eval_interval: usize,
    /// Held-out regions scored per evaluation.
    pub eval_regions: usize,
    pub checkpoint_interval: usize,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            samples_per_epoch: 2000,
            batch_size: 8,
            learning_rate: 3e-4,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 3e-4,
            global_ratio: 0.25,
            train_select_total: 80,
            contrastive_weight: 1.0,
            ce_weight: 1.0,
            dice_weight: 1.0,
            temperature_init: 10.0,
            bias_init: -10.0,
            seed: 0,
            eval_interval: 200,
            eval_regions: 32,
            checkpoint_interval: 1000,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.samples_per_epoch / self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.samples_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs, samples_per_epoch, batch_size must be positive".into(),
            ));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.global_ratio) {
            return Err(Error::Config("global_ratio must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0, 1)".into()));
        }
        if self.temperature_init <= 0.0 {
            return Err(Error::Config("temperature_init must be positive".into()));
        }
        if self.train_select_total == 0 {
            return Err(Error::Config("train_select_total must be positive".into()));
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config(
                "eval_interval and checkpoint_interval must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn from_text(text: &str, path: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (key, value, lineno) in parse_kv(text, path)? {
            let bad = |what: &str| Error::Config(format!("{path}:{lineno}: field {key}: {what}"));
            macro_rules! set {
                ($field:ident, $ty:ty) => {
                    cfg.$field = value
                        .parse::<$ty>()
                        .map_err(|_| bad(&format!("cannot parse '{value}'")))?
                };
            }
            match key.as_str() {
                "epochs" => set!(epochs, usize),
                "samples_per_epoch" => set!(samples_per_epoch, usize),
                "batch_size" => set!(batch_size, usize),
                "learning_rate" => set!(learning_rate, f64),
                "warmup_steps" => set!(warmup_steps, usize),
                "beta1" => set!(beta1, f64),
                "beta2" => set!(beta2, f64),
                "weight_decay" => set!(weight_decay, f64),
                "global_ratio" => set!(global_ratio, f64),
                "train_select_total" => set!(train_select_total, usize),
                "contrastive_weight" => set!(contrastive_weight, f64),
                "ce_weight" => set!(ce_weight, f64),
                "dice_weight" => set!(dice_weight, f64),
                "temperature_init" => set!(temperature_init, f64),
                "bias_init" => set!(bias_init, f64),
                "seed" => set!(seed, u64),
                "eval_interval" => set!(eval_interval, usize),
                "eval_regions" => set!(eval_regions, usize),
                "checkpoint_interval" => set!(checkpoint_interval, usize),
                "holdout_fraction" => set!(holdout_fraction, f64),
                other => {
                    return Err(Error::Config(format!(
                        "{path}:{lineno}: unknown field '{other}'"
                    )));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `key = value` lines with `#` comments; returns (key, value, line).
pub fn parse_kv(text: &str, path: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!(
            "{path}:{}: expected 'key = value', got '{raw}'",
            i + 1
        )))?;
        let key = k.trim().to_string();
        if let Some(prev) = seen.insert(key.clone(), i + 1) {
            return Err(Error::Config(format!(
                "{path}:{}: field '{key}' already set on line {prev}",
                i + 1
            )));
        }
        out.push((key, v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// The seven training/model designs, each switchable for ablation. Defaults
/// enable every design (and forbid intra-image contrast).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    /// Teacher forcing: select from the box-derived score map instead of
    /// the predicted one.
    pub gt_selection: bool,
    /// Pool only tokens inside the ground-truth box.
    pub inbox_pool: bool,
    /// Mix global-caption pairs into each batch.
    pub mix_global: bool,
    /// Allow one image to appear multiple times in a batch.
    pub allow_intra_image: bool,
    /// Select across all scales rather than only the finest.
    pub multi_scale: bool,
    /// Add the per-scale positional offset.
    pub scale_pe: bool,
    /// Concatenate the low-res KV cache into stage-3 attention.
    pub kv_cache: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            gt_selection: true,
            inbox_pool: true,
            mix_global: true,
            allow_intra_image: false,
            multi_scale: true,
            scale_pe: true,
            kv_cache: true,
        }
    }
}

impl AblationFlags {
    pub const NAMES: [&'static str; 7] = [
        "gt-selection",
        "inbox-pool",
        "mix-global",
        "intra-image",
        "multi-scale",
        "scale-pe",
        "kv-cache",
    ];

    /// Toggle the named design away from its default.
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name {
            "gt-selection" => self.gt_selection = false,
            "inbox-pool" => self.inbox_pool = false,
            "mix-global" => self.mix_global = false,
            "intra-image" => self.allow_intra_image = true,
            "multi-scale" => self.multi_scale = false,
            "scale-pe" => self.scale_pe = false,
            "kv-cache" => self.kv_cache = false,
            other => {
                return Err(Error::Usage(format!(
                    "unknown ablation '{other}'; valid: {}",
                    Self::NAMES.join(", ")
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_round_trip_fields() {
        let text = "epochs = 3\nlearning_rate = 1e-3 # fast\nseed = 9\n";
        let cfg = TrainConfig::from_text(text, "t").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!((cfg.learning_rate - 1e-3).abs() < 1e-15);
        assert_eq!(cfg.seed, 9);
        // Untouched fields keep defaults.
        assert_eq!(cfg.batch_size, 8);
    }

    #[test]
    fn unknown_field_is_named_in_the_error() {
        let err = TrainConfig::from_text("warmup = 5\n", "t").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("warmup"), "{msg}");
    }

    #[test]
    fn duplicate_field_is_rejected() {
        assert!(TrainConfig::from_text("seed = 1\nseed = 2\n", "t").is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(TrainConfig::from_text("global_ratio = 1.5\n", "t").is_err());
        assert!(TrainConfig::from_text("batch_size = 0\n", "t").is_err());
    }

    #[test]
    fn every_ablation_name_toggles_something() {
        for name in AblationFlags::NAMES {
            let mut f = AblationFlags::default();
            f.ablate(name).unwrap();
            assert_ne!(f, AblationFlags::default(), "{name} had no effect");
        }
        assert!(AblationFlags::default().ablate("bogus").is_err());
    }
}
