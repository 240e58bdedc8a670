//! A short pre-training run: localized sigmoid-contrastive alignment with
//! teacher-forced selection, in-box pooling, global/local mixing, and
//! CE + overlap supervision of both selection heads. A few hundred steps
//! are enough to watch held-out selection IoU and in-batch retrieval move.
//!
//!     cargo run --release --example pretrain_quick

use fovea::datagen::{generate_dataset, SynthConfig};
use fovea::encoder::{Encoder, EncoderConfig};
use fovea::pretrain::run::LoadedDataset;
use fovea::pretrain::{train_loop, AblationFlags, TrainConfig};

fn main() -> fovea::Result<()> {
    let dir = std::env::temp_dir().join("fovea_example_pretrain");
    let _ = std::fs::remove_dir_all(&dir);
    generate_dataset(
        &SynthConfig {
            seed: 3,
            count: 300,
            ..SynthConfig::default()
        },
        &dir,
    )?;
    let ds = LoadedDataset::load(&dir.join("index.txt"))?;

    let cfg = TrainConfig {
        epochs: 1,
        samples_per_epoch: 3200, // 400 steps of batch 8
        eval_interval: 100,
        checkpoint_interval: 200,
        ..TrainConfig::default()
    };
    let mut enc: Encoder<f32> = Encoder::new(EncoderConfig::desk(cfg.seed))?;
    println!(
        "training {} steps on {} records ({} parameters)...",
        cfg.total_steps(),
        ds.len(),
        enc.params.total_values()
    );
    let summary = train_loop(
        &mut enc,
        &ds,
        &cfg,
        &AblationFlags::default(),
        &dir.join("train"),
        false,
    )?;

    println!("\nheld-out evaluation (step 0 -> final):");
    println!(
        "  top-down selection IoU   {:.3} -> {:.3}",
        summary.step0.iou, summary.final_eval.iou
    );
    println!(
        "  in-box selection recall  {:.3} -> {:.3}",
        summary.step0.recall, summary.final_eval.recall
    );
    println!(
        "  retrieval top-1 of 8     {:.3} -> {:.3}  (chance 0.125)",
        summary.step0.retrieval, summary.final_eval.retrieval
    );
    println!("\nmetrics:    {}", summary.metrics_path.display());
    println!("checkpoint: {}", summary.checkpoint_path.display());
    println!("\nfor the full desk-scale run (2500 steps, ~20 min), see the");
    println!("acceptance suite: cargo test --release --test acceptance");
    Ok(())
}
