//! Token and FLOP accounting across scaling regimes, including the 4K
//! ladder anchors (729 / 3645 / 3840 downstream tokens) and the
//! constant-cost property: stage-3 compute tracks the patch budget, not the
//! image resolution. Also shows the dynamic-resolution selection plan.
//!
//!     cargo run --release --example scaling_bench

use fovea::encoder::EncoderConfig;
use fovea::harness::{
    dynamic_resolution_schedule, rows_to_csv, run_accounting, ScalingSchedule,
    DYNAMIC_THRESHOLD_RATIO,
};

fn main() -> fovea::Result<()> {
    // The 4K ladder: three resolutions, whole-image selection at the two
    // lower ones, ~18% at 3780.
    let schedule = ScalingSchedule::from_text(
        "regime = whole-image\nprofile = 4k\n\
         point = 756, 1.0, 1.0\npoint = 1512, 1.0, 1.0\npoint = 3780, 1.0, 0.17558\n",
        "inline",
    )?;
    let rows = run_accounting(&schedule)?;
    println!("4K ladder accounting:");
    for r in &rows {
        println!(
            "  max {:>4}px  select {:>5.1}%  {:>6} patches -> {:>4} downstream tokens, stage-3 {:.2} GFLOPs",
            r.max_side,
            r.test_fraction * 100.0,
            r.selected_total,
            r.hr_tokens,
            r.stage3_flops as f64 / 1e9
        );
    }

    // Constant cost on the desk profile: the 128 ladder at 100% and the
    // 256 ladder at 20% both select 256 patches.
    let schedule = ScalingSchedule::from_text(
        "regime = constant-cost\npoint = 128, 1.0, 1.0\npoint = 256, 0.2, 0.2\n",
        "inline",
    )?;
    let rows = run_accounting(&schedule)?;
    println!("\nconstant-cost scaling (desk profile):");
    for r in &rows {
        println!(
            "  max {:>3}px  select {:>5.1}%  {:>4} patches  stage-3 {:>9} FLOPs",
            r.max_side,
            r.test_fraction * 100.0,
            r.selected_total,
            r.stage3_flops
        );
    }
    assert_eq!(rows[0].stage3_flops, rows[1].stage3_flops);
    println!("  -> equal stage-3 FLOPs at 2x the resolution");

    // Dynamic-resolution plan: finer scales activate as the input grows.
    println!("\ndynamic-resolution selection plan (desk profile, cap 320):");
    let cfg = EncoderConfig::desk(0);
    for res in [64, 100, 150, 200, 256] {
        let plan = dynamic_resolution_schedule(res, &cfg, DYNAMIC_THRESHOLD_RATIO)?;
        println!("  input {res:>3}px -> per-scale k {plan:?}");
    }

    println!("\nfull CSV:\n{}", rows_to_csv(&rows));
    Ok(())
}
