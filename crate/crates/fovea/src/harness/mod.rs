//! Cost accounting, scaling-regime experiments, selection metrics, and
//! visualization emitters.

pub mod cost;
pub mod eval;
pub mod scaling;
pub mod viz;

pub use cost::{count_tokens, flop_estimate, selection_of_counts, CostReport};
pub use eval::{gt_selection, random_selection, recall_eval, teacher_forced_selection};
pub use scaling::{
    checkpoint_name, counts_at_fraction, dynamic_resolution_schedule, rows_to_csv, run_accounting,
    run_scaling, Profile, Regime, ScalingRow, ScalingSchedule, SchedulePoint,
    DYNAMIC_THRESHOLD_RATIO, SCALING_CSV_HEADER,
};
pub use viz::{pca_features, render_heatmaps, render_score_heatmap, render_selection_overlay};
