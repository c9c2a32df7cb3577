//! Experiment commands: dataset generation, pretraining, adaptation,
//! evaluation and the sweep, depth-ablation, stability and comparison
//! protocols. Each writes CSV results under the output directory.

mod commands;
mod results;
mod spec;

pub use commands::{
    cmd_ablate_depth, cmd_adapt, cmd_compare, cmd_eval, cmd_generate, cmd_pretrain, cmd_stability, cmd_sweep,
    compare_table, depth_label, depth_sets, hard_dice_all, load_backbone, predict, run_cell, write_predictions, Cell,
    PretrainSummary, Split, StabilityReport, Workspace,
};
pub use results::{
    mean, parse_rows, rows_csv, stems_hash, variance, without_wall_time, ResultRow, RESULTS_HEADER, RESULTS_VERSION,
};
pub use spec::{ExperimentSpec, REFERENCE_SIZES, TOY_SIZES};
