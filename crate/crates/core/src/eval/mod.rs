//! Scoring, repeated-run aggregation, experiment grids and delta reports.

mod f1;
mod grid;
mod report;

pub use f1::weighted_f1;
pub use grid::{mean_std, run_grid, AxisValue, ExperimentData, GridOptions, ResultCell, SweepAxis, Variant};
pub use report::{improvement_report, read_results_csv, write_delta_csv, write_results_csv, DeltaRow, ResultRow};
pub use report::target_name;
