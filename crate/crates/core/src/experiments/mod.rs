//! Sweeps that reproduce the qualitative experiment shapes, per-iteration
//! cost accounting and plot emission.

mod flops;
mod plot;
mod sweep;

pub use flops::{
    cost_to_epsilon, empirical_op_count, flops_per_iteration, iterations_to_epsilon, FlopModel, FlopRecord,
    FLOPS_PER_MULADD,
};
pub use plot::{emit_plot, plot_from_csv, render_svg, Heatmap, Plot, PlotBody, PlotKind, Point, Series};
pub use sweep::{
    run_sweep, update_index, Axis, CellKey, CellResult, CellSummary, DataSpec, FrontierEntry, Metric, ModelSpec,
    SweepKind, SweepOutput, SweepSpec, TrialResult, Variable,
};
