//! Parameter and MAC counting, activation footprint and latency measurement.

mod bench;
mod liveness;
mod report;
mod tracer;

pub use bench::{bench_latency, host_descriptor, BenchError, BenchReport};
pub use liveness::{activation_footprint, live_nodes, peak_live_bytes, LiveNode};
pub use report::{
    count_flops, count_params, report_for, rows_from_trace, trace_model, with_input_hw, EfficiencyReport, LayerRow,
    Totals,
};
pub use tracer::{NodeKind, TVar, TraceNode, Tracer, ROOT_SCOPE};
