//! Expert offloading: a timing model, an event simulator, and a real
//! two-lane executor.

pub mod executor;
pub mod sim;
pub mod timing;

pub use executor::{run_offloaded_decode, summary_csv, ExecConfig, ExecMode, ExecReport};
pub use sim::{
    analytic_improvement, boundary_term, breakdown, simulate_on_demand, simulate_prefetch, Breakdown, EventKind, Lane,
    ScheduleEvent, ScheduleReport,
};
pub use timing::{GeometryTiming, LayerTiming, ModelGeometry, TimingModel, TimingSpec};
