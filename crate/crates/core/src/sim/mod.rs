//! Delay and energy model of a ViT effort on a systolic-array accelerator
//! with PS-side non-linear ops.

pub mod cycles;
pub mod hardware;
pub mod report;
pub mod workload;

pub use cycles::{gemm_cycles_analytic, gemm_cycles_oracle, DEFAULT_ORACLE_CAP};
pub use hardware::{Dataflow, HardwareConfig};
pub use report::{
    calibrate_ps_latency, combined_delay, recomputation_overhead, simulate, CombinedReport,
    DelayBreakdown, EnergyFigures, SimReport,
};
pub use workload::{lower_workload, ModuleLabel, WorkloadItem, WorkloadKind};
