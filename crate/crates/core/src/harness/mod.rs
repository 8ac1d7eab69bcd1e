//! Experiment harness: file formats, synthetic feeder generation, subtree
//! auto-partitioning, and end-to-end scenario runs for the CLI.

pub mod format;
pub mod generate;
pub mod scenario;

pub use format::{
    read_feeder_file, read_partition_file, read_report, read_trace_file, write_feeder_file,
    write_message_log, write_partition_file, write_report, write_trace_file, write_voltage_profile,
    BoundsSpec, FeederFile, TraceData, TraceRecord,
};
pub use generate::{auto_partition, generate_feeder, GeneratorSpec};
pub use scenario::{
    preset, run_scenario, DeviceRule, EpsilonChoice, FeederSource, HeadTarget, PartitionSource,
    ScenarioConfig, ScenarioSummary, SolverChoice, VoltageModel,
};
